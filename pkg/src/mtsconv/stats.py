"""Paired significance testing and improvement summaries.

Pure functions, thread-safe by construction.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float        # W = min(W+, W-)
    p_value: float
    n: int                  # pairs remaining after dropping zero differences
    method: str             # "exact" | "normal" | "degenerate"


def _ranks_with_ties(values):
    """Average ranks (1-based) of values, ties sharing their mean rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _normal_cdf(z):
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


EXACT_LIMIT = 20


def wilcoxon_signed_rank(pairs, method="auto"):
    """Two-sided Wilcoxon signed-rank test on paired observations.

    ``pairs`` is an iterable of (first, second); differences are taken
    as second - first.  Zero differences are dropped; tied absolute
    differences share average ranks.  Up to ``EXACT_LIMIT`` pairs the
    p-value enumerates all 2^n sign assignments; above that (or with
    method="normal") a normal approximation with continuity and tie
    corrections is used.

    All differences zero yields a degenerate result with p = 1.
    """
    if method not in ("auto", "exact", "normal"):
        raise DataError(f"unknown method {method!r}")
    pairs = list(pairs)
    if not pairs:
        raise DataError("no pairs given")
    diffs = np.array([float(b) - float(a) for a, b in pairs])
    diffs = diffs[diffs != 0.0]
    n = diffs.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    ranks = _ranks_with_ties(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())
    w_minus = float(ranks[diffs < 0].sum())
    w = min(w_plus, w_minus)

    if method == "exact" or (method == "auto" and n <= EXACT_LIMIT):
        # null distribution of W+ over every equally-likely sign vector
        at_most = 0
        at_least = 0
        total = 2 ** n
        for signs in itertools.product((0.0, 1.0), repeat=n):
            wp = float(np.dot(signs, ranks))
            at_most += wp <= w_plus
            at_least += wp >= w_plus
        p = min(1.0, 2.0 * min(at_most, at_least) / total)
        return WilcoxonResult(w, p, n, "exact")

    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(np.abs(diffs), return_counts=True)
    var -= float(((tie_counts ** 3) - tie_counts).sum()) / 48.0
    if var <= 0:
        return WilcoxonResult(w, 1.0, n, "degenerate")
    z = (w - mean + 0.5) / math.sqrt(var)  # continuity-corrected lower tail
    p = min(1.0, 2.0 * _normal_cdf(z))
    return WilcoxonResult(w, p, n, "normal")


@dataclass(frozen=True)
class ImprovementSummary:
    mean_delta: float
    std_delta: float
    max_delta: float
    per_dataset_means: dict


def improvement_summary(pairs, datasets=None):
    """Deltas (second - first, in the pairs' units) summarized.

    The standard deviation uses the n-1 (sample) convention.  When
    ``datasets`` labels each pair, per-dataset mean deltas are included.
    """
    pairs = list(pairs)
    if not pairs:
        raise DataError("no pairs given")
    deltas = np.array([float(b) - float(a) for a, b in pairs])
    per_dataset = {}
    if datasets is not None:
        datasets = list(datasets)
        if len(datasets) != len(pairs):
            raise DataError("datasets labels must match pairs")
        for name in dict.fromkeys(datasets):
            sel = [d for d, tag in zip(deltas, datasets) if tag == name]
            per_dataset[name] = float(np.mean(sel))
    std = float(deltas.std(ddof=1)) if deltas.size > 1 else 0.0
    return ImprovementSummary(
        mean_delta=float(deltas.mean()),
        std_delta=std,
        max_delta=float(deltas.max()),
        per_dataset_means=per_dataset,
    )
