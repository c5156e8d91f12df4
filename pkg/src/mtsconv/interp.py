"""Endpoint-aligned linear resampling along one axis, with exact adjoint.

The sampling rule maps output index i to source position
``i * (L - 1) / (L' - 1)``, so the first and last samples of the source
are always preserved exactly.  Degenerate cases: a single-sample source
broadcasts; a single-sample target reads the source midpoint.

Every resampling here is a linear map, and ``adjoint_resample`` applies
its exact transpose, which is what the backward passes route gradients
through.  ``interpolation_matrix`` materializes the map densely and is
mainly useful as a test oracle.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .tensor import DTYPE


@dataclass(frozen=True)
class ScaleSet:
    """Ordered stretch factors of a multi-scale layer; always contains 1.0."""

    factors: tuple

    def __post_init__(self):
        factors = tuple(float(f) for f in self.factors)
        object.__setattr__(self, "factors", factors)
        if not factors:
            raise ParameterError("scale set is empty")
        if any(f <= 0 for f in factors):
            raise ParameterError(f"scale factors must be positive, got {factors}")
        if any(b <= a for a, b in zip(factors, factors[1:])):
            raise ParameterError(f"scale factors must be strictly increasing, got {factors}")
        if 1.0 not in factors:
            raise ParameterError(f"scale set must contain 1.0, got {factors}")

    @classmethod
    def parse(cls, text):
        """Parse a comma-separated factor list such as ``"0.5,1,2"``."""
        try:
            factors = tuple(float(tok) for tok in str(text).split(",") if tok.strip())
        except ValueError as exc:
            raise ParameterError(f"cannot parse scale set {text!r}") from exc
        return cls(factors)

    def __len__(self):
        return len(self.factors)

    def __iter__(self):
        return iter(self.factors)

    def __str__(self):
        return ",".join(format(f, "g") for f in self.factors)


def output_length(source_len, factor):
    """Resampled length: ``max(1, round(L * factor))``, half away from zero."""
    if factor <= 0:
        raise ParameterError(f"scale factor must be positive, got {factor}")
    if source_len < 1:
        raise ParameterError(f"source length must be >= 1, got {source_len}")
    return max(1, int(math.floor(source_len * factor + 0.5)))


def interp_taps(source_len, target_len):
    """Two-tap interpolation stencil (idx0, idx1, w0, w1) per output sample."""
    if source_len < 1 or target_len < 1:
        raise ParameterError(
            f"lengths must be >= 1, got source {source_len}, target {target_len}"
        )
    if source_len == 1:
        idx = np.zeros(target_len, dtype=np.intp)
        return idx, idx, np.ones(target_len, dtype=DTYPE), np.zeros(target_len, dtype=DTYPE)
    if target_len == 1:
        pos = np.array([(source_len - 1) / 2.0])
    else:
        pos = np.arange(target_len, dtype=DTYPE) * (source_len - 1) / (target_len - 1)
    idx0 = np.minimum(np.floor(pos).astype(np.intp), source_len - 2)
    w1 = pos - idx0
    return idx0, idx0 + 1, 1.0 - w1, w1


def interpolation_matrix(source_len, target_len):
    """Dense [target, source] matrix of the resampling map; each row is
    a convex combination of at most two source samples."""
    idx0, idx1, w0, w1 = interp_taps(source_len, target_len)
    mat = np.zeros((target_len, source_len), dtype=DTYPE)
    rows = np.arange(target_len)
    mat[rows, idx0] += w0
    mat[rows, idx1] += w1
    return mat


def _shaped(weights, rank, axis):
    shape = [1] * rank
    shape[axis] = len(weights)
    return weights.reshape(shape)


def resample_to_length(t, target_len, axis=-1):
    """Resample one axis of ``t`` to exactly ``target_len`` samples.

    When the mapping is the identity the input array itself is returned;
    callers that mutate the result must copy.
    """
    t = np.asarray(t, dtype=DTYPE)
    axis = axis % t.ndim
    source_len = t.shape[axis]
    if target_len < 1:
        raise ParameterError(f"target length must be >= 1, got {target_len}")
    if target_len == source_len:
        return t
    idx0, idx1, w0, w1 = interp_taps(source_len, target_len)
    out = np.take(t, idx0, axis=axis) * _shaped(w0, t.ndim, axis)
    out += np.take(t, idx1, axis=axis) * _shaped(w1, t.ndim, axis)
    return out


def resample_time(t, factor, axis=-1):
    """Stretch (factor > 1) or compress (factor < 1) one axis of ``t``."""
    t = np.asarray(t, dtype=DTYPE)
    axis = axis % t.ndim
    return resample_to_length(t, output_length(t.shape[axis], factor), axis=axis)


def adjoint_resample(grad_out, source_len, axis=-1):
    """Transpose of the resampling map that produced ``grad_out``.

    If the forward call was ``y = resample_to_length(x, L')`` with
    ``x.shape[axis] == source_len``, this returns ``A^T @ grad_out``
    where ``A`` is the forward interpolation matrix.  Identity mappings
    return ``grad_out`` itself.
    """
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    axis = axis % grad_out.ndim
    target_len = grad_out.shape[axis]
    if source_len < 1:
        raise ParameterError(f"source length must be >= 1, got {source_len}")
    if target_len == source_len:
        return grad_out
    idx0, idx1, w0, w1 = interp_taps(source_len, target_len)
    out_shape = list(grad_out.shape)
    out_shape[axis] = source_len
    out = np.zeros(out_shape, dtype=DTYPE)
    moved = np.moveaxis(grad_out, axis, 0)
    out_moved = np.moveaxis(out, axis, 0)
    # scatter-add; idx0/idx1 collide across output samples, so no fancy-index set
    for i in range(target_len):
        out_moved[idx0[i]] += w0[i] * moved[i]
        out_moved[idx1[i]] += w1[i] * moved[i]
    return out
