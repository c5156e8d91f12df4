"""Manifest-driven corpus handling, speaker-disjoint cross-validation
folds, and the synthetic time-stretched-pattern generator used for
desk-scale experiments.

A manifest is a CSV with header ``id,path,label,speaker``; any corpus
that can be described that way (one row per utterance) runs through the
same pipeline.  Label filtering or remapping is the manifest author's
job.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import compute_stats, load_cache_entry, list_cache_segments, save_cache_entry
from .errors import DataError
from .interp import resample_time
from .tensor import DTYPE

log = logging.getLogger(__name__)

MANIFEST_HEADER = ["id", "path", "label", "speaker"]


@dataclass(frozen=True)
class ManifestEntry:
    uid: str
    path: str
    label: int
    speaker: str


@dataclass
class DatasetManifest:
    entries: list
    label_names: tuple

    @property
    def num_classes(self):
        return len(self.label_names)

    def speakers(self):
        return sorted({e.speaker for e in self.entries})

    @classmethod
    def from_rows(cls, rows):
        """rows: iterable of (id, path, raw_label, speaker).  Raw labels
        are mapped to contiguous 0..C-1 ids in sorted order."""
        rows = list(rows)
        if not rows:
            raise DataError("manifest holds no entries")
        labels = sorted({str(r[2]) for r in rows})
        index = {name: i for i, name in enumerate(labels)}
        entries = []
        for uid, path, label, speaker in rows:
            if not str(speaker):
                raise DataError(f"utterance {uid!r} has an empty speaker id")
            entries.append(ManifestEntry(str(uid), str(path), index[str(label)], str(speaker)))
        return cls(entries, tuple(labels))

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
                raise DataError(
                    f"manifest {path} must start with header {','.join(MANIFEST_HEADER)}"
                )
            rows = [row for row in reader if row]
        for row in rows:
            if len(row) != 4:
                raise DataError(f"manifest row {row!r} does not have 4 fields")
        return cls.from_rows(rows)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(MANIFEST_HEADER)
            for e in self.entries:
                writer.writerow([e.uid, e.path, self.label_names[e.label], e.speaker])


@dataclass(frozen=True)
class FoldSplit:
    train_speakers: tuple
    val_speakers: tuple
    test_speakers: tuple


@dataclass
class FoldPlan:
    """Speaker assignments for each cross-validation fold.

    Four speaker blocks of roughly 10% of the utterances each rotate
    through the test role; validation takes the next two blocks
    cyclically and training keeps the remaining block plus every
    speaker outside the rotation, which lands close to a 70/20/10
    utterance split while keeping speakers disjoint across splits.
    """

    folds: tuple
    seed: int

    @property
    def num_folds(self):
        return len(self.folds)

    def split_entries(self, manifest, fold_index):
        split = self.folds[fold_index]
        by = {"train": set(split.train_speakers), "val": set(split.val_speakers),
              "test": set(split.test_speakers)}
        out = {}
        for name, speakers in by.items():
            out[name] = [e for e in manifest.entries if e.speaker in speakers]
        return out


def build_folds(manifest, seed, num_folds=4):
    """Greedy speaker packing into rotating test blocks; deterministic."""
    if num_folds < 4:
        raise DataError("fold rotation needs at least 4 folds")
    counts = {}
    for e in manifest.entries:
        counts[e.speaker] = counts.get(e.speaker, 0) + 1
    speakers = sorted(counts)
    if len(speakers) < num_folds:
        raise DataError(
            f"need at least {num_folds} distinct speakers, got {len(speakers)}"
        )
    rng = np.random.default_rng(seed)
    shuffle_rank = {s: r for s, r in zip(speakers, rng.permutation(len(speakers)))}
    ordered = sorted(speakers, key=lambda s: (counts[s], shuffle_rank[s]))

    total = len(manifest.entries)
    target = 0.10 * total
    blocks = [[] for _ in range(num_folds)]
    fills = [0.0] * num_folds
    rest = []
    for s in ordered:
        j = int(np.argmin(fills))
        if not blocks[j]:
            blocks[j].append(s)
            fills[j] += counts[s]
            continue
        overshoot = fills[j] + counts[s] - target
        undershoot = target - fills[j]
        if overshoot <= undershoot:
            blocks[j].append(s)
            fills[j] += counts[s]
        else:
            rest.append(s)

    folds = []
    for k in range(num_folds):
        test = tuple(sorted(blocks[k]))
        val = tuple(sorted(blocks[(k + 1) % num_folds] + blocks[(k + 2) % num_folds]))
        train = tuple(sorted(blocks[(k + 3) % num_folds] + rest))
        folds.append(FoldSplit(train, val, test))
    plan = FoldPlan(tuple(folds), seed)

    for k, split in enumerate(plan.folds):
        sizes = [sum(counts[s] for s in spk)
                 for spk in (split.train_speakers, split.val_speakers, split.test_speakers)]
        fractions = [100.0 * n / total for n in sizes]
        for frac, want, name in zip(fractions, (70, 20, 10), ("train", "val", "test")):
            if abs(frac - want) > 15:
                log.warning(
                    "fold %d %s split holds %.1f%% of utterances (target %d%%); "
                    "speaker distribution makes the proportions unattainable",
                    k, name, frac, want,
                )
    return plan


# -- synthetic corpus ----------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 4
    samples_per_class: int = 200
    factors: tuple = (0.5, 1.0, 2.0)
    noise: float = 1.4
    seed: int = 0
    speakers: int = 12
    frames: int = 44
    bins: int = 20
    template_frames: int = 18


def class_templates(num_classes, template_frames=20, bins=24, sigma=1.0, cycles=3.0):
    """Distinct time-frequency ridge templates, one per class.

    Trajectory shapes (rising, falling, valley, peak) cycle across
    classes; all share one frequency band so classes differ by shape,
    not by static frequency content.  An amplitude modulation along
    time makes scale-mismatched correlation decohere: stretching the
    ridge also stretches the modulation, so a fixed-scale matcher loses
    most of its response on stretched instances.
    """
    if num_classes < 2:
        raise DataError("need at least 2 classes")
    t = np.linspace(0.0, 1.0, template_frames)
    lo, hi = 3.0, bins - 4.0
    trajectories = [
        lo + (hi - lo) * t,
        hi - (hi - lo) * t,
        hi - (hi - lo) * np.sin(np.pi * t),
        lo + (hi - lo) * np.sin(np.pi * t),
    ]
    amplitude = 0.65 + 0.35 * np.cos(2.0 * np.pi * cycles * t)
    f = np.arange(bins, dtype=DTYPE)
    out = np.zeros((num_classes, template_frames, bins), dtype=DTYPE)
    for c in range(num_classes):
        ridge = trajectories[c % len(trajectories)]
        shift = 1.5 * (c // len(trajectories))  # reuse shapes in a shifted band
        centers = np.clip(ridge + shift, 1.0, bins - 2.0)
        out[c] = amplitude[:, None] * np.exp(-0.5 * ((f[None, :] - centers[:, None]) / sigma) ** 2)
    return out


def _speaker_plan(config):
    """Per-speaker stretch factors and per-class utterance counts.

    With enough speakers (>= 8) and more than one factor, most speakers
    speak at factor 1.0 and the last four alternate through the non-1
    factors; those four also get strictly the fewest utterances, so the
    fold builder's greedy packing places exactly them into the rotating
    test blocks.  Speaker-disjoint splits then separate stretch-factor
    usage: every fold is tested on a stretch factor that is absent from
    (or rare in) its training split.  Small configs fall back to
    cycling all factors across all speakers.
    """
    factors = tuple(config.factors)
    names = [f"spk{j:02d}" for j in range(config.speakers)]
    non_unit = [f for f in factors if f != 1.0]
    if 1.0 in factors and non_unit and config.speakers >= 8:
        stretch = names[-4:]
        speaker_factor = {s: 1.0 for s in names[:-4]}
        speaker_factor.update({s: non_unit[i % len(non_unit)]
                               for i, s in enumerate(stretch)})
        typical = names[:-4]
    else:
        speaker_factor = {s: factors[j % len(factors)] for j, s in enumerate(names)}
        stretch = []
        typical = names
    base, extras = divmod(config.samples_per_class, config.speakers)
    counts = {s: base for s in names}
    for i in range(extras):
        counts[typical[i % len(typical)]] += 1
    if stretch and extras == 0 and base > 1:
        # keep the stretch speakers strictly lightest
        for i, s in enumerate(stretch):
            counts[s] -= 1
            counts[typical[i % len(typical)]] += 1
    return speaker_factor, counts


def synth_generate(config, out_dir):
    """Write a synthetic time-stretched-pattern corpus.

    Each sample embeds its class template, resampled on the time axis
    by the stretch factor tied to the sample's synthetic speaker, at a
    random onset over folded-Gaussian background noise.  See
    :func:`_speaker_plan` for how factors attach to speakers.
    Deterministic for a given config.
    """
    out_dir = Path(out_dir)
    cache_dir = out_dir / "cache"
    rng = np.random.default_rng(config.seed)
    templates = class_templates(config.classes, config.template_frames, config.bins)
    factors = tuple(config.factors)
    stretched = {
        f: [resample_time(templates[c], f, axis=0) for c in range(config.classes)]
        for f in factors
    }
    speaker_factor, counts = _speaker_plan(config)
    rows = []
    idx = 0
    for c in range(config.classes):
        speakers_seq = [s for s in sorted(counts) for _ in range(counts[s])]
        for speaker in speakers_seq:
            factor = speaker_factor[speaker]
            patt = stretched[factor][c]
            if config.noise > 0:
                x = np.abs(rng.normal(0.0, config.noise, size=(config.frames, config.bins)))
            else:
                x = np.zeros((config.frames, config.bins))
            onset = int(rng.integers(0, config.frames - patt.shape[0] + 1))
            x[onset:onset + patt.shape[0]] += patt
            uid = f"utt{idx:04d}"
            save_cache_entry(cache_dir, uid, x, {
                "label": c, "speaker": speaker,
                "factor": factor, "onset": onset, "utterance": uid,
            })
            rows.append((uid, f"cache/{uid}.ten", c, speaker))
            idx += 1
    manifest = DatasetManifest.from_rows(rows)
    manifest.write_csv(out_dir / "manifest.csv")
    return manifest, cache_dir


# -- batch loading --------------------------------------------------------------


class FoldBatches:
    """Normalized batch iterators for one fold.

    All cache entries of the fold are loaded up front (desk-scale
    datasets), normalized with statistics computed from the training
    split only.  Training batches reshuffle per epoch from a seeded
    stream; validation and test order is fixed.
    """

    def __init__(self, manifest, plan, fold_index, cache_dir, batch_size=32, seed=0):
        self.batch_size = batch_size
        self.seed = seed
        splits = plan.split_entries(manifest, fold_index)
        raw = {}
        for name, entries in splits.items():
            items = []
            for e in entries:
                for cache_id in list_cache_segments(cache_dir, e.uid):
                    frames, _ = load_cache_entry(cache_dir, cache_id)
                    items.append((frames, e.label, e.uid))
            if not items:
                raise DataError(f"fold {fold_index} {name} split is empty")
            shapes = {item[0].shape for item in items}
            if len(shapes) != 1:
                raise DataError(
                    f"{name} split mixes frame shapes {sorted(shapes)}; "
                    "preprocess with a fixed-size mode first"
                )
            raw[name] = items
        self.stats = compute_stats([item[0] for item in raw["train"]])
        self._data = {}
        for name, items in raw.items():
            x = np.stack([(item[0] - self.stats.mean) / self.stats.std for item in items])
            x = np.ascontiguousarray(x[:, None, :, :], dtype=DTYPE)
            y = np.array([item[1] for item in items], dtype=np.intp)
            groups = [item[2] for item in items]
            self._data[name] = (x, y, groups)

    def split_size(self, name):
        return self._data[name][0].shape[0]

    def _batches(self, name, order):
        x, y, groups = self._data[name]
        for start in range(0, len(order), self.batch_size):
            sel = order[start:start + self.batch_size]
            yield x[sel], y[sel], [groups[i] for i in sel]

    def train_batches(self, epoch):
        n = self.split_size("train")
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch]))
        return self._batches("train", rng.permutation(n))

    def val_batches(self):
        return self._batches("val", np.arange(self.split_size("val")))

    def test_batches(self):
        return self._batches("test", np.arange(self.split_size("test")))


def load_fold(manifest, plan, fold_index, cache_dir, batch_size=32, seed=0):
    return FoldBatches(manifest, plan, fold_index, cache_dir, batch_size, seed)
