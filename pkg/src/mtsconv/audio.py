"""Waveform-to-spectrogram preprocessing chain.

WAV decode -> resample to 16 kHz -> Hann-windowed STFT magnitude
(20 ms windows, 10 ms hop) -> zero-padding or 4 s / 2 s segmentation ->
normalization with training-fold statistics.

Per-file preprocessing is embarrassingly parallel; statistics are a
two-pass reduce over the training files.
"""

import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, FormatError
from .interp import output_length, resample_to_length
from .tensor import DTYPE, load_tensor, save_tensor

TARGET_RATE = 16000
WINDOW_SECONDS = 0.020
HOP_SECONDS = 0.010
SEGMENT_SECONDS = 4.0
SEGMENT_HOP_SECONDS = 2.0
CACHE_STATS_VERSION = 0  # caches hold raw (unnormalized) magnitudes


@dataclass
class AudioClip:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=DTYPE)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise DataError("clip must hold at least one sample")
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")


@dataclass
class Spectrogram:
    """Time x frequency grid of STFT magnitudes (or normalized values)."""

    frames: np.ndarray  # [T, F]
    window_seconds: float = WINDOW_SECONDS
    hop_seconds: float = HOP_SECONDS
    sample_rate: int = TARGET_RATE
    normalized: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=DTYPE)
        if self.frames.ndim != 2:
            raise DataError(f"spectrogram frames must be rank-2, got {self.frames.shape}")

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def num_bins(self):
        return self.frames.shape[1]


# -- WAV ---------------------------------------------------------------------


def decode_wav(source):
    """Decode a RIFF/WAVE file (16-bit PCM or 32-bit float, any channel
    count; channels are averaged to mono) into an AudioClip."""
    if isinstance(source, (str, Path)):
        raw = Path(source).read_bytes()
    elif isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    else:
        raw = source.read()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError("not a RIFF/WAVE stream")
    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"chunk {cid!r} truncated")
        if cid == b"fmt ":
            if size < 16:
                raise FormatError("fmt chunk too small")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None or data is None:
        raise FormatError("missing fmt or data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if channels < 1:
        raise FormatError("channel count must be >= 1")
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(data[: len(data) - len(data) % (2 * channels)], dtype="<i2")
        samples = samples.astype(DTYPE) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(data[: len(data) - len(data) % (4 * channels)], dtype="<f4")
        samples = samples.astype(DTYPE)
    else:
        raise FormatError(f"unsupported codec: format {audio_format}, {bits}-bit")
    if samples.size == 0:
        raise FormatError("empty data chunk")
    if channels > 1:
        samples = samples[: samples.size - samples.size % channels]
        samples = samples.reshape(-1, channels).mean(axis=1)
    return AudioClip(samples, rate)


def write_wav(path, clip, fmt="pcm16"):
    """Write an AudioClip as RIFF/WAVE; mainly used to build fixtures."""
    if fmt == "pcm16":
        body = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
        audio_format, bits = 1, 16
    elif fmt == "float32":
        body = clip.samples.astype("<f4").tobytes()
        audio_format, bits = 3, 32
    else:
        raise FormatError(f"unknown wav format {fmt!r}")
    block = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(body), b"WAVE", b"fmt ", 16,
        audio_format, 1, clip.sample_rate, clip.sample_rate * block, block, bits,
        b"data", len(body),
    )
    payload = header + body
    if isinstance(path, (str, Path)):
        Path(path).write_bytes(payload)
    else:
        path.write(payload)
    return payload


# -- resampling / STFT ---------------------------------------------------------


def resample_audio(clip, target_rate=TARGET_RATE):
    """Linear-interpolation resampling of the waveform to target_rate."""
    if target_rate <= 0:
        raise DataError(f"target rate must be positive, got {target_rate}")
    if clip.sample_rate == target_rate:
        return clip
    new_len = output_length(clip.samples.size, target_rate / clip.sample_rate)
    return AudioClip(resample_to_length(clip.samples, new_len, axis=0), target_rate)


def stft_magnitude(clip, window_seconds=WINDOW_SECONDS, hop_seconds=HOP_SECONDS):
    """Hann-windowed magnitude STFT: [T, win/2 + 1] with
    T = floor((N - win) / hop) + 1."""
    win = int(round(window_seconds * clip.sample_rate))
    hop = int(round(hop_seconds * clip.sample_rate))
    n = clip.samples.size
    if n < win:
        raise DataError(f"clip of {n} samples shorter than one {win}-sample window")
    frames = sliding_window_view(clip.samples, win)[::hop]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)  # periodic Hann
    mag = np.abs(np.fft.rfft(frames * window, axis=1))
    return Spectrogram(np.ascontiguousarray(mag), window_seconds, hop_seconds,
                       clip.sample_rate, normalized=False)


# -- framing -------------------------------------------------------------------


def pad_spectrogram(spec, target_frames):
    """Append zero frames up to target_frames."""
    t = spec.num_frames
    if target_frames < t:
        raise DataError(f"pad target {target_frames} smaller than {t} frames")
    if target_frames == t:
        return replace(spec, frames=spec.frames)
    padded = np.zeros((target_frames, spec.num_bins), dtype=DTYPE)
    padded[:t] = spec.frames
    return replace(spec, frames=padded)


def segment_frames(spec, segment_seconds=SEGMENT_SECONDS, hop_seconds=SEGMENT_HOP_SECONDS):
    """Frame counts (length, hop) of the fixed segmentation grid."""
    win = int(round(spec.window_seconds * spec.sample_rate))
    hop = int(round(spec.hop_seconds * spec.sample_rate))
    seg_len = (int(round(segment_seconds * spec.sample_rate)) - win) // hop + 1
    seg_hop = int(round(hop_seconds / spec.hop_seconds))
    return seg_len, seg_hop


def segment_spectrogram(spec, segment_seconds=SEGMENT_SECONDS,
                        hop_seconds=SEGMENT_HOP_SECONDS):
    """Split into fixed-length overlapping segments; the final partial
    segment is zero-padded.  A clip no longer than one segment yields
    exactly one."""
    seg_len, seg_hop = segment_frames(spec, segment_seconds, hop_seconds)
    t = spec.num_frames
    if t <= seg_len:
        count = 1
    else:
        count = math.ceil((t - seg_len) / seg_hop) + 1
    out = []
    for i in range(count):
        start = i * seg_hop
        chunk = spec.frames[start:start + seg_len]
        if chunk.shape[0] < seg_len:
            padded = np.zeros((seg_len, spec.num_bins), dtype=DTYPE)
            padded[: chunk.shape[0]] = chunk
            chunk = padded
        out.append(replace(spec, frames=np.ascontiguousarray(chunk)))
    return out


def pad_or_segment(spec, mode, target_frames=None):
    """Dispatch to pad (one spectrogram) or segment (several)."""
    if mode == "pad":
        if target_frames is None:
            raise DataError("pad mode needs target_frames")
        return [pad_spectrogram(spec, target_frames)]
    if mode == "segment":
        return segment_spectrogram(spec)
    raise DataError(f"unknown mode {mode!r}, expected 'pad' or 'segment'")


# -- normalization -------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


def compute_stats(specs):
    """Scalar mean/std over every entry of the given (training) spectrograms."""
    total = 0
    acc = 0.0
    acc2 = 0.0
    for spec in specs:
        frames = spec.frames if isinstance(spec, Spectrogram) else np.asarray(spec)
        total += frames.size
        acc += float(frames.sum())
        acc2 += float(np.square(frames).sum())
    if total == 0:
        raise DataError("no spectrogram entries to compute statistics from")
    mean = acc / total
    var = acc2 / total - mean * mean
    if var <= 0.0:
        raise DataError("zero-variance training data; cannot normalize")
    return NormStats(mean, math.sqrt(var))


def normalize(spec, stats):
    """Apply (x - mean) / std; works on Spectrograms or raw arrays."""
    if isinstance(spec, Spectrogram):
        return replace(spec, frames=(spec.frames - stats.mean) / stats.std, normalized=True)
    return (np.asarray(spec, dtype=DTYPE) - stats.mean) / stats.std


# -- cache files ---------------------------------------------------------------


def save_cache_entry(cache_dir, uid, frames, meta):
    """Write one spectrogram cache entry: tensor dump plus JSON sidecar."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    save_tensor(cache_dir / f"{uid}.ten", frames)
    sidecar = {"id": uid, "frames": int(np.asarray(frames).shape[0]),
               "stats_version": CACHE_STATS_VERSION}
    sidecar.update(meta)
    (cache_dir / f"{uid}.json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=1) + "\n"
    )


def load_cache_entry(cache_dir, uid):
    """Read one cache entry; raises DataError naming the utterance if absent."""
    cache_dir = Path(cache_dir)
    ten = cache_dir / f"{uid}.ten"
    side = cache_dir / f"{uid}.json"
    if not ten.exists() or not side.exists():
        raise DataError(f"missing cache entry for utterance {uid!r} in {cache_dir}")
    return load_tensor(ten), json.loads(side.read_text())


def list_cache_segments(cache_dir, uid):
    """Cache ids for an utterance: the id itself or its .segNN parts."""
    cache_dir = Path(cache_dir)
    if (cache_dir / f"{uid}.ten").exists():
        return [uid]
    parts = sorted(p.stem for p in cache_dir.glob(f"{uid}.seg*.ten"))
    if not parts:
        raise DataError(f"missing cache entry for utterance {uid!r} in {cache_dir}")
    return parts
