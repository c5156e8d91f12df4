"""Dense float64 array substrate and the binary tensor dump format.

numpy's ndarray carries every real-valued array in this package
(signals, kernels, feature maps, gradients).  This module pins the
conventions -- float64, C-order (row-major) -- and provides the small
set of checked operations and the on-disk dump format the rest of the
code builds on.

Arrays are treated as immutable once handed to another module; the only
in-place mutation happens inside optimizers on parameter buffers they
own.  There is no internal locking.
"""

import struct

import numpy as np

from .errors import FormatError, ShapeError

DTYPE = np.float64


def _check_shape(shape):
    shape = tuple(int(n) for n in shape)
    if len(shape) == 0:
        raise ShapeError("shape must have at least one extent")
    for n in shape:
        if n < 1:
            raise ShapeError(f"extents must be >= 1, got {shape}")
    return shape


def zeros(shape):
    """Tensor of the given shape filled with 0.0."""
    return np.zeros(_check_shape(shape), dtype=DTYPE)


def as_tensor(data):
    """Coerce nested sequences or arrays to a float64 C-order array."""
    return np.ascontiguousarray(data, dtype=DTYPE)


def matmul(a, b):
    """Matrix product of two rank-2 tensors."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def reduce_and_argmax(t, axis):
    """Max over one axis plus the index of the first maximal entry.

    Ties resolve to the lowest index, which keeps gradient routing
    deterministic wherever this feeds a backward pass.
    """
    t = np.asarray(t)
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {t.ndim}")
    return t.max(axis=axis), t.argmax(axis=axis)


def save_tensor(file, arr):
    """Write a tensor dump: {rank: u32, extents: u32 each} then f64 data.

    Everything is little-endian; data is row-major.
    """
    arr = as_tensor(arr)
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = header + arr.astype("<f8").tobytes(order="C")
    if hasattr(file, "write"):
        file.write(payload)
    else:
        with open(file, "wb") as fh:
            fh.write(payload)


def load_tensor(file):
    """Read a tensor dump written by :func:`save_tensor`."""
    if hasattr(file, "read"):
        raw = file.read()
    else:
        with open(file, "rb") as fh:
            raw = fh.read()
    return tensor_from_bytes(raw)


def tensor_from_bytes(raw):
    if len(raw) < 4:
        raise FormatError("tensor dump truncated before rank field")
    (rank,) = struct.unpack_from("<I", raw, 0)
    if rank < 1 or rank > 32:
        raise FormatError(f"implausible tensor rank {rank}")
    if len(raw) < 4 + 4 * rank:
        raise FormatError("tensor dump truncated inside extent list")
    shape = struct.unpack_from(f"<{rank}I", raw, 4)
    if any(n < 1 for n in shape):
        raise FormatError(f"tensor dump carries non-positive extent {shape}")
    count = int(np.prod(shape))
    body = raw[4 + 4 * rank:]
    if len(body) != 8 * count:
        raise FormatError(
            f"tensor dump payload is {len(body)} bytes, expected {8 * count} for shape {shape}"
        )
    data = np.frombuffer(body, dtype="<f8").astype(DTYPE)
    return data.reshape(shape)
