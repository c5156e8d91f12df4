import io

import numpy as np
import pytest

from mtsconv.errors import FormatError, ShapeError
from mtsconv.tensor import (load_tensor, matmul, reduce_and_argmax, save_tensor,
                            tensor_from_bytes, zeros)


def test_zeros_basic():
    t = zeros([2, 3])
    assert t.shape == (2, 3)
    assert t.dtype == np.float64
    assert np.all(t == 0.0)
    assert zeros([1]).tolist() == [0.0]
    assert zeros([4, 5, 1]).size == 20


@pytest.mark.parametrize("shape", [[0], [2, 0], [-1, 3], []])
def test_zeros_rejects_bad_extents(shape):
    with pytest.raises(ShapeError):
        zeros(shape)


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), a), a)


def test_matmul_hand():
    assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    want = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    # BLAS may reorder the inner sum; agreement is to the last few ulps
    assert np.allclose(matmul(a, b), want, rtol=1e-13, atol=0.0)


def test_matmul_rejects_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 1)))


def test_reduce_and_argmax_hand():
    vals, idx = reduce_and_argmax(np.array([[1.0, 5.0], [7.0, 2.0]]), axis=0)
    assert vals.tolist() == [7.0, 5.0]
    assert idx.tolist() == [1, 0]


def test_reduce_and_argmax_tie_breaks_low():
    vals, idx = reduce_and_argmax(np.array([[2.0, 2.0, 2.0]]), axis=1)
    assert idx.tolist() == [0]


def test_reduce_and_argmax_against_scan():
    rng = np.random.default_rng(1)
    t = rng.normal(size=(3, 4, 5))
    for axis in range(3):
        vals, idx = reduce_and_argmax(t, axis)
        moved = np.moveaxis(t, axis, 0)
        want_vals = np.empty(moved.shape[1:])
        want_idx = np.empty(moved.shape[1:], dtype=int)
        for pos in np.ndindex(*moved.shape[1:]):
            best, best_i = -np.inf, 0
            for i in range(moved.shape[0]):
                if moved[(i,) + pos] > best:
                    best, best_i = moved[(i,) + pos], i
            want_vals[pos] = best
            want_idx[pos] = best_i
        assert np.array_equal(vals, want_vals)
        assert np.array_equal(idx, want_idx)


def test_reduce_and_argmax_axis_range():
    with pytest.raises(ShapeError):
        reduce_and_argmax(np.ones((2, 2)), 2)


def test_argmax_permutation_covariant():
    rng = np.random.default_rng(2)
    for seed in range(10):
        r = np.random.default_rng(seed)
        t = r.normal(size=(6, 3))
        perm = r.permutation(6)
        _, idx = reduce_and_argmax(t, 0)
        _, idx_p = reduce_and_argmax(t[perm], 0)
        # entries are distinct almost surely, so argmax follows the permutation
        inv = np.argsort(perm)
        assert np.array_equal(idx_p, inv[idx])


def test_row_major_flat_indexing():
    rng = np.random.default_rng(3)
    for _ in range(20):
        r, c = rng.integers(1, 7, size=2)
        t = rng.normal(size=(r, c))
        flat = t.ravel()
        i = int(rng.integers(0, r))
        j = int(rng.integers(0, c))
        assert flat[i * c + j] == t[i, j]


def test_dump_roundtrip():
    rng = np.random.default_rng(4)
    for shape in [(1,), (3, 2), (2, 3, 4), (5, 1, 2, 2)]:
        arr = rng.normal(size=shape)
        buf = io.BytesIO()
        save_tensor(buf, arr)
        back = load_tensor(io.BytesIO(buf.getvalue()))
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)


def test_dump_header_layout():
    buf = io.BytesIO()
    save_tensor(buf, np.array([[1.0, 2.0], [3.0, 4.0]]))
    raw = buf.getvalue()
    assert raw[:4] == (2).to_bytes(4, "little")
    assert raw[4:8] == (2).to_bytes(4, "little")
    assert raw[8:12] == (2).to_bytes(4, "little")
    assert np.frombuffer(raw[12:], dtype="<f8").tolist() == [1.0, 2.0, 3.0, 4.0]


def test_dump_rejects_truncation():
    buf = io.BytesIO()
    save_tensor(buf, np.ones((2, 2)))
    raw = buf.getvalue()
    with pytest.raises(FormatError):
        tensor_from_bytes(raw[:-3])
    with pytest.raises(FormatError):
        tensor_from_bytes(raw[:6])
    with pytest.raises(FormatError):
        tensor_from_bytes(b"")
