"""Backend-agnostic convolution kernel checks.

Both implementations are tested directly against a nested-loop oracle
and against each other, so the suite covers the numpy fallback even
when the compiled core is the active backend.
"""

import numpy as np
import pytest

from mtsconv.kernels import BACKEND, numpy_backend

try:
    from mtsconv.kernels import _convcore
except ImportError:
    _convcore = None

BACKENDS = [pytest.param(numpy_backend, id="numpy")]
if _convcore is not None:
    BACKENDS.append(pytest.param(_convcore, id="cython"))


def conv_oracle(x, k):
    b, i, t, f = x.shape
    o, _, kt, kf = k.shape
    y = np.zeros((b, o, t - kt + 1, f - kf + 1))
    for bi in range(b):
        for oi in range(o):
            for u in range(t - kt + 1):
                for v in range(f - kf + 1):
                    acc = 0.0
                    for ii in range(i):
                        for a in range(kt):
                            for c in range(kf):
                                acc += x[bi, ii, u + a, v + c] * k[oi, ii, a, c]
                    y[bi, oi, u, v] = acc
    return y


@pytest.mark.parametrize("impl", BACKENDS)
def test_forward_matches_oracle(impl):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 2, 6, 5))
    k = rng.normal(size=(3, 2, 3, 2))
    assert np.allclose(impl.conv2d_forward(x, k), conv_oracle(x, k), atol=1e-12)


@pytest.mark.parametrize("impl", BACKENDS)
def test_grad_kernels_matches_oracle(impl):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 2, 5, 4))
    k = rng.normal(size=(3, 2, 2, 2))
    gy = rng.normal(size=(2, 3, 4, 3))
    want = np.zeros_like(k)
    for o in range(3):
        for i in range(2):
            for a in range(2):
                for c in range(2):
                    for b in range(2):
                        for u in range(4):
                            for v in range(3):
                                want[o, i, a, c] += gy[b, o, u, v] * x[b, i, u + a, v + c]
    assert np.allclose(impl.conv2d_grad_kernels(gy, x), want, atol=1e-12)


@pytest.mark.parametrize("impl", BACKENDS)
def test_grad_input_matches_oracle(impl):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 2, 5, 4))
    k = rng.normal(size=(3, 2, 2, 2))
    gy = rng.normal(size=(2, 3, 4, 3))
    want = np.zeros_like(x)
    for b in range(2):
        for o in range(3):
            for i in range(2):
                for a in range(2):
                    for c in range(2):
                        for u in range(4):
                            for v in range(3):
                                want[b, i, u + a, v + c] += gy[b, o, u, v] * k[o, i, a, c]
    assert np.allclose(impl.conv2d_grad_input(gy, k), want, atol=1e-12)


@pytest.mark.skipif(_convcore is None, reason="compiled core not built")
def test_backends_agree():
    rng = np.random.default_rng(3)
    for _ in range(5):
        b, i, o = rng.integers(1, 4, size=3)
        kt, kf = rng.integers(1, 5, size=2)
        t = kt + int(rng.integers(0, 6))
        f = kf + int(rng.integers(0, 6))
        x = rng.normal(size=(b, i, t, f))
        k = rng.normal(size=(o, i, kt, kf))
        ya = numpy_backend.conv2d_forward(x, k)
        yb = _convcore.conv2d_forward(x, k)
        assert np.allclose(ya, yb, rtol=1e-10, atol=1e-12)
        gy = rng.normal(size=ya.shape)
        assert np.allclose(numpy_backend.conv2d_grad_kernels(gy, x),
                           _convcore.conv2d_grad_kernels(gy, x), rtol=1e-10, atol=1e-12)
        assert np.allclose(numpy_backend.conv2d_grad_input(gy, k),
                           _convcore.conv2d_grad_input(gy, k), rtol=1e-10, atol=1e-12)


def test_backend_reports_a_known_name():
    assert BACKEND in ("numpy", "cython")
