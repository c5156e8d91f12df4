"""Numerical self-checks: finite-difference gradient verification and
the degenerate-equivalence and stretch-detection probes.

These back the ``selftest`` CLI subcommand and are reused by the test
suite, so they live in the package rather than under tests/.
"""

import numpy as np

from .interp import ScaleSet, resample_time
from .layers import Conv2d, Dense, MaxPool2d, ReLU, conv2d_forward, softmax_cross_entropy
from .mts import MtsConv2d

FD_STEP = 1e-5
REL_TOL = 1e-6


def finite_difference(loss_fn, arr, h=FD_STEP):
    """Central-difference gradient of a scalar function w.r.t. every entry."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = loss_fn()
        flat[i] = orig - h
        lo = loss_fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def max_relative_error(analytic, numeric):
    """Worst entrywise |a - n| / max(1, |a|, |n|).

    The unit floor keeps near-zero entries from inflating the ratio;
    losses in these checks are O(1) so the floor is meaningful.
    """
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())


def _random_projection_loss(rng, shape):
    w = rng.normal(size=shape)

    def loss(y):
        return float((w * y).sum())

    def grad(y_shape):
        return w

    return loss, grad


def check_layer_gradients(layer, x, rng, params=None):
    """FD-check input and parameter gradients under a random linear loss.

    Returns the worst relative error across all checked tensors.
    """
    y = layer.forward(x)
    loss_of, grad_of = _random_projection_loss(rng, y.shape)
    for p in layer.parameters():
        p.zero_grad()
    gx = layer.backward(grad_of(y.shape))

    worst = 0.0

    def run():
        return loss_of(layer.forward(x))

    worst = max(worst, max_relative_error(gx, finite_difference(run, x)))
    for p in params if params is not None else layer.parameters():
        worst = max(worst, max_relative_error(p.grad, finite_difference(run, p.value)))
    return worst


def _tie_free_mts(rng, margin=1e-3, tries=50):
    """Random small MTS instance whose branch max has clear margins.

    FD wiggles of 1e-5 must not flip any argmax, so instances where the
    top two branches come within ``margin`` anywhere are rejected.
    """
    for _ in range(tries):
        layer = MtsConv2d(1, 2, 4, 2, ScaleSet((0.5, 1.0, 2.0)), rng)
        x = rng.normal(size=(1, 1, 12, 5))
        # replicate the forward stacking to measure margins
        from . import kernels as _k
        from .interp import resample_to_length

        out_t = x.shape[2] - layer.kernel_time + 1
        maps = [
            resample_to_length(_k.conv2d_forward(x, b.value), out_t, axis=2)
            for b in layer.branches
        ]
        stacked = np.sort(np.stack(maps), axis=0)
        if (stacked[-1] - stacked[-2]).min() > margin:
            return layer, x
    raise RuntimeError("could not build a tie-free multi-scale instance")


def gradient_check_suite(seeds=range(20), verbose=False):
    """FD-verify every layer's backward pass; returns list of (name, err)."""
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)

        conv = Conv2d(
            int(rng.integers(1, 3)), int(rng.integers(1, 4)),
            int(rng.integers(2, 4)), int(rng.integers(2, 4)), rng,
        )
        t = conv.kernel_time + int(rng.integers(1, 4))
        f = conv.kernel_freq + int(rng.integers(1, 4))
        x = rng.normal(size=(2, conv.in_channels, t, f))
        results.append((f"conv2d[seed={seed}]", check_layer_gradients(conv, x, rng)))

        dense = Dense(int(rng.integers(2, 6)), int(rng.integers(2, 5)), rng)
        xd = rng.normal(size=(3, dense.in_features))
        results.append((f"dense[seed={seed}]", check_layer_gradients(dense, xd, rng)))

        pool = MaxPool2d(2, 2)
        xp = rng.normal(size=(2, 2, 5, 6))
        results.append((f"maxpool[seed={seed}]", check_layer_gradients(pool, xp, rng)))

        relu = ReLU()
        xr = rng.normal(size=(2, 3, 4))
        xr = np.where(np.abs(xr) < 1e-2, xr + 0.1, xr)  # keep clear of the kink
        results.append((f"relu[seed={seed}]", check_layer_gradients(relu, xr, rng)))

        labels = rng.integers(0, 3, size=4)
        logits = rng.normal(size=(4, 3))
        _, analytic, _ = softmax_cross_entropy(logits, labels)

        def ce_loss():
            return softmax_cross_entropy(logits, labels)[0]

        results.append(
            (f"softmax_ce[seed={seed}]",
             max_relative_error(analytic, finite_difference(ce_loss, logits)))
        )

        mts, xm = _tie_free_mts(rng)
        results.append((f"mts[seed={seed}]", check_layer_gradients(mts, xm, rng)))

        if verbose:
            for name, err in results[-6:]:
                print(f"  {name}: rel err {err:.3e}")
    return results


def degenerate_equivalence_check(rng=None):
    """MTS with scale set {1} must match standard convolution bit for bit."""
    rng = rng or np.random.default_rng(1234)
    seed = int(rng.integers(0, 2**31))
    conv = Conv2d(2, 3, 4, 2, np.random.default_rng(seed))
    mts = MtsConv2d(2, 3, 4, 2, ScaleSet((1.0,)), np.random.default_rng(seed))
    x = rng.normal(size=(2, 2, 9, 6))
    if not np.array_equal(conv.forward(x), mts.forward(x)):
        return False
    g = rng.normal(size=(2, 3, 6, 5))
    if not np.array_equal(conv.backward(g), mts.backward(g)):
        return False
    return (
        np.array_equal(conv.kernels.grad, mts.branches[0].grad)
        and np.array_equal(conv.bias.grad, mts.bias.grad)
    )


def stretch_probe_template(kernel_time=10, kernel_freq=5, interior=0.1):
    """Template used by the stretch-detection probe.

    Two unit markers sit at the time endpoints in distinct frequency
    columns (endpoint-aligned resampling preserves them exactly at any
    factor, so a matched branch recovers nearly the full response),
    plus a faint oscillating interior that penalizes scale-mismatched
    correlation.
    """
    tpl = np.zeros((kernel_time, kernel_freq))
    tpl[0, 0] = 1.0
    tpl[-1, -1] = 1.0
    for i in range(1, kernel_time - 1):
        tpl[i, kernel_freq // 2] = interior * (-1.0) ** i
    return tpl


def _aligned_onset(total_t, kernel_time, branch_len, patt_len):
    """Onset whose matched-filter peak the map resampling reads exactly.

    The branch map (length lb) is resampled to the factor-1 map length
    (lout); source position q survives undiluted iff it coincides with
    a resampling grid point, i.e. q * (lout - 1) is a multiple of
    (lb - 1).
    """
    lb = total_t - branch_len + 1
    lout = total_t - kernel_time + 1
    if lb <= 1:
        return 0
    good = [
        q for q in range(lb)
        if (q * (lout - 1)) % (lb - 1) == 0 and q + patt_len <= total_t
    ]
    interior = [q for q in good if q > 0] or [0]
    return interior[len(interior) // 2]


def stretch_detection_check(factors=(0.5, 2.0), scales=(0.5, 1.0, 2.0), total_t=65):
    """Verify the multi-scale layer locks onto time-stretched patterns.

    For each stretch factor the input embeds the template resampled by
    that factor at an onset aligned with the map-resampling grid; the
    branch with the matching factor must win at the peak position with
    at least 0.9x the unstretched peak response, while a standard
    convolution's peak falls below 0.7x.  Returns a dict of
    measurements (all deterministic).
    """
    scales = ScaleSet(scales)
    tpl = stretch_probe_template()
    kt, kf = tpl.shape
    rng = np.random.default_rng(0)
    layer = MtsConv2d(1, 1, kt, kf, scales, rng)
    np.copyto(layer.canonical, tpl[None, None])
    layer.derive_branch_kernels()

    def embed(factor):
        patt = resample_time(tpl, factor, axis=0)
        branch_len = layer.branch_lengths[scales.factors.index(factor)]
        onset = _aligned_onset(total_t, kt, branch_len, patt.shape[0])
        x = np.zeros((1, 1, total_t, kf))
        x[0, 0, onset:onset + patt.shape[0]] = patt
        return x

    def mts_peak(x):
        y = layer.forward(x) - layer.bias.value[None, :, None, None]
        flat = int(np.argmax(y))
        pos = np.unravel_index(flat, y.shape)
        _, which, _ = layer._cache
        return float(y[pos]), int(which[pos])

    def std_peak(x):
        y = conv2d_forward(x, tpl[None, None])
        return float(y.max())

    base_x = embed(1.0)
    base_peak, base_branch = mts_peak(base_x)
    std_base = std_peak(base_x)
    report = {"base_peak": base_peak, "base_branch": base_branch, "cases": {}}
    for factor in factors:
        x = embed(factor)
        peak, branch = mts_peak(x)
        report["cases"][factor] = {
            "winning_branch_factor": scales.factors[branch],
            "mts_ratio": peak / base_peak,
            "std_ratio": std_peak(x) / std_base,
        }
    return report
