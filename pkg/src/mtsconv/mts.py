"""Multi-time-scale 2D convolution.

One canonical kernel bank is evaluated at several time-axis stretch
factors in parallel: each branch convolves the input with a resampled
copy of the kernels, branch feature maps are resampled back to the
factor-1 map's time length, and the branches are merged by an
elementwise max per (batch, channel, time, freq) position.  The shared
bias is added after the merge, so the layer exposes exactly as many
trainable parameters as the standard convolution it replaces.

Branch banks are materialized and trained independently within a step;
``average_weights`` reconciles them back into the canonical bank after
every optimizer update (resample each branch to canonical length, take
the unweighted mean, re-derive all branches).

Within one forward call the branch convolutions are independent and
could run concurrently; usage counters would then need atomic updates.
``average_weights`` must not overlap a forward/backward pass.
"""

import numpy as np

from . import kernels
from .errors import ShapeError, StateError
from .interp import ScaleSet, adjoint_resample, output_length, resample_time, resample_to_length
from .layers import Layer, Parameter, glorot_uniform
from .tensor import DTYPE

KERNEL_TIME_AXIS = 2


class MtsConv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel_time, kernel_freq, scales, rng):
        if kernel_time < 1 or kernel_freq < 1:
            raise ShapeError(f"kernel extents must be >= 1, got [{kernel_time},{kernel_freq}]")
        if not isinstance(scales, ScaleSet):
            scales = ScaleSet(tuple(scales))
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_time = kernel_time
        self.kernel_freq = kernel_freq
        self.scales = scales
        fan = in_channels * kernel_time * kernel_freq, out_channels * kernel_time * kernel_freq
        # same draw as Conv2d so seeded standard/MTS builds stay comparable
        self.canonical = np.ascontiguousarray(
            glorot_uniform(rng, (out_channels, in_channels, kernel_time, kernel_freq), *fan),
            dtype=DTYPE,
        )
        self.bias = Parameter(np.zeros(out_channels))
        self.branch_lengths = tuple(output_length(kernel_time, s) for s in scales)
        self.branches = [
            Parameter(np.zeros((out_channels, in_channels, bl, kernel_freq)))
            for bl in self.branch_lengths
        ]
        self.usage_counts = np.zeros(len(scales), dtype=np.int64)
        self._cache = None
        self.derive_branch_kernels()

    # -- kernel bookkeeping -------------------------------------------------

    def derive_branch_kernels(self):
        """Re-materialize every branch bank from the canonical bank."""
        for factor, branch in zip(self.scales, self.branches):
            if factor == 1.0:
                np.copyto(branch.value, self.canonical)
            else:
                np.copyto(
                    branch.value,
                    resample_time(self.canonical, factor, axis=KERNEL_TIME_AXIS),
                )

    def average_weights(self):
        """Fold the independently-updated branches back into one bank.

        Call once after each optimizer step.  The canonical bank becomes
        the mean of the branches resampled to canonical time length, and
        the branches are re-derived from it.
        """
        acc = np.zeros_like(self.canonical)
        for branch in self.branches:
            acc += resample_to_length(branch.value, self.kernel_time, axis=KERNEL_TIME_AXIS)
        acc /= len(self.branches)
        np.copyto(self.canonical, acc)
        self.derive_branch_kernels()

    # -- forward / backward -------------------------------------------------

    def forward(self, x):
        x = np.ascontiguousarray(x, dtype=DTYPE)
        if x.ndim != 4:
            raise ShapeError(f"expected [batch, ch, time, freq] input, got {x.shape}")
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"input channels {x.shape[1]} != {self.in_channels}")
        t, f = x.shape[2], x.shape[3]
        longest = max(self.branch_lengths)
        if t < longest or f < self.kernel_freq:
            raise ShapeError(
                f"input {t}x{f} smaller than largest branch kernel "
                f"[{longest},{self.kernel_freq}]"
            )
        out_t = t - self.kernel_time + 1  # merged map keeps the factor-1 length
        maps = []
        for branch in self.branches:
            m = kernels.conv2d_forward(x, branch.value)
            maps.append(resample_to_length(m, out_t, axis=2))
        stacked = np.stack(maps)
        which = stacked.argmax(axis=0)
        merged = np.take_along_axis(stacked, which[None], axis=0)[0]
        self.usage_counts += np.bincount(which.ravel(), minlength=len(self.branches))
        merged += self.bias.value[None, :, None, None]
        self._cache = (x, which, t)
        return merged

    def backward(self, grad_out, compute_input_grad=True):
        if self._cache is None:
            raise StateError("backward called before forward")
        x, which, t = self._cache
        grad_out = np.ascontiguousarray(grad_out, dtype=DTYPE)
        self.bias.grad += grad_out.sum(axis=(0, 2, 3))
        grad_x = np.zeros_like(x) if compute_input_grad else None
        for idx, (branch, bl) in enumerate(zip(self.branches, self.branch_lengths)):
            routed = np.where(which == idx, grad_out, 0.0)
            routed = adjoint_resample(routed, t - bl + 1, axis=2)
            branch.grad += kernels.conv2d_grad_kernels(routed, x)
            if compute_input_grad:
                grad_x += kernels.conv2d_grad_input(routed, branch.value)
        return grad_x

    # -- reporting ----------------------------------------------------------

    def parameters(self):
        return self.branches + [self.bias]

    def num_parameters(self):
        # branches reconcile into the canonical bank each step, so the
        # free parameters are the canonical kernels plus the shared bias
        return self.canonical.size + self.bias.size

    def reset_usage(self):
        self.usage_counts.fill(0)

    def branch_usage(self):
        """Fraction of merged positions won by each branch since the last reset."""
        total = int(self.usage_counts.sum())
        if total == 0:
            raise StateError("no pooled positions observed since last reset")
        return self.usage_counts / total

    def output_shape(self, t, f):
        longest = max(self.branch_lengths)
        if t < longest or f < self.kernel_freq:
            raise ShapeError(
                f"input {t}x{f} smaller than largest branch kernel "
                f"[{longest},{self.kernel_freq}]"
            )
        return t - self.kernel_time + 1, f - self.kernel_freq + 1
