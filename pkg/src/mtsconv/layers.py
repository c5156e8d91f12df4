"""Trainable layers with hand-written backward passes.

Layers cache whatever their backward pass needs during forward and
accumulate parameter gradients into ``Parameter.grad``; ``backward``
returns the gradient w.r.t. the layer input.  Evaluation over a batch
is side-effect free except for these caches, so batch items may be
processed concurrently as long as parameter updates happen between
batches.
"""

import numpy as np

from . import kernels
from .errors import DataError, ShapeError
from .tensor import DTYPE


class Parameter:
    """A trainable tensor and its gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad.fill(0.0)

    @property
    def size(self):
        return self.value.size


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Minimal layer protocol; concrete layers override as needed."""

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def parameters(self):
        return []

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def conv2d_forward(x, kernels_arr, bias=None):
    """Valid stride-1 cross-correlation plus optional per-channel bias."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    kernels_arr = np.ascontiguousarray(kernels_arr, dtype=DTYPE)
    if x.ndim != 4 or kernels_arr.ndim != 4:
        raise ShapeError(
            f"conv2d expects rank-4 input and kernels, got {x.shape} and {kernels_arr.shape}"
        )
    if x.shape[1] != kernels_arr.shape[1]:
        raise ShapeError(
            f"input channels {x.shape[1]} != kernel channels {kernels_arr.shape[1]}"
        )
    if x.shape[2] < kernels_arr.shape[2] or x.shape[3] < kernels_arr.shape[3]:
        raise ShapeError(
            f"kernel {kernels_arr.shape[2:]} larger than input {x.shape[2:]}"
        )
    y = kernels.conv2d_forward(x, kernels_arr)
    if bias is not None:
        y += np.asarray(bias, dtype=DTYPE)[None, :, None, None]
    return y


class Conv2d(Layer):
    """Valid 2D convolution, stride 1, no padding.

    Kernels are [out_ch, in_ch, k_time, k_freq]; inputs are
    [batch, in_ch, time, freq].
    """

    def __init__(self, in_channels, out_channels, kernel_time, kernel_freq, rng):
        if kernel_time < 1 or kernel_freq < 1:
            raise ShapeError(f"kernel extents must be >= 1, got [{kernel_time},{kernel_freq}]")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_time = kernel_time
        self.kernel_freq = kernel_freq
        fan = in_channels * kernel_time * kernel_freq, out_channels * kernel_time * kernel_freq
        self.kernels = Parameter(
            glorot_uniform(rng, (out_channels, in_channels, kernel_time, kernel_freq), *fan)
        )
        self.bias = Parameter(np.zeros(out_channels))
        self._x = None

    def forward(self, x):
        y = conv2d_forward(x, self.kernels.value, self.bias.value)
        self._x = np.ascontiguousarray(x, dtype=DTYPE)
        return y

    def backward(self, grad_out, compute_input_grad=True):
        grad_out = np.ascontiguousarray(grad_out, dtype=DTYPE)
        self.kernels.grad += kernels.conv2d_grad_kernels(grad_out, self._x)
        self.bias.grad += grad_out.sum(axis=(0, 2, 3))
        if not compute_input_grad:
            return None
        return kernels.conv2d_grad_input(grad_out, self.kernels.value)

    def parameters(self):
        return [self.kernels, self.bias]

    def output_shape(self, t, f):
        if t < self.kernel_time or f < self.kernel_freq:
            raise ShapeError(
                f"input {t}x{f} smaller than kernel "
                f"[{self.kernel_time},{self.kernel_freq}]"
            )
        return t - self.kernel_time + 1, f - self.kernel_freq + 1


def maxpool2d(x, window):
    """Non-overlapping window max; trailing partial windows are dropped.

    Returns (output, argmax) where argmax holds the flat within-window
    index (row-major, first max on ties) used to route gradients back.
    """
    pt, pf = window
    x = np.asarray(x, dtype=DTYPE)
    b, c, t, f = x.shape
    if pt > t or pf > f:
        raise ShapeError(f"pool window {window} larger than input {t}x{f}")
    to, fo = t // pt, f // pf
    win = x[:, :, : to * pt, : fo * pf].reshape(b, c, to, pt, fo, pf)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, to, fo, pt * pf)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


class MaxPool2d(Layer):
    def __init__(self, pool_time, pool_freq):
        self.window = (pool_time, pool_freq)
        self._idx = None
        self._in_shape = None

    def forward(self, x):
        out, idx = maxpool2d(x, self.window)
        self._idx = idx
        self._in_shape = x.shape
        return out

    def backward(self, grad_out):
        pt, pf = self.window
        b, c, to, fo = grad_out.shape
        gx = np.zeros(self._in_shape, dtype=DTYPE)
        wt, wf = np.divmod(self._idx, pf)
        bi, ci, ui, vi = np.indices((b, c, to, fo), sparse=True)
        # winner positions are unique per window, so plain assignment suffices
        gx[bi, ci, ui * pt + wt, vi * pf + wf] = grad_out
        return gx

    def output_shape(self, t, f):
        pt, pf = self.window
        if pt > t or pf > f:
            raise ShapeError(f"pool window {self.window} larger than input {t}x{f}")
        return t // pt, f // pf


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out):
        return np.where(self._mask, grad_out, 0.0)

    def output_shape(self, t, f):
        return t, f


class Flatten(Layer):
    def __init__(self):
        self._in_shape = None

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._in_shape)


class Dense(Layer):
    def __init__(self, in_features, out_features, rng):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            glorot_uniform(rng, (in_features, out_features), in_features, out_features)
        )
        self.bias = Parameter(np.zeros(out_features))
        self._x = None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense expects [batch, {self.in_features}], got {x.shape}")
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, grad_out):
        self.weight.grad += self._x.T @ grad_out
        self.bias.grad += grad_out.sum(axis=0)
        return grad_out @ self.weight.value.T

    def parameters(self):
        return [self.weight, self.bias]


def softmax(logits):
    """Row-wise softmax of a [batch, classes] array."""
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects rank-2 logits, got {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, num_classes, batch):
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ShapeError(f"labels must be [{batch}], got {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(
            f"label out of range: values in [{labels.min()},{labels.max()}] "
            f"for {num_classes} classes"
        )
    return labels.astype(np.intp)


def cross_entropy(probs, labels):
    """Mean negative log-probability of the true class."""
    probs = np.asarray(probs, dtype=DTYPE)
    labels = _check_labels(labels, probs.shape[1], probs.shape[0])
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(-np.log(np.maximum(picked, 1e-300)).mean())


def softmax_cross_entropy(logits, labels):
    """Fused loss; returns (loss, grad_logits, probs).

    grad_logits is (probs - onehot) / batch, the exact gradient of the
    mean cross entropy through the softmax.
    """
    probs = softmax(logits)
    batch, num_classes = probs.shape
    labels = _check_labels(labels, num_classes, batch)
    loss = float(-np.log(np.maximum(probs[np.arange(batch), labels], 1e-300)).mean())
    grad = probs.copy()
    grad[np.arange(batch), labels] -= 1.0
    grad /= batch
    return loss, grad, probs
