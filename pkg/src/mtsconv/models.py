"""Network architectures and the model container.

Four fixed stacks are supported, all ReLU-hidden / softmax-output:

  A1: conv(1 ch, [10,5]) - dense(200) - dense(C)
  A2: conv(10 ch, [10,5]) - dense(200) - dense(C)
  A3: conv(10, [10,5]) - maxpool[2,2] - conv(10, [10,5]) - dense(200) - dense(C)
  A4: a narrow AlexNet-style stack: five convolutions (16-32-64-64-32
      channels, time extents >= 5) with pooling after the first, second
      and fifth, then dense(256) - dense(256) - dense(C)

Passing a scale set turns the convolutions into multi-time-scale layers
(every convolution in A1-A3; only the first two in A4) without changing
the reported parameter count.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError
from .interp import ScaleSet
from .layers import Conv2d, Dense, Flatten, MaxPool2d, ReLU
from .mts import MtsConv2d
from .tensor import save_tensor, tensor_from_bytes

ARCHITECTURES = ("A1", "A2", "A3", "A4")

CHECKPOINT_MAGIC = b"MTSCONV-CKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel_time: int
    kernel_freq: int
    mts_eligible: bool = True


def _arch_plan(arch, num_classes):
    if arch == "A1":
        return [ConvSpec(1, 10, 5)], [200, num_classes], []
    if arch == "A2":
        return [ConvSpec(10, 10, 5)], [200, num_classes], []
    if arch == "A3":
        return [ConvSpec(10, 10, 5), ConvSpec(10, 10, 5)], [200, num_classes], [0]
    if arch == "A4":
        convs = [
            ConvSpec(16, 7, 5),
            ConvSpec(32, 5, 3),
            ConvSpec(64, 5, 3, mts_eligible=False),
            ConvSpec(64, 5, 3, mts_eligible=False),
            ConvSpec(32, 5, 3, mts_eligible=False),
        ]
        return convs, [256, 256, num_classes], [0, 1, 4]
    raise ShapeError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


class Model:
    """An ordered layer stack with loss-free forward/backward plumbing."""

    def __init__(self, arch, layers, input_shape, num_classes, scales=None):
        self.arch = arch
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.scales = scales

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        first = self.layers[0]
        for layer in reversed(self.layers[1:]):
            grad = layer.backward(grad)
        if isinstance(first, (Conv2d, MtsConv2d)):
            # nothing consumes the input gradient; skip the costliest op
            return first.backward(grad, compute_input_grad=False)
        return first.backward(grad)

    def parameters(self):
        params = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def num_parameters(self):
        return sum(layer.num_parameters() for layer in self.layers)

    def mts_layers(self):
        return [l for l in self.layers if isinstance(l, MtsConv2d)]

    def reset_usage(self):
        for layer in self.mts_layers():
            layer.reset_usage()

    def average_weights(self):
        for layer in self.mts_layers():
            layer.average_weights()

    # -- snapshots (in memory, for best-epoch restore) ----------------------

    def snapshot(self):
        state = [p.value.copy() for p in self.parameters()]
        state.extend(l.canonical.copy() for l in self.mts_layers())
        return state

    def restore(self, state):
        params = self.parameters()
        for p, saved in zip(params, state[: len(params)]):
            np.copyto(p.value, saved)
        for layer, saved in zip(self.mts_layers(), state[len(params):]):
            np.copyto(layer.canonical, saved)

    # -- checkpoints ---------------------------------------------------------

    def named_checkpoint_tensors(self):
        """Tensors persisted to disk.  Multi-scale layers store only the
        canonical bank and bias; branches are re-derived on load, so the
        file matches a standard convolution checkpoint in size."""
        named = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, MtsConv2d):
                named.append((f"layer{i}.kernels", layer.canonical))
                named.append((f"layer{i}.bias", layer.bias.value))
            elif isinstance(layer, Conv2d):
                named.append((f"layer{i}.kernels", layer.kernels.value))
                named.append((f"layer{i}.bias", layer.bias.value))
            elif isinstance(layer, Dense):
                named.append((f"layer{i}.weight", layer.weight.value))
                named.append((f"layer{i}.bias", layer.bias.value))
        return named

    def topology(self):
        desc = []
        for layer in self.layers:
            if isinstance(layer, MtsConv2d):
                desc.append({
                    "kind": "mtsconv2d",
                    "in_channels": layer.in_channels, "out_channels": layer.out_channels,
                    "kernel": [layer.kernel_time, layer.kernel_freq],
                    "scales": list(layer.scales.factors),
                })
            elif isinstance(layer, Conv2d):
                desc.append({
                    "kind": "conv2d",
                    "in_channels": layer.in_channels, "out_channels": layer.out_channels,
                    "kernel": [layer.kernel_time, layer.kernel_freq],
                })
            elif isinstance(layer, MaxPool2d):
                desc.append({"kind": "maxpool2d", "window": list(layer.window)})
            elif isinstance(layer, ReLU):
                desc.append({"kind": "relu"})
            elif isinstance(layer, Flatten):
                desc.append({"kind": "flatten"})
            elif isinstance(layer, Dense):
                desc.append({"kind": "dense", "in_features": layer.in_features,
                             "out_features": layer.out_features})
        return desc

    def save(self, path):
        """Versioned container: text header (JSON topology + tensor
        names) followed by the named tensors in dump format."""
        named = self.named_checkpoint_tensors()
        header = {
            "version": CHECKPOINT_VERSION,
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "scales": list(self.scales.factors) if self.scales else None,
            "topology": self.topology(),
            "tensors": [name for name, _ in named],
        }
        head = json.dumps(header, indent=1, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC + b"\n")
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            for _, arr in named:
                save_tensor(fh, arr)

    @classmethod
    def load(cls, path, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        with open(path, "rb") as fh:
            raw = fh.read()
        magic_len = len(CHECKPOINT_MAGIC) + 1
        if raw[:magic_len] != CHECKPOINT_MAGIC + b"\n":
            raise FormatError("not a model checkpoint")
        (head_len,) = struct.unpack_from("<I", raw, magic_len)
        header = json.loads(raw[magic_len + 4: magic_len + 4 + head_len])
        if header.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {header.get('version')}")
        scales = ScaleSet(tuple(header["scales"])) if header["scales"] else None
        model = build_model(header["arch"], header["input_shape"],
                            header["num_classes"], scales=scales, rng=rng)
        offset = magic_len + 4 + head_len
        body = raw[offset:]
        tensors = {}
        pos = 0
        for name in header["tensors"]:
            (rank,) = struct.unpack_from("<I", body, pos)
            shape = struct.unpack_from(f"<{rank}I", body, pos + 4)
            size = 4 + 4 * rank + 8 * int(np.prod(shape))
            tensors[name] = tensor_from_bytes(body[pos:pos + size])
            pos += size
        for i, layer in enumerate(model.layers):
            if isinstance(layer, MtsConv2d):
                np.copyto(layer.canonical, tensors[f"layer{i}.kernels"])
                np.copyto(layer.bias.value, tensors[f"layer{i}.bias"])
                layer.derive_branch_kernels()
            elif isinstance(layer, Conv2d):
                np.copyto(layer.kernels.value, tensors[f"layer{i}.kernels"])
                np.copyto(layer.bias.value, tensors[f"layer{i}.bias"])
            elif isinstance(layer, Dense):
                np.copyto(layer.weight.value, tensors[f"layer{i}.weight"])
                np.copyto(layer.bias.value, tensors[f"layer{i}.bias"])
        return model


def build_model(arch, input_shape, num_classes, scales=None, rng=None):
    """Assemble an architecture for [batch, 1, T, F] inputs.

    ``scales`` switches eligible convolutions to multi-time-scale
    layers.  Raises ShapeError with a per-layer trace when the input is
    too small for the stack.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    t, f = int(input_shape[0]), int(input_shape[1])
    conv_specs, dense_widths, pool_after = _arch_plan(arch, num_classes)
    if scales is not None and not isinstance(scales, ScaleSet):
        scales = ScaleSet(tuple(scales))

    layers = []
    trace = [f"input {t}x{f}"]
    channels = 1
    for i, spec in enumerate(conv_specs):
        use_mts = scales is not None and spec.mts_eligible
        try:
            if use_mts:
                conv = MtsConv2d(channels, spec.out_channels, spec.kernel_time,
                                 spec.kernel_freq, scales, rng)
            else:
                conv = Conv2d(channels, spec.out_channels, spec.kernel_time,
                              spec.kernel_freq, rng)
            t, f = conv.output_shape(t, f)
        except ShapeError as exc:
            raise ShapeError(
                f"{arch} conv{i + 1} does not fit: {exc}; trace: {' -> '.join(trace)}"
            ) from exc
        layers.append(conv)
        layers.append(ReLU())
        trace.append(f"conv{i + 1} {t}x{f}x{spec.out_channels}")
        if i in pool_after:
            pool = MaxPool2d(2, 2)
            try:
                t, f = pool.output_shape(t, f)
            except ShapeError as exc:
                raise ShapeError(
                    f"{arch} pool after conv{i + 1} does not fit: {exc}; "
                    f"trace: {' -> '.join(trace)}"
                ) from exc
            layers.append(pool)
            trace.append(f"pool {t}x{f}x{spec.out_channels}")
        channels = spec.out_channels

    layers.append(Flatten())
    features = t * f * channels
    trace.append(f"flatten {features}")
    for j, width in enumerate(dense_widths):
        layers.append(Dense(features, width, rng))
        if j < len(dense_widths) - 1:
            layers.append(ReLU())
        features = width
        trace.append(f"dense {width}")
    return Model(arch, layers, input_shape, num_classes, scales)
