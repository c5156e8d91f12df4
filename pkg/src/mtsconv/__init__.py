"""Multi-time-scale 2D convolution layers and a spectrogram CNN harness."""

__version__ = "0.1.0"

from .interp import ScaleSet
from .layers import Conv2d, Dense, Flatten, MaxPool2d, ReLU
from .models import build_model
from .mts import MtsConv2d
from .optim import Adam

__all__ = [
    "Adam",
    "Conv2d",
    "Dense",
    "Flatten",
    "MaxPool2d",
    "MtsConv2d",
    "ReLU",
    "ScaleSet",
    "build_model",
    "__version__",
]
