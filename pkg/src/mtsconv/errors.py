"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array extents incompatible with the requested operation."""


class ParameterError(ValueError):
    """Invalid configuration value (scale factor, target length, ...)."""


class DataError(ValueError):
    """Input data violates an operation's contract."""


class FormatError(ValueError):
    """Malformed file or byte stream."""


class StateError(RuntimeError):
    """Operation called before its prerequisites were established."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training; carries diagnostics."""

    def __init__(self, message, epoch=None, batch=None, layer_norms=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.layer_norms = dict(layer_norms or {})
