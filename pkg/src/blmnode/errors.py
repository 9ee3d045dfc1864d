"""Exception types raised across the package."""


class BlmNodeError(Exception):
    """Base class for all package errors."""


class BadSpec(BlmNodeError, ValueError):
    pass


class NonFinite(BlmNodeError, ValueError):
    pass


class ParseError(BlmNodeError, ValueError):
    pass


class ShapeError(BlmNodeError, ValueError):
    def __init__(self, layer, message):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


class SizeMismatch(BlmNodeError, ValueError):
    pass


class PlanMismatch(BlmNodeError, KeyError):
    def __init__(self, layer, message=None):
        super().__init__(message or f"plan has no spec for layer {layer!r}")
        self.layer = layer

    def __str__(self):
        return self.args[0]


class EmptyCalibrationSet(BlmNodeError, ValueError):
    pass


class BadParams(BlmNodeError, ValueError):
    pass


class Busy(BlmNodeError, RuntimeError):
    pass


class BindError(BlmNodeError, OSError):
    pass


class ModelLoadError(BlmNodeError, RuntimeError):
    pass
