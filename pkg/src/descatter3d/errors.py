"""Exception types shared across the package."""


class Descatter3DError(Exception):
    """Base class for all package errors."""


class InvalidDims(Descatter3DError, ValueError):
    pass


class DegenerateVolume(Descatter3DError, ValueError):
    pass


class FormatError(Descatter3DError, ValueError):
    pass


class KernelTooLarge(Descatter3DError, ValueError):
    pass


class InvalidRate(Descatter3DError, ValueError):
    pass


class PlacementFailure(Descatter3DError, RuntimeError):
    pass


class EmptyDataset(Descatter3DError, ValueError):
    pass


class ShapeError(Descatter3DError, ValueError):
    pass


class NonFiniteGradient(Descatter3DError, FloatingPointError):
    """Raised when a gradient contains NaN/inf; ``layer`` names the offender."""

    def __init__(self, layer: str):
        super().__init__(f"non-finite gradient in {layer}")
        self.layer = layer


class InvalidPlan(Descatter3DError, ValueError):
    pass


class InvalidAnnotation(Descatter3DError, ValueError):
    pass


class InvalidProfile(Descatter3DError, ValueError):
    pass


class DegenerateReference(Descatter3DError, ValueError):
    pass


class ConfigError(Descatter3DError, ValueError):
    """Config validation failure; the message starts with the offending key path."""


class ConfigurationWarning(UserWarning):
    pass
