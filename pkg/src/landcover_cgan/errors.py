"""Exception types raised across the package."""


class LandcoverError(Exception):
    """Base class for all package errors."""


class LegendError(LandcoverError, ValueError):
    """A label code is not part of the configured source legend."""


class DegenerateWeightsError(LandcoverError, ValueError):
    """Class weights cannot be formed (some class has zero pixels)."""


class ManifestError(LandcoverError, ValueError):
    """Manifest content is malformed or violates split rules."""


class TileFormatError(LandcoverError, ValueError):
    """A tile container could not be decoded."""


class ShapeError(LandcoverError, ValueError):
    """A tensor does not have the shape a network or loss expects."""


class NonFiniteLossError(LandcoverError, RuntimeError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, step=None, batch_index=None, dump_path=None):
        super().__init__(message)
        self.step = step
        self.batch_index = batch_index
        self.dump_path = dump_path
