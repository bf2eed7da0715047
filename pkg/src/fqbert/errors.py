"""Exception hierarchy shared across the package."""


class FqbertError(Exception):
    """Base class for all package errors."""


class DegenerateScaleError(FqbertError, ValueError):
    """A scale factor cannot be derived (e.g. an all-zero tensor)."""


class NotCalibratedError(FqbertError):
    """Activation statistics are missing for a site that needs them."""


class ShapeError(FqbertError, ValueError):
    pass


class ContainerFormatError(FqbertError):
    """The FQBT file is malformed."""


class ChecksumError(ContainerFormatError):
    pass


class VersionError(ContainerFormatError):
    pass


class CheckpointError(FqbertError):
    """A float checkpoint is missing tensors or has wrong shapes."""


class PlanningError(FqbertError, ValueError):
    """A dataflow plan cannot satisfy the modeled buffer capacity."""
