"""Exception types shared across the package."""


class CbnetError(Exception):
    """Base class for all package errors."""


class ShapeError(CbnetError):
    """Tensor arguments have incompatible shapes."""


class StateError(CbnetError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class DomainError(CbnetError):
    """Scalar argument outside its mathematical domain."""


class FormatError(CbnetError):
    """Malformed binary file (bad magic, bad header, unparseable record)."""


class TruncationError(CbnetError):
    """File ends before the declared payload does."""


class RangeError(CbnetError):
    """Value outside the documented range (label >= 10, ratio outside (0,1], ...)."""


class ClassWithoutEasyExemplar(CbnetError):
    """At least one class has no easy image to draw targets from."""

    def __init__(self, classes):
        self.classes = sorted(int(c) for c in classes)
        super().__init__(f"classes without any easy exemplar: {self.classes}")


class ArchitectureError(CbnetError):
    """Network does not have the structure the operation requires."""


class ProfileError(CbnetError):
    """Unknown autoencoder profile / dataset id."""


class VersionError(CbnetError):
    """Checkpoint file written by an unsupported format version."""


class ConfigError(CbnetError):
    """Invalid or inconsistent experiment configuration."""


class DataError(CbnetError):
    """Dataset files missing or unusable."""


class NumericalError(CbnetError):
    """Training or inference produced non-finite values."""


class EmptyInputError(CbnetError):
    """Evaluation requested over an empty image set."""


class EmptyTraceError(CbnetError):
    """Utilization or power trace contains no samples."""


class PlatformError(CbnetError):
    """OS facility needed for sampling is unavailable."""


class PipelineError(CbnetError):
    """Stage outputs do not line up inside the two-stage pipeline."""
