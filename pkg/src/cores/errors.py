"""Exception types shared across the package."""


class CoresError(Exception):
    """Base class for every error this package raises on purpose."""


class InvalidParameterError(CoresError):
    """An argument value is outside its documented domain."""


class CapacityExceededError(CoresError):
    """A class allocation would exceed the classifier's output count."""


class InvalidLabelError(CoresError):
    """A label refers to an output index that has not been allocated."""


class MissingArgumentError(CoresError):
    """An operation needs an input that was not supplied (e.g. no previous model)."""


class FormatError(CoresError):
    """A file or value does not match its declared binary/textual format."""


class InsufficientDataError(CoresError):
    """Not enough samples or pairs exist to satisfy a request."""


class UndefinedDistanceError(CoresError):
    """A distance was requested for a zero-norm vector."""


class UndefinedGainError(CoresError):
    """The gain denominator is zero, so the ratio is undefined."""


class UndefinedMetricError(CoresError):
    """A summary metric was requested on inputs where it is not defined."""


class IntegrityError(CoresError):
    """Stored artifact bytes do not match their recorded digest."""


class MissingArtifactError(CoresError):
    """A run references an artifact file that is not on disk."""


class RunExistsError(CoresError):
    """A run directory already holds completed artifacts."""


class UnknownPresetError(CoresError):
    """The requested experiment preset does not exist."""
