"""Exception hierarchy shared by every module of the package."""


class MAAMError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MAAMError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(MAAMError, ValueError):
    """An operation or model was configured with unusable parameters."""


class DegenerateBatchError(MAAMError, ValueError):
    """Batch statistics cannot be computed from the given batch."""


class LabelError(MAAMError, ValueError):
    """A class label lies outside the valid range."""


class GradientError(MAAMError, RuntimeError):
    """Backward was requested on an invalid target or a gradient is missing."""


class DataError(MAAMError, OSError):
    """Dataset files are missing or malformed."""


class CheckpointError(MAAMError, ValueError):
    """A weight checkpoint is malformed or does not match its model."""
