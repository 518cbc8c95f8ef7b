"""Exception hierarchy shared by every module."""


class MCTTAError(Exception):
    """Base class for all package errors."""


class ConfigError(MCTTAError, ValueError):
    pass


class InputTooShort(MCTTAError, ValueError):
    pass


class MaskRangeError(MCTTAError, IndexError):
    pass


class NumericalError(MCTTAError, FloatingPointError):
    pass


class LengthError(MCTTAError, ValueError):
    pass


class ShapeError(MCTTAError, ValueError):
    pass


class PretrainDivergence(MCTTAError, RuntimeError):
    """Toy pretraining did not reach the required held-out accuracy."""


class ArtifactMismatch(MCTTAError):
    """A checkpoint does not belong to the model/config it is used with."""


class SchemaMismatch(MCTTAError):
    """A file carries an unsupported ``schema_version``."""
