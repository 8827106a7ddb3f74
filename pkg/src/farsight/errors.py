"""Exception hierarchy shared across the package."""


class FarsightError(Exception):
    """Base class for all package errors."""


class ShapeError(FarsightError):
    """Operands have incompatible or invalid shapes."""


class NumericError(FarsightError):
    """A computation produced NaN/Inf or otherwise left the finite domain."""


class LabelError(FarsightError):
    """A class label is outside the valid range."""


class ConfigError(FarsightError):
    """A configuration value violates its contract."""


class StateError(FarsightError):
    """Optimizer or training state is inconsistent (e.g. missing gradient)."""


class EvaluationError(FarsightError):
    """A metric was requested on an input where it is undefined."""


class CorpusError(FarsightError):
    """Corpus construction or harmonization failed (leakage, bad format, ...)."""


class CheckpointError(FarsightError):
    """Checkpoint payload does not match its manifest."""
