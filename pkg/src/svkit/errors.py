"""Exception hierarchy shared across the toolkit.

Exceptions derive from one of three roots so the command-line layer can map
failures to exit codes: configuration problems (exit 1), data problems
(exit 2), numerical problems (exit 3).
"""


class SvkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(SvkitError):
    """Invalid option, option combination, or model topology."""


class DataError(SvkitError):
    """Malformed, inconsistent, or insufficient input data."""


class NumericalError(SvkitError):
    """Numerical failure during training or scoring."""


class EmptyInputError(DataError):
    """Input too short to produce a single output frame."""


class InsufficientContextError(DataError):
    """Too few frames for the requested temporal context."""


class TooShortUtteranceError(DataError):
    """Less active speech than the truncation protocol requires."""


class DegenerateInitError(DataError):
    """Not enough distinct data points to initialize a model."""


class AlignmentError(DataError):
    """Posterior, feature, and mask lengths cannot be reconciled."""


class FormatError(DataError):
    """A serialized artifact does not match its declared format."""


class StateError(DataError):
    """Operation applied to an object in the wrong state."""


class DegenerateIvectorError(DataError):
    """Zero-norm vector after centering; cannot be length-normalized."""


class OneClassError(DataError):
    """Trial scores contain only targets or only nontargets."""


class CoverageError(DataError):
    """Trials without matching scores."""


class TrainingError(NumericalError):
    """Model parameters are unidentifiable from the given data."""


class ModelError(NumericalError):
    """Model violates a structural requirement (e.g. positive definiteness)."""


class StaleArtifactError(DataError):
    """Pipeline artifact content does not match its recorded hash."""


class PipelineConfigError(ConfigurationError):
    """Pipeline stage wiring is inconsistent with the chosen sources."""
