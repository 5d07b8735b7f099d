"""Exception hierarchy shared across the toolkit."""


class IntersliceError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(IntersliceError):
    """Invalid configuration values."""


class FormatError(IntersliceError):
    """On-disk dataset format violations (names the offending file)."""


class SplitError(IntersliceError):
    """Invalid patient-level split specification."""


class PlanningError(IntersliceError):
    """Annotation plan cannot be derived (stack too short, too few kept slices)."""


class AssemblyError(IntersliceError):
    """Interpolated dataset assembly found a missing generated entry."""


class ShapeError(IntersliceError):
    """Array shape mismatch in network or blend operations."""


class LossAssemblyError(IntersliceError):
    """A composite loss is missing one of its required ratio terms."""


class MetricError(IntersliceError):
    """Metric preconditions violated (non-finite embeddings, unnormalized rows)."""


class FillError(IntersliceError):
    """Gap-filling request references indices outside the kept set."""


class LeakageError(IntersliceError):
    """Patient-level leakage between training and evaluation data."""


class TrainingDivergedError(IntersliceError):
    """Training produced non-finite losses; carries the diagnostic dump path."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
