"""Exception hierarchy shared across the package."""


class HeadfieldError(Exception):
    """Base class for all package-specific errors."""


class VolumeFormatError(HeadfieldError):
    """Raised when a volume file is malformed or inconsistent."""


class TissueTableError(HeadfieldError):
    """Raised when a tissue table is missing an entry or holds bad values."""


class PhantomSpecError(HeadfieldError):
    """Raised when a phantom specification violates its invariants."""


class LayoutError(HeadfieldError):
    """Raised when electrode placement fails (ray miss, empty patch, ...)."""


class DatasetError(HeadfieldError):
    """Raised on feature-dataset construction or serialization problems."""


class ModelFormatError(HeadfieldError):
    """Raised when a saved model file cannot be parsed."""


class SolverError(HeadfieldError):
    """Base class for numerical failures in the potential solver."""


class NoConductivePathError(SolverError):
    """The two electrode patches are not connected through conductive tissue."""


class ConvergenceError(SolverError):
    """The iterative solver exhausted its budget before reaching tolerance."""


class RankDeficiencyError(HeadfieldError):
    """The linear-model design matrix does not have full column rank."""

    def __init__(self, message: str, dependent_columns: list[str] | None = None):
        super().__init__(message)
        self.dependent_columns = dependent_columns or []
