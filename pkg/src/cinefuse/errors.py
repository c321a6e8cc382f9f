"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data/ingest
problems exit 2, numeric or contract violations exit 3.
"""


class CineFuseError(Exception):
    """Base class for all package errors."""


class ShapeError(CineFuseError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(CineFuseError):
    """A documented precondition or usage contract was violated."""


class NumericError(CineFuseError):
    """Non-finite values where finite ones are required."""


class IngestError(CineFuseError):
    """Manifest or clip data failed validation."""


class CheckpointError(CineFuseError):
    """A checkpoint or tensor file could not be read or is corrupt."""


class UndefinedMetricError(CineFuseError):
    """A metric is undefined for the given inputs (e.g. single-class AUROC)."""
