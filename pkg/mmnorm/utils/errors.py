"""
Exception hierarchy for the pipeline
Every error carries an exit code and a detail message, plus keyword context
"""
from typing import Any, Dict


class PipelineError(Exception):
    """Base error: exit code, human-readable detail and diagnostic context"""

    exit_code: int = 1

    def __init__(self, detail: str, **context: Any):
        super().__init__(detail)
        self.detail = detail
        self.context: Dict[str, Any] = context

    def __str__(self) -> str:
        if not self.context:
            return self.detail
        extras = ", ".join(f"{key}={value!r}" for key, value in self.context.items())
        return f"{self.detail} ({extras})"


class UsageError(PipelineError):
    """Missing inputs or an invalid command-line combination"""
    exit_code = 2


class DataValidationError(PipelineError):
    """Inputs exist but do not validate"""
    exit_code = 3


class IngestError(DataValidationError):
    """Subjects missing from one or more input files"""


class ParseError(DataValidationError):
    """Non-numeric or malformed cell in a delimited file"""


class CorruptCheckpointError(DataValidationError):
    """Checkpoint file is truncated, has a bad magic or a bad checksum"""


class CheckpointVersionError(DataValidationError):
    """Checkpoint written by an unsupported format version"""


class ContractError(PipelineError):
    """Precondition of an operation violated by the caller"""
    exit_code = 3


class DimensionError(ContractError):
    """Operand shapes are incompatible"""


class NumericError(PipelineError):
    """Non-finite value, log-domain violation or failed factorization"""
    exit_code = 4


class UndefinedEffectError(PipelineError):
    """Statistic undefined for the given data (e.g. zero pooled variance)"""
    exit_code = 4
