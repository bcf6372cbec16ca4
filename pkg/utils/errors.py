"""
Exception hierarchy shared by the library and the CLI.
"""

from typing import Optional


class SvehnnError(Exception):
    """Root of every error raised by this package"""


class ShapeError(SvehnnError, ValueError):
    """Array dimensions do not match the model or each other"""


class DomainError(SvehnnError, ValueError):
    """Input outside the operation's domain (empty cloud, bad subset spec, ...)"""


class ExplanationRefused(SvehnnError):
    """Guarded refusal, e.g. exact enumeration over too many features"""


class ModelFormatError(SvehnnError):
    """Malformed or unsupported model document"""


class DatasetError(SvehnnError):
    """Base class for dataset file problems"""


class DatasetParseError(DatasetError):
    """A dataset line could not be decoded"""

    def __init__(self, message: str, line: int, offset: Optional[int] = None):
        location = f"line {line}" if offset is None else f"line {line}, offset {offset}"
        super().__init__(f"{message} ({location})")
        self.line = line
        self.offset = offset


class DatasetIntegrityError(DatasetError):
    """Manifest and records disagree, the file is truncated, or the dataset is empty"""


class TrainingDivergedError(SvehnnError):
    """Training produced a non-finite loss"""


class UsageError(SvehnnError):
    """Command-line usage problem"""


class VerificationFailed(SvehnnError):
    """A verification or benchmark acceptance check did not pass"""
