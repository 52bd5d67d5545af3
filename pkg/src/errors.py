from __future__ import annotations

from typing import Any, List, Optional


class CarbsegError(Exception):
    """Base class for every error raised on purpose by this package."""

    exit_code: int = 2


class UsageError(CarbsegError):
    """Bad command line: unknown subcommand, missing flag, malformed value."""

    exit_code = 1


class ConfigError(CarbsegError):
    """
    A configuration document failed validation.

    `issues` holds the ValidationIssue records (errors and warnings) that were
    collected while loading, so callers can report all of them at once.
    """

    exit_code = 1

    def __init__(self, message: str, issues: Optional[List[Any]] = None) -> None:
        super().__init__(message)
        self.issues = list(issues or [])


class DataError(CarbsegError, ValueError):
    """Input data is missing, unreadable or inconsistent (shapes, bit depth, ...)."""

    exit_code = 2


class NumericalError(CarbsegError, ArithmeticError):
    """Non-finite losses, gradients or objective values."""

    exit_code = 3


class TrainingAborted(NumericalError):
    """
    Training hit a non-finite loss. Carries the last good parameters and the
    report recorded up to the failing epoch.
    """

    def __init__(self, message: str, params: Any = None, report: Any = None) -> None:
        super().__init__(message)
        self.params = params
        self.report = report
