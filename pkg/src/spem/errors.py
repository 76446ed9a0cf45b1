"""Exception hierarchy shared by every module.

Each error carries a short machine-readable ``code`` so the command line can
print a structured message and exit nonzero.
"""

from __future__ import annotations


class SpemError(Exception):
    code = "error"

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.message = message
        self.context = context

    def structured(self) -> str:
        parts = [f"error={self.code}", f"message={self.message}"]
        parts += [f"{k}={v}" for k, v in sorted(self.context.items())]
        return " ".join(parts)


class DomainError(SpemError):
    """Input outside the domain of an operation (non-finite values, bad shapes)."""

    code = "domain"


class ParameterError(SpemError):
    code = "parameter"


class FormatError(SpemError):
    """Unreadable, truncated or version-mismatched file."""

    code = "format"


class TrainingError(SpemError):
    code = "training"


class FitError(SpemError):
    code = "fit"


class InputError(SpemError):
    """A required input path is missing or unreadable."""

    code = "input"
