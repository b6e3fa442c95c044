"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 3, DataError (and
subclasses) -> 4, NumericError -> 5. ContractError marks caller bugs
(violated preconditions) and is never caught by the CLI.
"""


class CrossCloneError(Exception):
    """Base class for all package errors."""


class ConfigError(CrossCloneError):
    """Invalid configuration value or combination."""


class DataError(CrossCloneError):
    """Problem with corpus, checkpoint, or evaluation data."""


class CorpusParseError(DataError):
    """Malformed corpus line; carries the 1-based line number."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class SchemaError(DataError):
    """Record is valid JSON but violates the corpus schema."""


class ValidationError(DataError):
    """Record violates a domain invariant (duplicate id, bad snippet, ...)."""


class SamplingError(DataError):
    """Not enough data to draw the requested batch."""


class EvaluationError(DataError):
    """Retrieval evaluation cannot produce a score."""


class CheckpointError(DataError):
    """Checkpoint file is corrupt, truncated, or version-incompatible."""


class NumericError(CrossCloneError):
    """Degenerate or non-finite numeric input."""


class ContractError(CrossCloneError):
    """A documented precondition was violated by the caller."""
