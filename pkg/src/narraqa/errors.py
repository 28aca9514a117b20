"""Exception types shared across the package."""


class NarraqaError(Exception):
    """Base class for all package-specific errors."""


class ParseError(NarraqaError):
    """A serialized record could not be parsed.

    Carries the 1-based line number of the offending record when known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataValidationError(NarraqaError):
    """Parsed data violates a domain invariant (e.g. unordered segments)."""


class ContractViolation(NarraqaError):
    """A pluggable port returned output violating its declared contract."""


class FeatureLookupError(NarraqaError):
    """A video feature file is missing or does not cover the requested clip."""


class CheckpointError(NarraqaError):
    """A checkpoint file is malformed or incompatible with the model."""
