"""Exception hierarchy shared across the package."""


class FineError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FineError, ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class ContractError(FineError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigurationError(FineError, ValueError):
    """A configuration value is invalid or unknown."""


class IncompatibilityError(FineError, ValueError):
    """Two artifacts (model, learngene, checkpoint) cannot be combined."""


class DivergenceError(FineError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, last_finite):
        self.step = step
        self.last_finite = last_finite
        super().__init__(
            f"loss became non-finite at step {step} (last finite loss: {last_finite})"
        )


class FormatError(FineError, ValueError):
    """A file does not follow the expected container layout or schema."""


class CorruptionError(FormatError):
    """Payload checksum did not verify."""


class VersionError(FormatError):
    """File was written by a newer format version than this reader supports."""
