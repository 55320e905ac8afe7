"""Exception types shared across fusionkit modules."""


class FusionkitError(Exception):
    """Base class for all fusionkit errors."""


class ShapeError(FusionkitError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class BadMagicError(FusionkitError, ValueError):
    """A binary file does not start with the expected magic bytes."""


class TruncatedError(FusionkitError, ValueError):
    """A binary file ended before its declared payload was complete."""

    def __init__(self, expected: int, actual: int, what: str = "payload"):
        self.expected = expected
        self.actual = actual
        super().__init__(f"truncated {what}: expected {expected} bytes, got {actual}")


class DimensionOverflowError(FusionkitError, ValueError):
    """Declared dimensions exceed what the format or memory can hold."""


class ConfigError(FusionkitError, ValueError):
    """A config file is malformed; carries the offending line when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PolicyError(FusionkitError, ValueError):
    """A matching request violates the active policy (e.g. downsampling)."""


class CtcInfeasibleError(FusionkitError, ValueError):
    """The label sequence cannot be aligned within the given frame count."""


class DivergenceError(FusionkitError, RuntimeError):
    """Training produced a non-finite loss."""


class GraphConsumedError(FusionkitError, RuntimeError):
    """backward() was called through a graph that was already backpropagated."""


class NondeterminismError(FusionkitError, RuntimeError):
    """A function expected to be deterministic returned differing values."""
