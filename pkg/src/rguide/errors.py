"""Exception hierarchy.

Every error raised by the library derives from :class:`RGuideError` and
carries enough structured context (dimensions, step index, config key) for
the CLI to map it to an exit code without parsing messages.
"""


class RGuideError(Exception):
    """Base class for all library errors."""


class GeometryError(RGuideError, ValueError):
    """Invalid metric parameters or inputs to a metric operation."""


class DimensionMismatch(GeometryError):
    def __init__(self, expected, got, what="vector"):
        self.expected = expected
        self.got = got
        super().__init__(f"{what} has dimension {got}, expected {expected}")


class NonFiniteInput(GeometryError):
    def __init__(self, what="vector"):
        self.what = what
        super().__init__(f"{what} contains non-finite entries")


class DegenerateDirection(GeometryError):
    """Raised when a zero gradient or zero update makes a direction undefined."""


class OracleError(RGuideError, ValueError):
    """Bad time, label, or input for a score oracle."""


class NumericalError(RGuideError, ArithmeticError):
    """A computation produced non-finite values or violated an internal identity."""

    def __init__(self, message, step_index=None):
        self.step_index = step_index
        if step_index is not None:
            message = f"step {step_index}: {message}"
        super().__init__(message)


class StepError(NumericalError):
    """A sampler step failed; ``partial`` holds the trajectory up to the failure."""

    def __init__(self, message, step_index=None, partial=None):
        super().__init__(message, step_index=step_index)
        self.partial = partial


class CalibrationError(RGuideError, RuntimeError):
    def __init__(self, message, scanned=()):
        self.scanned = list(scanned)
        if self.scanned:
            pts = ", ".join(f"{s:.6g}->{e:.6g}" for s, e in self.scanned)
            message = f"{message} (scanned scale->energy: {pts})"
        super().__init__(message)


class ConfigError(RGuideError, ValueError):
    """Invalid run configuration. ``key`` is a dotted path, ``line`` 1-based when known."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        prefix = ""
        if key is not None:
            prefix += f"{key}: "
        if line is not None:
            prefix = f"line {line}: " + prefix
        super().__init__(prefix + message)


class IncompleteRecord(RGuideError, ValueError):
    """A trajectory record is partial or internally inconsistent."""
