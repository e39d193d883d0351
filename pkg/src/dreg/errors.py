"""Exception hierarchy shared by every module."""


class DregError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DregError, ValueError):
    """Invalid configuration or out-of-range parameter."""


class NumericError(DregError, ArithmeticError):
    """NaN input, non-finite intermediate or singular system."""


class ParseError(DregError, ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class TrainingError(DregError, RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, epoch=None, step=None):
        self.epoch = epoch
        self.step = step
        super().__init__(f"epoch {epoch}, step {step}: {message}")


class UndefinedMetricError(DregError, ValueError):
    """Metric is undefined on the given predictions (e.g. no errors)."""
