"""Exception hierarchy shared by every module."""


class PeftError(Exception):
    """Base class for toolkit errors."""


class DimensionError(PeftError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(PeftError, ValueError):
    """A model, adapter, or composition configuration is invalid."""


class InputError(PeftError, ValueError):
    """Data handed to an operation is out of range or malformed."""


class UsageError(PeftError, RuntimeError):
    """An operation was called in a way its contract forbids."""


class ParseError(InputError):
    """A file could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path


class TrainingError(PeftError, RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(f"{message} (epoch {epoch}, step {step})")
        self.epoch = epoch
        self.step = step
