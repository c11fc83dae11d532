"""Exception hierarchy shared across the package."""


class SoftFTError(Exception):
    """Base class for all package errors."""


class DimensionError(SoftFTError, ValueError):
    pass


class ContractError(SoftFTError, ValueError):
    pass


class ConfigError(SoftFTError, ValueError):
    pass


class RangeError(ConfigError):
    pass


class FormatError(SoftFTError, ValueError):
    pass


class TruncatedFileError(SoftFTError, OSError):
    pass


class HeadNotFoundError(SoftFTError, KeyError):
    pass


class HeadExistsError(SoftFTError, ValueError):
    pass


class DivergenceError(SoftFTError, RuntimeError):
    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.value = value


class ParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path
