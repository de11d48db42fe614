"""Exception hierarchy shared across the package."""


class MetasepError(Exception):
    """Base class for every error raised by metasep."""


class InvalidInput(MetasepError, ValueError):
    pass


class DegenerateSource(MetasepError, ValueError):
    pass


class DegenerateReference(MetasepError, ValueError):
    pass


class DegenerateInput(MetasepError, ValueError):
    pass


class Unsupported(MetasepError, NotImplementedError):
    pass


class ConfigError(MetasepError, ValueError):
    pass


class NumericalError(MetasepError, ArithmeticError):
    """A non-finite value appeared; ``block`` names the offending parameter block."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class InsufficientData(MetasepError, ValueError):
    pass


class EmptyTaskSet(MetasepError, ValueError):
    pass


class KeyMissing(MetasepError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class IoError(MetasepError, OSError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path

    def __str__(self):
        return self.args[0]


class FormatError(MetasepError, ValueError):
    pass
