"""Exception types. Each carries a short ``category`` used by the CLI."""


class NBFError(Exception):
    category = "error"


class ParseError(NBFError, ValueError):
    category = "parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class VocabLookupError(NBFError, KeyError):
    category = "lookup"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class BuildError(NBFError, ValueError):
    category = "build"


class ArgumentError(NBFError, ValueError):
    category = "argument"


class SamplingError(NBFError, RuntimeError):
    category = "sampling"


class RefusalError(NBFError, RuntimeError):
    category = "refused"


class ShapeError(NBFError, ValueError):
    category = "shape"


class NumericError(NBFError, ArithmeticError):
    category = "numeric"


class FormatError(NBFError, ValueError):
    category = "format"


class CorruptionError(NBFError, ValueError):
    category = "corrupt"


class ConfigError(NBFError, ValueError):
    category = "config"
