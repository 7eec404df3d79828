"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class SctError(Exception):
    exit_code = 1


class ValidationError(SctError, ValueError):
    exit_code = 2


class ConfigError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class ChannelIndexError(ValidationError, IndexError):
    pass


class MissingTensorError(ValidationError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FormatError(SctError):
    exit_code = 3


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DuplicateNameError(FormatError):
    pass


class NumericError(SctError, ArithmeticError):
    exit_code = 4


class NonFiniteError(NumericError):
    pass


class TrainingAborted(NumericError):
    pass
