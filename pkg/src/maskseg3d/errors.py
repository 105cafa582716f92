"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class MaskSegError(Exception):
    exit_code = 1


class UsageError(MaskSegError, ValueError):
    exit_code = 1


class ConfigError(MaskSegError, ValueError):
    exit_code = 1


class DataError(MaskSegError, ValueError):
    exit_code = 2


class FormatError(DataError):
    exit_code = 2


class GenerationError(DataError):
    exit_code = 2


class NumericError(MaskSegError, ArithmeticError):
    exit_code = 3
