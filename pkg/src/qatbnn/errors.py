"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class QatBnnError(Exception):
    exit_code = 1


class ShapeError(QatBnnError, ValueError):
    exit_code = 3


class DomainError(QatBnnError, ValueError):
    exit_code = 3


class ConfigError(QatBnnError, ValueError):
    exit_code = 3


class NumericError(QatBnnError, ArithmeticError):
    exit_code = 4
