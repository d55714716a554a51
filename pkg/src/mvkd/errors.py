"""Exception hierarchy.

Errors fall into three families so the CLI can map them onto exit codes:
``DataError`` (bad inputs on disk or in a dataset), ``ConfigError`` (invalid
arguments or configuration) and everything else under ``MvkdError``.
"""


class MvkdError(Exception):
    pass


class ConfigError(MvkdError, ValueError):
    pass


class DataError(MvkdError):
    pass


# tensor core
class InvalidShape(ConfigError):
    pass


class ShapeMismatch(MvkdError, ValueError):
    pass


class InvalidParameter(ConfigError):
    pass


class PatchMismatch(ShapeMismatch):
    pass


class InvalidAxis(MvkdError, ValueError):
    pass


class InvalidBackward(MvkdError, RuntimeError):
    pass


# models
class InvalidConfig(ConfigError):
    pass


class FormatError(DataError):
    pass


class CorruptCheckpoint(FormatError):
    pass


class UnsupportedModel(FormatError):
    pass


# losses / metrics
class InvalidLabel(MvkdError, ValueError):
    pass


class InvalidDistribution(MvkdError, ValueError):
    pass


# data
class EmptyDataset(DataError):
    pass


class InvalidDataset(DataError):
    pass


class DecodeError(DataError):
    pass


class StratificationError(DataError):
    pass


# explainability / io
class InvalidTarget(ConfigError):
    pass


class IoError(MvkdError, OSError):
    pass
