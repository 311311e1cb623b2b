"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures without
inspecting messages: 1 for usage/configuration problems, 2 for bad data.
"""


class ColdStartError(Exception):
    exit_code = 2


class UsageError(ColdStartError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class BudgetError(UsageError):
    pass


class DataError(ColdStartError):
    exit_code = 2


class FormatError(DataError):
    pass


class TruncationError(FormatError):
    pass


class InputError(DataError):
    pass


class DegenerateInputError(DataError):
    pass


class BoundsError(DataError):
    pass


class EmptyForegroundError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class UndefinedMetricError(DataError):
    pass


class ThresholdTooCoarseError(DataError):
    pass
