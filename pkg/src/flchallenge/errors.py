"""Exception hierarchy shared by all modules."""


class FLChallengeError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(FLChallengeError, ValueError):
    exit_code = 2

    def __init__(self, message, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class DataError(FLChallengeError, ValueError):
    exit_code = 4


class EmptySplitError(DataError):
    pass


class EmptyBatchError(DataError):
    pass


class ShapeError(DataError):
    pass


class DomainError(DataError):
    pass


class AlignmentError(DataError):
    pass


class SchemaError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericsError(FLChallengeError, ArithmeticError):
    exit_code = 4


class UndefinedKappa(DataError):
    pass


class UndefinedAUC(DataError):
    pass


class BudgetError(FLChallengeError):
    """A run violated one of the operational budgets."""

    exit_code = 3

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class MessageTooLarge(BudgetError):
    pass
