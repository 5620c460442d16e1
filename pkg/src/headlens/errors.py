class HeadlensError(Exception):
    """Base class for all errors raised by headlens."""


class ContractError(HeadlensError, ValueError):
    """A precondition on an operation's inputs was violated."""


class ConfigError(HeadlensError, ValueError):
    pass


class NumericError(HeadlensError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class ConflictError(ContractError):
    pass


class IndeterminateLanguage(HeadlensError):
    """Raised when a token sequence carries no language evidence."""
