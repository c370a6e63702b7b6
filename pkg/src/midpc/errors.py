"""Exception types shared across the toolkit."""


class MidpcError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(MidpcError, ValueError):
    """Operand dimensions are inconsistent with an operation's contract."""


class ConfigError(MidpcError, ValueError):
    """A configuration value violates a precondition."""


class ContractError(MidpcError, ValueError):
    """A runtime contract between components was violated."""
