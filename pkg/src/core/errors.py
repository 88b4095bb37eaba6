class EffirLabError(Exception):

    pass


class ContractError(EffirLabError):
    """A precondition of an operation was violated by its caller."""

    pass


class DimensionError(ContractError):

    pass


class NumericError(EffirLabError):
    """A computation produced non-finite or degenerate values."""

    pass


class CheckpointError(EffirLabError):

    pass


class ConfigError(EffirLabError):

    pass
