"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's preconditions."""


class NumericDomainError(ArithmeticError):
    """A graph node produced a non-finite value."""

    def __init__(self, node_index, op, message=None):
        self.node_index = node_index
        self.op = op
        super().__init__(message or f"node {node_index} ({op}) produced a non-finite value")


class DegenerateThresholdError(ContractError):
    """No separating interval exists between selected and unselected probabilities."""


class IngestionError(ValueError):
    """A dataset file or schema could not be ingested."""
