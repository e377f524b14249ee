"""Cost-aware uplift ranking with neural naive Bayes policy factors."""

__version__ = "0.1.0"

from .errors import ContractError, DegenerateThresholdError, IngestionError, NumericDomainError  # noqa: E402

__all__ = ["ContractError", "DegenerateThresholdError", "IngestionError", "NumericDomainError", "__version__"]
