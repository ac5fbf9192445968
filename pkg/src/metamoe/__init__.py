"""Multi-source domain adaptation with a metric-weighted mixture of experts."""

from metamoe.errors import ConfigError, ContractError, NumericalError, ParseError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "NumericalError", "ParseError", "__version__"]
