"""Multi-view, knowledge-enhanced CT report generation on a small numpy autodiff engine."""

from .tensor import ContractError, DimensionError, NonFiniteError, Tensor, no_grad

__all__ = ["ContractError", "DimensionError", "NonFiniteError", "Tensor", "no_grad"]
__version__ = "0.1.0"
