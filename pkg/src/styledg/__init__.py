"""Content-aware, style-invariant domain-generalization training toolkit."""

from .tensor import Tensor, grad_check, make_tensor

__all__ = ["Tensor", "grad_check", "make_tensor"]

__version__ = "0.1.0"
