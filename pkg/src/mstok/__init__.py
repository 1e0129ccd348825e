"""Multi-scale vision-transformer image tokenizer, CPU-only and dependency-light."""

from .tensor import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"
