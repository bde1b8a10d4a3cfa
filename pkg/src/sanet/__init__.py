"""Micro deep-learning library for squeeze-attention segmentation heads."""

from ._kernels import BACKEND
from .tensor import ShapeError, Tensor, UsageError

__version__ = "0.1.0"

__all__ = ["BACKEND", "ShapeError", "Tensor", "UsageError", "__version__"]
