"""Saliency-manipulation pipeline on a small numpy autodiff core."""

from .tensor import ShapeError, Tensor, UsageError, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "ShapeError", "UsageError", "backward", "no_grad", "__version__"]
