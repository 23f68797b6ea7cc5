"""Scale-aware attention segmentation network on a from-scratch tensor core."""

from .tensor import Tensor, Rng, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "Rng", "backward", "no_grad", "__version__"]
