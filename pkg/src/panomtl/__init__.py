"""Multi-task depth and surface-normal estimation on 360-degree panoramas."""
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
