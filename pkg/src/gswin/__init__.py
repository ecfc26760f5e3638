"""gSwin: windowed multi-head spatial gating in a hierarchical vision backbone."""

from .tensor import Tensor, Parameter, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "Parameter", "backward", "no_grad", "__version__"]
