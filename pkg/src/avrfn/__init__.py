"""Thermal image super-resolution with dilated residual blocks and second-order channel attention."""

from .model import ModelSpec, SRModel, build_model
from .tensor import Tensor, no_grad

__all__ = ["ModelSpec", "SRModel", "Tensor", "build_model", "no_grad"]
__version__ = "0.1.0"
