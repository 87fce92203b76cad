"""Reverse-mode autodiff over float64 numpy arrays."""

from h2dilr.autodiff import ops
from h2dilr.autodiff.gradcheck import gradcheck
from h2dilr.autodiff.tensor import Graph, Parameter, Tensor, as_tensor

__all__ = ["Graph", "Parameter", "Tensor", "as_tensor", "gradcheck", "ops"]
