"""Gated context aggregation network for dehazing/deraining on a small numpy autograd engine."""

from .model import GCANet, ModelConfig, dehaze, extract_edges, gated_fusion
from .tensor import Parameter, Tensor, backward, no_grad

__all__ = ["GCANet", "ModelConfig", "Parameter", "Tensor", "backward", "dehaze",
           "extract_edges", "gated_fusion", "no_grad"]
__version__ = "0.1.0"
