"""UNet-GNN: U-shaped segmentation network with a k-NN graph bottleneck, in numpy."""
from ._backend import BACKEND
from .tensor_core import Tensor, precision

__version__ = "0.1.0"
__all__ = ["BACKEND", "Tensor", "precision", "__version__"]
