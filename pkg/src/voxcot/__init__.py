"""Uncertainty-aware multi-view co-training for 3D volumetric segmentation.

A self-contained numpy implementation: reverse-mode autodiff tensor engine,
cube-symmetry view transforms, an encoder-decoder segmentation network with
asymmetric 3D kernels, MC-dropout uncertainty estimation with
confidence-weighted pseudo-label fusion, and the two-stage co-training loop.
"""

__version__ = "0.1.0"

from .rng import RngStream
from .tensor import EngineError, NumericsError, Tensor, no_grad
from .views import ViewTransform, standard_view_set
from .network import ArchitectureDescriptor, ViewModel
from .training import TrainConfig
from .data import Volume, read_volume, write_volume

__all__ = [
    "RngStream", "Tensor", "EngineError", "NumericsError", "no_grad",
    "ViewTransform", "standard_view_set",
    "ArchitectureDescriptor", "ViewModel", "TrainConfig",
    "Volume", "read_volume", "write_volume",
    "__version__",
]
