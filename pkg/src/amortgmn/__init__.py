"""Weight-space metanetworks: gauge symmetries, a scale-equivariant GMN and amortized fine-tuning."""

from .nets import ArchSpec, LayerSpec, cnn_zoo_arch, mlp_arch, mlp_zoo_arch
from .tensor import Tensor

__all__ = ["ArchSpec", "LayerSpec", "Tensor", "cnn_zoo_arch", "mlp_arch", "mlp_zoo_arch"]
__version__ = "0.1.0"
