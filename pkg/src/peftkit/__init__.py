"""Parameter-efficient fine-tuning kernels: LoRA, DoRA and MAP adapters."""

from .adapters import AdapterState, FrozenBase, GradBundle, Kind, init_adapter, merge, param_count
from .linalg import Rng

__all__ = ["AdapterState", "FrozenBase", "GradBundle", "Kind", "Rng", "init_adapter", "merge",
           "param_count"]
__version__ = "0.1.0"
