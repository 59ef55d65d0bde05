"""nvkit: desk-scale vision backbones, self-distillation, and evaluation.

The package is self-contained on numpy: a minimal autodiff core
(`nvkit.tensor`), two backbones (`nvkit.vit`, `nvkit.vim`), a
self-distillation trainer (`nvkit.dino`), a deterministic data pipeline
(`nvkit.data`, `nvkit.augment`), an evaluation harness (`nvkit.metrics`,
`nvkit.evaluate`), attention-map rendering (`nvkit.viz`), and a CLI
(`nvkit.cli`).
"""

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    NumericalError,
    NvkitError,
    UnsupportedArchitectureError,
)
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "NvkitError",
    "DimensionError",
    "ContractError",
    "ConfigError",
    "CheckpointError",
    "NumericalError",
    "UnsupportedArchitectureError",
    "__version__",
]
