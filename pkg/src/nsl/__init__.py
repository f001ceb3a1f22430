"""Weakly semi-supervised camouflaged segmentation on plain numpy.

Box-prompted auxiliary network -> soft pseudo labels -> image-only primary
network trained under a noise-correction loss with a q = 2 -> 1 switch.
Everything (kernels, backward passes, optimizer, data synthesis, metrics,
experiment pipeline) is self-contained and deterministic per seed.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, LossError, NslError, ShapeError,
                     TrainingError)

__all__ = [
    "ConfigError", "DataError", "LossError", "NslError", "ShapeError",
    "TrainingError", "__version__",
]
