"""SOE-Net point-cloud place recognition at desk scale.

Modules: ``diffcore`` (reverse-mode autodiff and SCK1 checkpoints),
``geometry`` (clouds, S8N neighbor search, catalogs), ``model``,
``losses``, ``training``, ``retrieval``, ``datagen``, ``gradcheck`` and
``cli``.
"""

from soenet.errors import DataError, FormatError, NonFiniteError, ShapeError, SoeNetError, ThresholdError, UsageError
from soenet.geometry import PointCloud, Submap
from soenet.losses import LossConfig
from soenet.model import ModelConfig, init_params, soenet_forward

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "FormatError",
    "LossConfig",
    "ModelConfig",
    "NonFiniteError",
    "PointCloud",
    "ShapeError",
    "SoeNetError",
    "Submap",
    "ThresholdError",
    "UsageError",
    "init_params",
    "soenet_forward",
]
