"""Multi-branch convolutional classifier with learned softmax fusion of its branches.

Built on a small numpy autodiff core; see :mod:`maam.cli` for the command-line driver.
"""

from .errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    DegenerateBatchError,
    GradientError,
    LabelError,
    MAAMError,
    ShapeError,
)
from .model import Model, ModelSpec, build_model, fusion_weights, load_checkpoint, maam_forward, save_checkpoint
from .tensor import Tape, Tensor, make_rng

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "DataError",
    "DegenerateBatchError",
    "GradientError",
    "LabelError",
    "MAAMError",
    "Model",
    "ModelSpec",
    "ShapeError",
    "Tape",
    "Tensor",
    "build_model",
    "fusion_weights",
    "load_checkpoint",
    "maam_forward",
    "make_rng",
    "save_checkpoint",
]
