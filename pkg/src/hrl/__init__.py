"""Hybrid representation learning for 3-d volume classification.

A 3-d residual backbone produces feature maps that are cut into one token per
channel; handcrafted ROI statistics form a second set of tokens; a transformer
encoder fuses both and a small head classifies. Everything runs on a numpy
reverse-mode autodiff engine (:mod:`hrl.tensor`).
"""

from .backbone import Backbone3D, BackboneConfig, output_shape
from .fusion import HrlModel, ModelConfig, hrl_forward
from .metrics import compute_metrics, multiclass_metrics
from .tensor import Tensor, no_grad

__all__ = [
    "Backbone3D",
    "BackboneConfig",
    "HrlModel",
    "ModelConfig",
    "Tensor",
    "compute_metrics",
    "hrl_forward",
    "multiclass_metrics",
    "no_grad",
    "output_shape",
]

__version__ = "0.1.0"
