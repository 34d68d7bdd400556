"""Fully convolutional music auto-tagging on a small numpy autodiff core."""

from .frontend import FeatureKind, FrontendConfig, extract
from .metrics import macro_auc, roc_auc
from .models import Model, ModelSpec, build, fcn_spec, mfcc_spec, shape_trace
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "FeatureKind", "FrontendConfig", "extract", "macro_auc", "roc_auc", "Model", "ModelSpec",
    "build", "fcn_spec", "mfcc_spec", "shape_trace", "TrainConfig", "train",
]
