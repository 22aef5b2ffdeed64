"""Interpretability toolkit for small tumor-segmentation networks on synthetic phantoms."""
import importlib.metadata as _metadata

try:
    __version__ = _metadata.version("artifact")
except _metadata.PackageNotFoundError:  # running from a source checkout
    __version__ = "0.1.0"

from .checkpoint import Checkpoint, load as load_checkpoint, save as save_checkpoint
from .dissection import NetworkDissection, assign_detectors
from .featviz import ActivationMaximizer, RegConfig, activation_maximize
from .gradcam import GradCAM, attention_curve, gradcam_map
from .phantom import DatasetHandle, generate_sample
from .uncertainty import TTDUncertainty, posterior_stats, sample_posterior
from .zoo import ArchSpec, SegmentationNet, build_model, train

__all__ = [
    "ActivationMaximizer", "ArchSpec", "Checkpoint", "DatasetHandle", "GradCAM",
    "NetworkDissection", "RegConfig", "SegmentationNet", "TTDUncertainty",
    "activation_maximize", "assign_detectors", "attention_curve", "build_model",
    "generate_sample", "gradcam_map", "load_checkpoint", "posterior_stats",
    "sample_posterior", "save_checkpoint", "train",
]
