"""Information bottleneck attribution for weak lesion localization on
synthetic lung slices, with Grad-CAM as the baseline."""

from .classifier import FeatureStats, Model, build_model, load_checkpoint, save_checkpoint, train
from .detect import detect, estimate_severity
from .gradcam import gradcam_heatmap
from .heatmap import Heatmap
from .iba import BottleneckConfig, attribute, capacity_kl, inject_noise, optimize_mask
from .synth import generate_dataset, load_dataset, save_dataset

__version__ = "0.1.0"

__all__ = [
    "BottleneckConfig",
    "FeatureStats",
    "Heatmap",
    "Model",
    "attribute",
    "build_model",
    "capacity_kl",
    "detect",
    "estimate_severity",
    "generate_dataset",
    "gradcam_heatmap",
    "inject_noise",
    "load_checkpoint",
    "load_dataset",
    "optimize_mask",
    "save_checkpoint",
    "save_dataset",
    "train",
]
