"""Texture classification toolkit for H&E histology images.

Colour normalization by sparse stain separation, a compact fire-module CNN
on a from-scratch autodiff engine, one-cycle super-convergence training with
discriminative group rates, Grad-CAM explanations and ROC/AUC evaluation.
The two main entry points follow the familiar estimator protocol:
``StainNormalizer`` (fit/transform) and ``TextureClassifier`` (fit/predict).
"""

from .classifier import TextureClassifier
from .config import ConfigError, RunConfig
from .data import (
    AugmentConfig,
    BatchSpec,
    CRC_CLASS_NAMES,
    DatasetIndex,
    augment_sample,
    folder_provider,
    make_batches,
    normalize_channels,
    resize_bilinear,
    scan_dataset,
    stratified_split,
)
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .gradcam import CamResult, grad_cam, overlay
from .metrics import (
    EvalResult,
    RocCurve,
    confusion_matrix,
    evaluate,
    macro_roc,
    one_vs_rest_curves,
    roc_curve,
)
from .network import FireSpec, TextureNet, build_fire, build_network, shape_trace
from .optim import (
    LrRangeResult,
    OneCycleSchedule,
    ParamGroup,
    TrainStage,
    adamw_step,
    default_stages,
    discriminative_lrs,
    lr_range_test,
    one_cycle_at,
    train,
)
from .rng import RngStream
from .stain import (
    StainBasis,
    StainModel,
    StainNormalizer,
    compute_density,
    estimate_stain_basis,
    fit_target,
    normalize_image,
    od_to_rgb,
    rgb_to_od,
)
from .synth import TEXTURE_CLASS_NAMES, generate_texture_dataset, texture_split_arrays
from .tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "BatchSpec", "CamResult", "Checkpoint", "CheckpointError",
    "ConfigError", "CRC_CLASS_NAMES", "DatasetIndex", "EvalResult", "FireSpec",
    "LrRangeResult", "OneCycleSchedule", "ParamGroup", "RocCurve", "RngStream",
    "RunConfig", "StainBasis", "StainModel", "StainNormalizer", "Tensor",
    "TextureClassifier", "TextureNet", "TrainStage", "TEXTURE_CLASS_NAMES",
    "adamw_step", "augment_sample", "backward", "build_fire", "build_network",
    "compute_density", "confusion_matrix", "default_stages",
    "discriminative_lrs", "estimate_stain_basis", "evaluate", "fit_target",
    "folder_provider", "generate_texture_dataset", "grad_cam",
    "load_checkpoint", "lr_range_test", "macro_roc", "make_batches",
    "normalize_channels", "normalize_image", "od_to_rgb", "one_cycle_at",
    "one_vs_rest_curves", "overlay", "resize_bilinear", "rgb_to_od",
    "roc_curve", "save_checkpoint", "scan_dataset", "shape_trace",
    "stratified_split", "texture_split_arrays", "train",
]
