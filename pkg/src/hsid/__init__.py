"""Hyperspectral intrinsic-decomposition classification.

A pixel's spectrum is treated as the product of a material reflectance
and an environmental shading factor.  The package learns the two factors
as separate feature branches (kept apart by cosine-embedding losses and a
feature-type discriminator), fuses them for classification, and ships the
full desk-scale experiment loop: cube handling, pseudo-environment
clustering, training, evaluation, synthetic oracle scenes, and a CLI.
"""

from .datacube import (
    DataError,
    HyperspectralCube,
    SampleSet,
    SplitSpec,
    extract_patch,
    extract_patches,
    load_bundle,
    normalize_bands,
    save_bundle,
    split_samples,
    subsample_training,
)
from .losses import LossBreakdown, LossConfig
from .metrics_eval import ConfusionMatrix, MetricsReport, evaluate, metrics_from_confusion
from .network import (
    DivergenceError,
    ForwardOutputs,
    ModelState,
    NetworkSpec,
    forward,
    init_model,
    load_checkpoint,
    loss_and_gradient,
    save_checkpoint,
)
from .pseudo_env import ClusterConfig, PseudoModel, assign_pseudo_labels, fit_centers
from .synth import SyntheticSceneSpec, default_scene_spec, generate, shading_only
from .trainer import TrainConfig, TrainReport, ablate, make_batches, run_pipeline, train

__version__ = "0.1.0"

__all__ = [
    "ClusterConfig",
    "ConfusionMatrix",
    "DataError",
    "DivergenceError",
    "ForwardOutputs",
    "HyperspectralCube",
    "LossBreakdown",
    "LossConfig",
    "MetricsReport",
    "ModelState",
    "NetworkSpec",
    "PseudoModel",
    "SampleSet",
    "SplitSpec",
    "SyntheticSceneSpec",
    "TrainConfig",
    "TrainReport",
    "ablate",
    "assign_pseudo_labels",
    "default_scene_spec",
    "evaluate",
    "extract_patch",
    "extract_patches",
    "fit_centers",
    "forward",
    "generate",
    "init_model",
    "load_bundle",
    "load_checkpoint",
    "loss_and_gradient",
    "make_batches",
    "metrics_from_confusion",
    "normalize_bands",
    "run_pipeline",
    "save_bundle",
    "save_checkpoint",
    "shading_only",
    "split_samples",
    "subsample_training",
    "train",
]
