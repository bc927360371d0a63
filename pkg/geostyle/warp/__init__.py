"""Warp regressors, cascade estimation and synthetic-warp training."""

from geostyle.warp.regressor import (
    DEFAULT_GRID,
    Regressor,
    RegressorNet,
    correlate_images,
    estimate_affine,
    estimate_warp,
    init_regressor,
    load_regressor,
    metadata_path,
    prewarp_affine,
)
from geostyle.warp.training import (
    EvaluationReport,
    PairDataset,
    StyleBank,
    TrainingPair,
    TransformSampler,
    evaluate,
    grid_distance,
    grid_loss,
    jitter_image,
    last_checkpoint_path,
    make_training_pair,
    sample_transform,
    texture_augment,
    train,
)

__all__ = [
    # Regressor
    "DEFAULT_GRID",
    "Regressor",
    "RegressorNet",
    "correlate_images",
    "estimate_affine",
    "estimate_warp",
    "init_regressor",
    "load_regressor",
    "metadata_path",
    "prewarp_affine",
    # Training
    "EvaluationReport",
    "PairDataset",
    "StyleBank",
    "TrainingPair",
    "TransformSampler",
    "evaluate",
    "grid_distance",
    "grid_loss",
    "jitter_image",
    "last_checkpoint_path",
    "make_training_pair",
    "sample_transform",
    "texture_augment",
    "train",
]
