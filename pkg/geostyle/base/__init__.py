"""Base models, errors and image utilities for geostyle."""

from geostyle.base.config import (
    ENV_BACKBONE_WEIGHTS,
    ENV_DEVICE,
    get_setting,
    load_config_file,
    parse_config_text,
    resolve_device,
)
from geostyle.base.corpus import ImageCorpus
from geostyle.base.errors import (
    ArgumentError,
    BackboneInitError,
    ConfigurationError,
    GeostyleError,
    ImageFormatError,
    ImageIOError,
    NonFiniteLossError,
    PreconditionError,
    StateError,
)
from geostyle.base.image_io import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    MIN_PIPELINE_SIZE,
    ImageTensor,
    Pyramid,
    center_square,
    denormalize,
    gaussian_blur,
    gaussian_pyramid,
    image_size,
    load_image,
    normalize_for_backbone,
    pyramid_sizes,
    resize,
    save_image,
)
from geostyle.base.models import (
    AffineParams,
    AffineRanges,
    AugmentPolicy,
    BackboneConfig,
    CheckpointMetadata,
    ExecutorType,
    FillPolicy,
    JitterConfig,
    PixelOptimizer,
    TpsParams,
    TpsRanges,
    TrainConfig,
    TransferConfig,
    WarpKind,
    WarpMode,
    WarpParams,
)

__all__ = [
    # Errors
    "GeostyleError",
    "ArgumentError",
    "BackboneInitError",
    "ConfigurationError",
    "ImageFormatError",
    "ImageIOError",
    "NonFiniteLossError",
    "PreconditionError",
    "StateError",
    # Configuration
    "ENV_BACKBONE_WEIGHTS",
    "ENV_DEVICE",
    "get_setting",
    "load_config_file",
    "parse_config_text",
    "resolve_device",
    # Image utilities
    "IMAGENET_MEAN",
    "IMAGENET_STD",
    "MIN_PIPELINE_SIZE",
    "ImageCorpus",
    "ImageTensor",
    "Pyramid",
    "center_square",
    "denormalize",
    "gaussian_blur",
    "gaussian_pyramid",
    "image_size",
    "load_image",
    "normalize_for_backbone",
    "pyramid_sizes",
    "resize",
    "save_image",
    # Models
    "AffineParams",
    "AffineRanges",
    "AugmentPolicy",
    "BackboneConfig",
    "CheckpointMetadata",
    "ExecutorType",
    "FillPolicy",
    "JitterConfig",
    "PixelOptimizer",
    "TpsParams",
    "TpsRanges",
    "TrainConfig",
    "TransferConfig",
    "WarpKind",
    "WarpMode",
    "WarpParams",
]
