from geostyle.base import (
    AffineParams,
    BackboneConfig,
    FillPolicy,
    GeostyleError,
    TpsParams,
    TrainConfig,
    TransferConfig,
    WarpKind,
    WarpMode,
    load_image,
    save_image,
)
from geostyle.geometry import make_sampling_field, warp_image

__all__ = [
    # Models
    "AffineParams",
    "BackboneConfig",
    "FillPolicy",
    "GeostyleError",
    "TpsParams",
    "TrainConfig",
    "TransferConfig",
    "WarpKind",
    "WarpMode",
    # Images and warping
    "load_image",
    "save_image",
    "make_sampling_field",
    "warp_image",
    # Pipeline (lazy loaded)
    "FeatureExtractor",
    "JobSpec",
    "TransferPipeline",
    "run_evaluate",
    "run_prepare_bank",
    "run_train",
    "run_transfer",
]

# Lazy loading for the layers that build the backbone
_LAZY_IMPORTS = {
    "FeatureExtractor": "geostyle.features",
    "JobSpec": "geostyle.pipeline",
    "TransferPipeline": "geostyle.pipeline",
    "run_evaluate": "geostyle.pipeline",
    "run_prepare_bank": "geostyle.pipeline",
    "run_train": "geostyle.pipeline",
    "run_transfer": "geostyle.pipeline",
}


def __getattr__(name: str):
    if name in _LAZY_IMPORTS:
        import importlib

        module = importlib.import_module(_LAZY_IMPORTS[name])
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
