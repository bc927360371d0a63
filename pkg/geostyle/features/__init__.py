"""VGG-19 feature extraction and feature correlation."""

from geostyle.features.backbone import (
    CONTENT_LAYER,
    GEOMETRIC_LAYER,
    TEXTURE_CHANNELS,
    TEXTURE_LAYERS,
    ContentFeatures,
    FeatureBundle,
    FeatureExtractor,
    GeoFeatureMap,
    GramSet,
    VggBackbone,
    geometric_grid,
    get_backbone,
    gram_matrix,
    load_backbone,
    weights_digest,
)
from geostyle.features.correlation import CorrelationTensor, correlate

__all__ = [
    # Backbone
    "CONTENT_LAYER",
    "GEOMETRIC_LAYER",
    "TEXTURE_CHANNELS",
    "TEXTURE_LAYERS",
    "VggBackbone",
    "geometric_grid",
    "get_backbone",
    "load_backbone",
    "weights_digest",
    # Features
    "ContentFeatures",
    "FeatureBundle",
    "FeatureExtractor",
    "GeoFeatureMap",
    "GramSet",
    "gram_matrix",
    # Correlation
    "CorrelationTensor",
    "correlate",
]
