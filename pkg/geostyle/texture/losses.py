"""Content, texture and total losses for image-optimization style transfer.

Squared differences are averaged over elements, so loss magnitudes do not
depend on the image resolution and one weighting works at every pyramid level.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import torch

from geostyle.base import ArgumentError, ImageTensor, TransferConfig, image_size
from geostyle.features import ContentFeatures, FeatureExtractor, GramSet


@dataclass
class LossTerms:
    """``total = alpha_over_beta * texture + content``."""

    total: torch.Tensor
    texture: torch.Tensor
    content: torch.Tensor

    def as_floats(self) -> tuple[float, float, float]:
        return float(self.total), float(self.texture), float(self.content)


def content_loss(fc: ContentFeatures, fo: ContentFeatures) -> torch.Tensor:
    """Half the mean squared difference of two content feature maps."""
    if fc.map.shape != fo.map.shape:
        raise ArgumentError(
            f"Content features differ in shape: {tuple(fc.map.shape)} vs {tuple(fo.map.shape)}"
        )
    return 0.5 * (fc.map - fo.map).square().mean()


def texture_loss(ds: GramSet, do: GramSet, weights: Sequence[float]) -> torch.Tensor:
    """Half the weighted sum over layers of the mean squared Gram difference."""
    if len(ds.grams) != len(do.grams) or len(weights) != len(ds.grams):
        raise ArgumentError(
            f"Texture loss needs matching layers: {len(ds.grams)} style, "
            f"{len(do.grams)} output, {len(weights)} weights"
        )
    total = ds.grams[0].new_zeros(())
    for weight, gs, go in zip(weights, ds.grams, do.grams, strict=True):
        if gs.shape != go.shape:
            raise ArgumentError(f"Gram shapes differ: {tuple(gs.shape)} vs {tuple(go.shape)}")
        total = total + weight * (gs - go).square().mean()
    return 0.5 * total


class TransferObjective:
    """Total loss of candidate images against fixed style and content targets.

    Target features are computed once; each call runs a single forward pass
    over the candidate.
    """

    def __init__(
        self,
        extractor: FeatureExtractor,
        style: ImageTensor,
        content: ImageTensor,
        config: TransferConfig,
    ) -> None:
        if image_size(style) != image_size(content):
            raise ArgumentError(
                f"Style {image_size(style)} and content {image_size(content)} must share a canvas"
            )
        self.extractor = extractor
        self.config = config
        with torch.no_grad():
            self.style_grams = extractor.extract_texture(style)
            self.content_features = extractor.extract_content(content)

    def __call__(self, out: ImageTensor) -> LossTerms:
        features = self.extractor.extract_all(out)
        texture = texture_loss(self.style_grams, features.texture, self.config.layer_weights)
        content = content_loss(self.content_features, features.content)
        total = self.config.alpha_over_beta * texture + content
        return LossTerms(total=total, texture=texture, content=content)


def total_loss(
    style: ImageTensor,
    content: ImageTensor,
    out: ImageTensor,
    config: TransferConfig,
    extractor: FeatureExtractor,
) -> LossTerms:
    """Texture loss of ``out`` against ``style`` plus content loss against ``content``."""
    return TransferObjective(extractor, style, content, config)(out)
