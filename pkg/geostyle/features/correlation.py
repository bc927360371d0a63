"""Dense matching score between two geometric feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from geostyle.base import ArgumentError
from geostyle.features.backbone import GeoFeatureMap


@dataclass
class CorrelationTensor:
    """``values[b, i, j, k, l]``: content position ``(i, j)`` against style position ``(k, l)``.

    Positions are ``(row, column)``. Values lie in [0, 1].
    """

    values: torch.Tensor

    @property
    def grid_h(self) -> int:
        return int(self.values.shape[1])

    @property
    def grid_w(self) -> int:
        return int(self.values.shape[2])

    def as_channels(self) -> torch.Tensor:
        """Regressor input layout ``(B, Hs*Ws, Hc, Wc)``: style positions become channels."""
        b, hc, wc, hs, ws = self.values.shape
        return self.values.reshape(b, hc, wc, hs * ws).permute(0, 3, 1, 2).contiguous()


def correlate(gc: GeoFeatureMap, gs: GeoFeatureMap) -> CorrelationTensor:
    """Cosine similarity of every content position with every style position, negatives zeroed.

    Raises:
        ArgumentError: If the two maps differ in shape.
    """
    if gc.map.shape != gs.map.shape:
        raise ArgumentError(
            f"Cannot correlate feature maps of shapes {tuple(gc.map.shape)} "
            f"and {tuple(gs.map.shape)}"
        )
    raw = torch.einsum("bnij,bnkl->bijkl", gc.map, gs.map)
    return CorrelationTensor(values=raw.clamp_min(0.0))
