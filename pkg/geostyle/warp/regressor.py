"""Warp regressors: correlation tensor in, transform parameters out.

Two distinct networks run as a cascade. The affine regressor sees the
correlation of the raw content against the style; the TPS regressor sees the
correlation of the affine-prewarped content against the style.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch
from pydantic import ValidationError
from torch import nn

from geostyle.base import (
    AffineParams,
    ArgumentError,
    CheckpointMetadata,
    FillPolicy,
    ImageIOError,
    ImageTensor,
    StateError,
    TpsParams,
    WarpKind,
    resize,
)
from geostyle.features import CorrelationTensor, FeatureExtractor, correlate, weights_digest
from geostyle.geometry import field_from_tensor, identity_tensor, tensor_to_params, warp_image

logger = logging.getLogger(__name__)

DEFAULT_GRID = (15, 15)
METADATA_SUFFIX = ".meta"

# Spatial shrink of the two unpadded convolutions (7x7, then 5x5)
_CONV_SHRINK = 6 + 4
_MIN_GRID = _CONV_SHRINK + 1


class RegressorNet(nn.Module):
    """Two conv blocks (7x7 to 128, 5x5 to 64, each with batch norm and ReLU) and a linear head.

    The linear head starts at zero weights with the identity parameters as bias,
    so an untrained network predicts the identity transform for any input.
    """

    def __init__(self, kind: WarpKind, grid: tuple[int, int] = DEFAULT_GRID) -> None:
        super().__init__()
        grid_h, grid_w = grid
        if min(grid_h, grid_w) < _MIN_GRID:
            raise ArgumentError(
                f"Correlation grid must be at least {_MIN_GRID}x{_MIN_GRID}, got {grid}"
            )
        self.kind = kind
        self.features = nn.Sequential(
            nn.Conv2d(grid_h * grid_w, 128, kernel_size=7),
            nn.BatchNorm2d(128),
            nn.ReLU(),
            nn.Conv2d(128, 64, kernel_size=5),
            nn.BatchNorm2d(64),
            nn.ReLU(),
        )
        flat = 64 * (grid_h - _CONV_SHRINK) * (grid_w - _CONV_SHRINK)
        self.head = nn.Linear(flat, kind.param_count)
        nn.init.zeros_(self.head.weight)
        with torch.no_grad():
            self.head.bias.copy_(identity_tensor(kind))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x).flatten(1))


@dataclass
class Regressor:
    """A warp regressor network together with what it expects and how it was trained."""

    kind: WarpKind
    net: RegressorNet
    input_grid: tuple[int, int] = DEFAULT_GRID
    trained: bool = False
    history: list[float] = field(default_factory=list)  # per-epoch mean training loss
    metadata: CheckpointMetadata | None = None

    @property
    def param_count(self) -> int:
        return self.kind.param_count

    def _check_input(self, channels: torch.Tensor) -> None:
        expected = (self.input_grid[0] * self.input_grid[1], *self.input_grid)
        if tuple(channels.shape[1:]) != expected:
            raise ArgumentError(
                f"{self.kind} regressor expects correlation {expected}, "
                f"got {tuple(channels.shape[1:])}"
            )

    def forward(self, correlation: CorrelationTensor) -> torch.Tensor:
        """Differentiable ``(B, p)`` prediction in the network's current mode."""
        channels = correlation.as_channels()
        self._check_input(channels)
        return self.net(channels.to(next(self.net.parameters())))

    def predict_tensor(self, correlation: CorrelationTensor) -> torch.Tensor:
        """``(B, p)`` prediction in evaluation mode, without autograd."""
        was_training = self.net.training
        self.net.eval()
        try:
            with torch.no_grad():
                return self.forward(correlation)
        finally:
            self.net.train(was_training)

    def predict(self, correlation: CorrelationTensor) -> AffineParams | TpsParams:
        """Parameters for a single correlation tensor."""
        out = self.predict_tensor(correlation)
        if out.shape[0] != 1:
            raise ArgumentError(
                f"predict takes one correlation tensor, got a batch of {out.shape[0]}"
            )
        return tensor_to_params(self.kind, out[0])

    def save(self, path: Path | str, config_digest: str = "") -> Path:
        """Write the weights and the ``<path>.meta`` sidecar."""
        path = Path(path)
        metadata = CheckpointMetadata(
            kind=self.kind,
            grid_h=self.input_grid[0],
            grid_w=self.input_grid[1],
            param_count=self.param_count,
            config_digest=config_digest,
            weights_digest=weights_digest(self.net),
            epochs=len(self.history),
        )
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(self.net.state_dict(), path)
            metadata_path(path).write_text(metadata.to_text(), encoding="utf-8")
        except OSError as e:
            raise ImageIOError(f"Cannot write checkpoint {path}: {e}") from e
        self.metadata = metadata
        return path


def metadata_path(checkpoint: Path | str) -> Path:
    checkpoint = Path(checkpoint)
    return checkpoint.with_name(checkpoint.name + METADATA_SUFFIX)


def init_regressor(
    kind: WarpKind | str, grid: tuple[int, int] = DEFAULT_GRID, seed: int = 0
) -> Regressor:
    """Freshly initialized regressor that predicts the identity transform."""
    kind = WarpKind(kind)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = RegressorNet(kind, grid)
    return Regressor(kind=kind, net=net, input_grid=tuple(grid))


def load_regressor(
    path: Path | str,
    kind: WarpKind | str | None = None,
    grid: tuple[int, int] | None = None,
    device: torch.device | str = "cpu",
) -> Regressor:
    """Load a checkpoint and validate it against its sidecar metadata.

    Raises:
        StateError: If the checkpoint or its metadata is missing, unreadable or
            does not match the requested kind and grid.
    """
    path = Path(path)
    meta = metadata_path(path)
    if not path.is_file() or not meta.is_file():
        raise StateError(
            f"Regressor checkpoint {path} (with {meta.name}) not found; "
            f"train one with 'geostyle train --kind {kind or 'affine'} --out-ckpt {path}'"
        )
    try:
        metadata = CheckpointMetadata.from_text(meta.read_text(encoding="utf-8"))
    except (ValueError, ValidationError) as e:
        raise StateError(f"Invalid checkpoint metadata {meta}: {e}") from e

    if kind is not None and metadata.kind != WarpKind(kind):
        raise StateError(f"Checkpoint {path} holds a {metadata.kind} regressor, expected {kind}")
    saved_grid = (metadata.grid_h, metadata.grid_w)
    if grid is not None and saved_grid != tuple(grid):
        raise StateError(f"Checkpoint {path} expects a {saved_grid} correlation grid, got {grid}")

    net = RegressorNet(metadata.kind, saved_grid)
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    except (OSError, RuntimeError) as e:
        raise StateError(f"Cannot load checkpoint {path}: {e}") from e
    if metadata.weights_digest and weights_digest(net) != metadata.weights_digest:
        raise StateError(f"Checkpoint {path} does not match the weights digest in {meta.name}")

    net.to(device).eval()
    logger.info("Loaded %s regressor from %s (%d epochs)", metadata.kind, path, metadata.epochs)
    return Regressor(
        kind=metadata.kind,
        net=net,
        input_grid=saved_grid,
        trained=True,
        metadata=metadata,
    )


def _analysis_image(img: ImageTensor, extractor: FeatureExtractor) -> ImageTensor:
    size = extractor.analysis_size
    batch = img.unsqueeze(0) if img.dim() == 3 else img  # noqa: PLR2004
    return resize(batch.to(device=extractor.device, dtype=extractor.dtype), size, size)


def correlate_images(
    content: ImageTensor, style: ImageTensor, extractor: FeatureExtractor
) -> CorrelationTensor:
    """Correlation of the geometric features of two images at the analysis resolution."""
    gc = extractor.extract_geometric(_analysis_image(content, extractor))
    gs = extractor.extract_geometric(_analysis_image(style, extractor))
    return correlate(gc, gs)


def prewarp_affine(img: ImageTensor, theta: torch.Tensor) -> ImageTensor:
    """Warp analysis images by a batch of affine parameters on their own canvas."""
    h, w = int(img.shape[-2]), int(img.shape[-1])
    grid = field_from_tensor(WarpKind.AFFINE, theta.to(img.dtype), h, w)
    return warp_image(img, grid, FillPolicy.REPLICATE)


def estimate_warp(
    content: ImageTensor,
    style: ImageTensor,
    affine: Regressor,
    tps: Regressor,
    extractor: FeatureExtractor,
) -> tuple[AffineParams, TpsParams]:
    """Estimate the cascade that maps the style image's geometry onto the content.

    Raises:
        StateError: If a regressor is untrained or of the wrong kind.
    """
    affine_theta = estimate_affine(content, style, affine, extractor)
    _require_trained(tps, WarpKind.TPS)

    content_analysis = _analysis_image(content, extractor)
    style_analysis = _analysis_image(style, extractor)
    prewarped = prewarp_affine(content_analysis, affine_theta)
    correlation = correlate(
        extractor.extract_geometric(prewarped), extractor.extract_geometric(style_analysis)
    )
    tps_params = tps.predict(correlation)
    logger.debug("Estimated TPS offsets %s", tps_params.offsets)
    return tensor_to_params(WarpKind.AFFINE, affine_theta[0]), tps_params


def estimate_affine(
    content: ImageTensor,
    style: ImageTensor,
    affine: Regressor,
    extractor: FeatureExtractor,
) -> torch.Tensor:
    """First cascade stage alone; returns a ``(1, 6)`` parameter tensor."""
    _require_trained(affine, WarpKind.AFFINE)
    theta = affine.predict_tensor(correlate_images(content, style, extractor))
    logger.debug("Estimated affine %s", theta[0].tolist())
    return theta


def _require_trained(regressor: Regressor, kind: WarpKind) -> None:
    if regressor.kind != kind:
        raise StateError(f"Expected a {kind} regressor, got {regressor.kind}")
    if not regressor.trained:
        raise StateError(
            f"The {kind} regressor is untrained; "
            f"load a checkpoint written by 'geostyle train --kind {kind}'"
        )
