"""VGG-19 backbone and the three feature families taken from it.

- content features: ``relu4_2`` (post-activation of conv4_2)
- texture features: Gram matrices at ``relu1_1 .. relu5_1``
- geometric features: ``pool4`` output, each spatial position's channel
  vector L2-normalized, computed at a fixed analysis resolution
"""

from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from geostyle.base import (
    ENV_BACKBONE_WEIGHTS,
    ArgumentError,
    BackboneConfig,
    BackboneInitError,
    ImageTensor,
    get_setting,
    image_size,
    normalize_for_backbone,
    resize,
    resolve_device,
)

logger = logging.getLogger(__name__)

# Indices into torchvision's ``vgg19().features``
LAYER_INDEX = {
    "relu1_1": 1,
    "relu2_1": 6,
    "relu3_1": 11,
    "relu4_1": 20,
    "relu4_2": 22,
    "pool4": 27,
    "relu5_1": 29,
}
CONTENT_LAYER = "relu4_2"
TEXTURE_LAYERS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")
GEOMETRIC_LAYER = "pool4"
TEXTURE_CHANNELS = (64, 128, 256, 512, 512)

_backbone_cache: dict[tuple, VggBackbone] = {}
_backbone_lock = threading.Lock()


@dataclass
class ContentFeatures:
    """``(B, N4, H4, W4)`` activations of the content layer."""

    map: torch.Tensor


@dataclass
class GramSet:
    """One ``(B, N_l, N_l)`` Gram matrix per texture layer."""

    grams: list[torch.Tensor]

    @property
    def layer_dims(self) -> list[int]:
        return [int(g.shape[-1]) for g in self.grams]


@dataclass
class GeoFeatureMap:
    """``(B, N, H, W)`` pool4 activations with unit-norm channel vectors."""

    map: torch.Tensor

    @property
    def grid(self) -> tuple[int, int]:
        return int(self.map.shape[-2]), int(self.map.shape[-1])


@dataclass
class FeatureBundle:
    content: ContentFeatures
    texture: GramSet


def weights_digest(module: nn.Module) -> str:
    """SHA-256 over the parameter tensors of ``module`` in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class VggBackbone(nn.Module):
    """Frozen VGG-19 convolutional trunk truncated after ``relu5_1``."""

    def __init__(self, features: nn.Sequential) -> None:
        super().__init__()
        layers = []
        for layer in list(features.children())[: LAYER_INDEX["relu5_1"] + 1]:
            # In-place activations would overwrite the tapped conv outputs
            layers.append(nn.ReLU(inplace=False) if isinstance(layer, nn.ReLU) else layer)
        self.features = nn.Sequential(*layers)
        self.eval()
        for param in self.parameters():
            param.requires_grad_(False)

    def train(self, mode: bool = True) -> VggBackbone:
        # The backbone is never trained; keep it in evaluation mode
        return super().train(False)

    def forward(self, x: torch.Tensor, taps: tuple[str, ...]) -> dict[str, torch.Tensor]:
        """Run the trunk until the deepest requested tap and return the tapped activations."""
        wanted = {LAYER_INDEX[name]: name for name in taps}
        last = max(wanted)
        out: dict[str, torch.Tensor] = {}
        for index, layer in enumerate(self.features):
            x = layer(x)
            if index in wanted:
                out[wanted[index]] = x
            if index == last:
                break
        return out

    def digest(self) -> str:
        return weights_digest(self)


def _check_torchvision_installed() -> None:
    """Check if torchvision is installed, raise ImportError with helpful message if not."""
    try:
        import torchvision  # noqa: F401
    except ImportError as e:
        raise ImportError(
            "torchvision is not installed. Install it with: pip install torchvision"
        ) from e


def load_backbone(config: BackboneConfig | None = None) -> VggBackbone:
    """Build the VGG-19 trunk described by ``config``.

    Weights come from ``config.weights_path`` (or the ``GEOSTYLE_BACKBONE_WEIGHTS``
    environment variable), else from torchvision's published ImageNet weights.
    With ``pretrained=False`` a seeded random network is built instead.

    Raises:
        BackboneInitError: If weights cannot be loaded, the digest does not match or the
            device is unavailable.
    """
    _check_torchvision_installed()
    from torchvision.models import VGG19_Weights, vgg19

    config = config or BackboneConfig()
    device = resolve_device(config.device)

    if not config.pretrained:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            model = vgg19(weights=None)
    else:
        weights_path = config.weights_path or get_setting(ENV_BACKBONE_WEIGHTS)
        try:
            if weights_path:
                model = vgg19(weights=None)
                state = torch.load(Path(weights_path), map_location="cpu", weights_only=True)
                model.load_state_dict(state)
            else:
                model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
        except Exception as e:
            raise BackboneInitError(f"Cannot load VGG-19 weights: {e}") from e

    backbone = VggBackbone(model.features)
    if config.expected_digest is not None:
        actual = backbone.digest()
        if actual != config.expected_digest:
            raise BackboneInitError(
                f"Backbone weights digest {actual} does not match expected {config.expected_digest}"
            )
    try:
        backbone = backbone.to(device)
    except (AssertionError, RuntimeError) as e:
        # CPU-only torch builds assert on CUDA devices
        raise BackboneInitError(f"Cannot move VGG-19 backbone to {device}: {e}") from e
    logger.info("Loaded VGG-19 backbone (pretrained=%s) on %s", config.pretrained, device)
    return backbone


def get_backbone(config: BackboneConfig | None = None) -> VggBackbone:
    """Get or create a cached backbone for ``config``.

    Thread-safe: concurrent callers with the same config share one load.
    """
    config = config or BackboneConfig()
    key = (
        str(config.weights_path),
        config.pretrained,
        config.seed,
        config.device,
        config.expected_digest,
    )
    with _backbone_lock:
        if key not in _backbone_cache:
            _backbone_cache[key] = load_backbone(config)
        return _backbone_cache[key]


def geometric_grid(analysis_size: int) -> tuple[int, int]:
    """Spatial size of the pool4 map for a square input of side ``analysis_size``."""
    side = analysis_size
    for _ in range(4):
        side //= 2
    return side, side


def gram_matrix(fmap: torch.Tensor) -> torch.Tensor:
    """Channel Gram matrix normalized by the number of positions.

    ``D[a, b] = sum_p f_a(p) f_b(p) / (H * W)`` for a ``(N, H, W)`` or ``(B, N, H, W)`` map.
    """
    squeeze = fmap.dim() == 3  # noqa: PLR2004
    if squeeze:
        fmap = fmap.unsqueeze(0)
    b, n, h, w = fmap.shape
    if h * w < 1:
        raise ArgumentError("Gram matrix of an empty feature map")
    flat = fmap.reshape(b, n, h * w)
    gram = flat @ flat.transpose(1, 2) / (h * w)
    return gram[0] if squeeze else gram


class FeatureExtractor:
    """Extract content, texture and geometric features from images.

    Inputs are RGB images in [0, 1]; they are normalized with the ImageNet
    statistics before the forward pass unless ``normalize=False``, in which case
    callers pass backbone-normalized tensors. Composes a frozen
    :class:`VggBackbone` and holds no other state, so one extractor can serve
    concurrent callers.
    """

    def __init__(
        self, backbone: VggBackbone, analysis_size: int = 240, normalize: bool = True
    ) -> None:
        self.backbone = backbone
        self.analysis_size = analysis_size
        self.normalize = normalize

    @classmethod
    def from_config(cls, config: BackboneConfig | None = None) -> FeatureExtractor:
        config = config or BackboneConfig()
        return cls(get_backbone(config), analysis_size=config.analysis_size)

    @property
    def device(self) -> torch.device:
        return next(self.backbone.parameters()).device

    @property
    def dtype(self) -> torch.dtype:
        return next(self.backbone.parameters()).dtype

    def _run(self, img: ImageTensor, taps: tuple[str, ...]) -> dict[str, torch.Tensor]:
        batch = img.unsqueeze(0) if img.dim() == 3 else img  # noqa: PLR2004
        batch = batch.to(device=self.device, dtype=self.dtype)
        if self.normalize:
            batch = normalize_for_backbone(batch)
        return self.backbone(batch, taps)

    def extract_content(self, img: ImageTensor) -> ContentFeatures:
        return ContentFeatures(map=self._run(img, (CONTENT_LAYER,))[CONTENT_LAYER])

    def extract_texture(self, img: ImageTensor) -> GramSet:
        taps = self._run(img, TEXTURE_LAYERS)
        return GramSet(grams=[gram_matrix(taps[name]) for name in TEXTURE_LAYERS])

    def extract_all(self, img: ImageTensor) -> FeatureBundle:
        """Content and texture features from a single forward pass."""
        taps = self._run(img, (*TEXTURE_LAYERS, CONTENT_LAYER))
        return FeatureBundle(
            content=ContentFeatures(map=taps[CONTENT_LAYER]),
            texture=GramSet(grams=[gram_matrix(taps[name]) for name in TEXTURE_LAYERS]),
        )

    def extract_geometric(self, img: ImageTensor) -> GeoFeatureMap:
        """pool4 features at the analysis resolution with unit-norm channel vectors.

        Inputs of any other size are resized to ``analysis_size`` first.
        All-zero positions stay zero.
        """
        if image_size(img) != (self.analysis_size, self.analysis_size):
            img = resize(img, self.analysis_size, self.analysis_size)
        pooled = self._run(img, (GEOMETRIC_LAYER,))[GEOMETRIC_LAYER]
        return GeoFeatureMap(map=F.normalize(pooled, p=2.0, dim=1))
