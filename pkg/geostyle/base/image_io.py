"""Image loading, saving, resampling and pyramid construction.

Images are float32 torch tensors shaped ``(3, H, W)`` (or batched ``(B, 3, H, W)``),
RGB, values in [0, 1] until they are normalized for the backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from geostyle.base.errors import ArgumentError, ImageFormatError, ImageIOError

ImageTensor = torch.Tensor

# Published ImageNet statistics of the torchvision VGG-19 pretraining
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

MIN_PIPELINE_SIZE = 32
SUPPORTED_SUFFIXES = (".png", ".jpg", ".jpeg")

_BINOMIAL_5 = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0])
_GAUSS_KERNEL = torch.outer(_BINOMIAL_5, _BINOMIAL_5) / 256.0


@dataclass
class Pyramid:
    """Gaussian pyramid; ``levels[0]`` is the original image, coarsest last."""

    levels: list[ImageTensor]

    @property
    def level_count(self) -> int:
        return len(self.levels)

    @property
    def coarsest(self) -> ImageTensor:
        return self.levels[-1]


def _batched(img: ImageTensor) -> tuple[ImageTensor, bool]:
    if img.dim() == 3:  # noqa: PLR2004
        return img.unsqueeze(0), True
    if img.dim() == 4:  # noqa: PLR2004
        return img, False
    raise ArgumentError(f"Expected a (3,H,W) or (B,3,H,W) image, got shape {tuple(img.shape)}")


def image_size(img: ImageTensor) -> tuple[int, int]:
    """Return ``(height, width)`` of a single or batched image."""
    return int(img.shape[-2]), int(img.shape[-1])


def pil_to_tensor(image: Image.Image) -> ImageTensor:
    """Convert a PIL image to a ``(3, H, W)`` float tensor in [0, 1]."""
    if image.mode != "RGB":
        image = image.convert("RGB")
    arr = np.asarray(image, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def tensor_to_pil(img: ImageTensor) -> Image.Image:
    """Convert a ``(3, H, W)`` tensor to an 8-bit RGB PIL image, clamping to [0, 1]."""
    single, _ = _batched(img.detach())
    if single.shape[0] != 1:
        raise ArgumentError("Cannot convert a batch of images to a single PIL image")
    arr = single[0].clamp(0.0, 1.0).permute(1, 2, 0).cpu().double().numpy()
    return Image.fromarray(np.floor(arr * 255.0 + 0.5).astype(np.uint8))


def load_image(path: Path | str) -> ImageTensor:
    """Load a PNG or JPEG file as an RGB ``(3, H, W)`` tensor scaled to [0, 1].

    Raises:
        ImageIOError: If the file does not exist or cannot be read.
        ImageFormatError: If the file does not decode as an image.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"Image not found: {path}")
    try:
        with Image.open(path) as image:
            return pil_to_tensor(image)
    except UnidentifiedImageError as e:
        raise ImageFormatError(f"Cannot decode image {path}: {e}") from e
    except OSError as e:
        raise ImageIOError(f"Cannot read image {path}: {e}") from e


def save_image(img: ImageTensor, path: Path | str) -> None:
    """Clamp to [0, 1] and write an 8-bit PNG regardless of the path suffix."""
    path = Path(path)
    try:
        tensor_to_pil(img).save(path, format="PNG")
    except OSError as e:
        raise ImageIOError(f"Cannot write image {path}: {e}") from e


def _channel_stats(img: ImageTensor) -> tuple[torch.Tensor, torch.Tensor]:
    shape = (3, 1, 1) if img.dim() == 3 else (1, 3, 1, 1)  # noqa: PLR2004
    mean = torch.tensor(IMAGENET_MEAN, dtype=img.dtype, device=img.device).view(shape)
    std = torch.tensor(IMAGENET_STD, dtype=img.dtype, device=img.device).view(shape)
    return mean, std


def normalize_for_backbone(img: ImageTensor) -> ImageTensor:
    """Subtract the ImageNet channel means and divide by the channel deviations."""
    mean, std = _channel_stats(img)
    return (img - mean) / std


def denormalize(img: ImageTensor) -> ImageTensor:
    """Inverse of :func:`normalize_for_backbone`."""
    mean, std = _channel_stats(img)
    return img * std + mean


def resize(img: ImageTensor, width: int, height: int) -> ImageTensor:
    """Bilinear resampling to ``width x height`` with half-pixel-center alignment."""
    if width < 1 or height < 1:
        raise ArgumentError(f"Target size must be positive, got {width}x{height}")
    if image_size(img) == (height, width):
        return img
    batch, squeeze = _batched(img)
    out = F.interpolate(batch, size=(height, width), mode="bilinear", align_corners=False)
    return out[0] if squeeze else out


def center_square(img: ImageTensor, size: int) -> ImageTensor:
    """Crop the central square of ``img`` and resize it to ``size x size``."""
    h, w = image_size(img)
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return resize(img[..., top : top + side, left : left + side], size, size)


def gaussian_blur(img: ImageTensor) -> ImageTensor:
    """5x5 binomial blur with reflect padding; preserves constant images exactly."""
    batch, squeeze = _batched(img)
    channels = batch.shape[1]
    kernel = _GAUSS_KERNEL.to(dtype=batch.dtype, device=batch.device)
    kernel = kernel.expand(channels, 1, 5, 5)
    out = F.conv2d(F.pad(batch, (2, 2, 2, 2), mode="reflect"), kernel, groups=channels)
    return out[0] if squeeze else out


def pyramid_sizes(height: int, width: int, levels: int) -> list[tuple[int, int]]:
    """Level dimensions of a pyramid: each level halves the previous one, rounding up."""
    sizes = [(height, width)]
    for _ in range(1, levels):
        h, w = sizes[-1]
        sizes.append((math.ceil(h / 2), math.ceil(w / 2)))
    return sizes


def gaussian_pyramid(img: ImageTensor, levels: int) -> Pyramid:
    """Blur-and-decimate pyramid with ``levels`` levels.

    Raises:
        ArgumentError: If ``levels < 1`` or the coarsest level would be smaller than 32 px.
    """
    if levels < 1:
        raise ArgumentError(f"A pyramid needs at least one level, got {levels}")
    h, w = image_size(img)
    coarse_h, coarse_w = pyramid_sizes(h, w, levels)[-1]
    if min(coarse_h, coarse_w) < MIN_PIPELINE_SIZE:
        raise ArgumentError(
            f"A {levels}-level pyramid of a {w}x{h} image has a {coarse_w}x{coarse_h} "
            f"coarsest level; at least {MIN_PIPELINE_SIZE} px per side is required"
        )
    result = [img]
    for _ in range(1, levels):
        result.append(gaussian_blur(result[-1])[..., ::2, ::2])
    return Pyramid(levels=result)
