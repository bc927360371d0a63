"""Directory-of-photos corpus used for warp training and style bank preparation."""

from __future__ import annotations

import logging
import threading
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import Dataset

from geostyle.base.errors import ArgumentError, ImageIOError
from geostyle.base.image_io import SUPPORTED_SUFFIXES, ImageTensor, center_square, load_image

logger = logging.getLogger(__name__)


class ImageCorpus(Dataset[ImageTensor]):
    """Loads and manages the photos of a corpus directory.

    Every image is center-cropped to a square and resized to ``image_size``.
    Images are only decoded when requested via ``[index]`` and, with ``cache=True``,
    kept for subsequent access. Files on disk are never modified.
    """

    def __init__(
        self,
        root: Path | str,
        image_size: int = 240,
        max_images: int | None = None,
        cache: bool = True,
    ) -> None:
        """Initialize the corpus.

        Args:
            root: Directory scanned recursively for PNG/JPEG files.
            image_size: Side of the square training images.
            max_images: Keep only the first ``max_images`` files (sorted by path).
            cache: Keep decoded images in memory.

        Raises:
            ImageIOError: If ``root`` is not a directory.
            ArgumentError: If the directory holds no supported images.
        """
        self.root = Path(root)
        if not self.root.is_dir():
            raise ImageIOError(f"Corpus directory not found: {self.root}")
        self.image_size = image_size
        self.cache = cache

        paths = sorted(
            p
            for p in self.root.rglob("*")
            if p.is_file() and p.suffix.lower() in SUPPORTED_SUFFIXES
        )
        if max_images is not None:
            paths = paths[:max_images]
        if not paths:
            raise ArgumentError(f"Corpus {self.root} contains no PNG/JPEG images")
        self.paths = paths

        self._image_cache: dict[int, ImageTensor] = {}
        self._lock = threading.Lock()
        logger.info("Corpus %s: %d images at %dpx", self.root, len(paths), image_size)

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, index: int) -> ImageTensor:
        """Get a training-resolution image (lazy loaded and cached).

        Thread-safe: uses internal lock for parallel access.
        """
        if not 0 <= index < len(self.paths):
            raise IndexError(f"Image {index} out of range (have {len(self.paths)} images)")
        with self._lock:
            if index in self._image_cache:
                return self._image_cache[index]
        img = center_square(load_image(self.paths[index]), self.image_size)
        if self.cache:
            with self._lock:
                self._image_cache[index] = img
        return img

    def key(self, index: int) -> str:
        """Stable identifier of an image, used to look up style bank renditions.

        The path relative to the corpus root without its suffix, so photos with
        the same name in different subdirectories stay distinct.
        """
        return self.paths[index].relative_to(self.root).with_suffix("").as_posix()

    def split(self, validation_fraction: float, seed: int) -> tuple[list[int], list[int]]:
        """Seeded split into ``(train_indices, validation_indices)``.

        With at least two images the validation part keeps at least one image
        whenever ``validation_fraction > 0``.
        """
        order = np.random.default_rng(seed).permutation(len(self.paths)).tolist()
        n_val = int(round(len(order) * validation_fraction))
        if validation_fraction > 0 and len(order) > 1:
            n_val = min(max(n_val, 1), len(order) - 1)
        return sorted(order[n_val:]), sorted(order[:n_val])

    def stack(self, indices: list[int]) -> torch.Tensor:
        """Batch of images ``(len(indices), 3, S, S)``."""
        return torch.stack([self[i] for i in indices])

    def close(self) -> None:
        """Release cached images."""
        with self._lock:
            self._image_cache = {}
