"""Shared pytest configuration and fixtures."""

import math
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest
import torch
from sybil import Sybil
from sybil.parsers.markdown import PythonCodeBlockParser, SkipParser

from geostyle.base import BackboneConfig, BackboneInitError, save_image
from geostyle.features import FeatureExtractor, load_backbone

# Analysis size giving an 11x11 pool4 grid, the smallest the regressor accepts
SMALL_ANALYSIS_SIZE = 176

# Files created for documentation examples
DOC_IMAGES = {
    "content.png": (96, 128, 1),
    "style.png": (96, 96, 2),
}


def make_test_image(height: int, width: int, seed: int = 0) -> torch.Tensor:
    """Deterministic RGB test pattern: smooth gradients, stripes and a bright disc."""
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    freq = rng.uniform(3, 8, size=3)
    phase = rng.uniform(0, 2 * math.pi, size=3)
    channels = [
        0.5 + 0.25 * np.sin(2 * math.pi * freq[0] * xs + phase[0]) + 0.2 * ys,
        0.5 + 0.25 * np.sin(2 * math.pi * freq[1] * (xs + ys) + phase[1]),
        0.3 + 0.4 * xs * ys + 0.1 * np.cos(2 * math.pi * freq[2] * ys + phase[2]),
    ]
    img = np.stack(channels)
    cy, cx = rng.uniform(0.3, 0.7, size=2)
    disc = (ys - cy) ** 2 + (xs - cx) ** 2 < 0.04
    img[:, disc] = np.array([0.95, 0.85, 0.2])[:, None]
    return torch.from_numpy(np.clip(img, 0.0, 1.0)).float()


def write_test_image(path: Path, height: int, width: int, seed: int = 0) -> Path:
    save_image(make_test_image(height, width, seed), path)
    return path


def _setup_doc_files(namespace):
    """Create the images used by documentation examples."""
    for name, (height, width, seed) in DOC_IMAGES.items():
        if not Path(name).exists():
            write_test_image(Path(name), height, width, seed)


def _teardown_doc_files(namespace):
    """Remove files created for documentation examples."""
    for name in [*DOC_IMAGES, "warped.png"]:
        path = Path(name)
        if path.exists():
            path.unlink()


# Sybil configuration for testing documentation code examples
# Uses SkipParser to allow skipping examples that need pretrained weights or checkpoints
pytest_collect_file = Sybil(
    parsers=[
        PythonCodeBlockParser(),
        SkipParser(),
    ],
    patterns=["*.md"],
    path=str(Path(__file__).parent.parent / "docs"),
    setup=_setup_doc_files,
    teardown=_teardown_doc_files,
).pytest()


@pytest.fixture(scope="session")
def random_backbone():
    """Seeded randomly-initialized VGG-19 trunk; no download needed."""
    return load_backbone(BackboneConfig(pretrained=False, seed=0, device="cpu"))


@pytest.fixture(scope="session")
def extractor(random_backbone) -> FeatureExtractor:
    return FeatureExtractor(random_backbone, analysis_size=SMALL_ANALYSIS_SIZE)


@pytest.fixture(scope="session")
def pretrained_extractor() -> FeatureExtractor:
    """ImageNet VGG-19; skips when the weights cannot be loaded or downloaded."""
    try:
        return FeatureExtractor.from_config(BackboneConfig())
    except BackboneInitError as e:
        pytest.skip(f"Pretrained VGG-19 weights unavailable: {e}")


@pytest.fixture
def image_factory() -> Callable[..., torch.Tensor]:
    return make_test_image


@pytest.fixture
def corpus_dir(tmp_path: Path) -> Path:
    """Directory of six small procedural photos."""
    root = tmp_path / "corpus"
    root.mkdir()
    for i in range(6):
        write_test_image(root / f"photo_{i:02d}.png", 200, 220, seed=100 + i)
    return root
