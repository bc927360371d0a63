from __future__ import annotations

import hashlib
import logging
from enum import StrEnum
from pathlib import Path
from typing import Self

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

AFFINE_PARAM_COUNT = 6
TPS_PARAM_COUNT = 18
TEXTURE_LAYER_COUNT = 5
CHECKPOINT_FORMAT_VERSION = 1

# Determinant magnitude below which an affine map is reported as degenerate
DEGENERATE_DETERMINANT = 1e-8


class WarpKind(StrEnum):
    """Parametric transform families the regressors can emit."""

    AFFINE = "affine"
    TPS = "tps"

    @property
    def param_count(self) -> int:
        return AFFINE_PARAM_COUNT if self is WarpKind.AFFINE else TPS_PARAM_COUNT


class WarpMode(StrEnum):
    """How much of the warp cascade a transfer job runs."""

    NONE = "none"
    AFFINE = "affine"
    TPS = "tps"  # affine pre-stage followed by TPS refinement


class FillPolicy(StrEnum):
    """How a warp resolves source coordinates outside the image."""

    REPLICATE = "replicate"
    ZEROS = "zeros"
    REFLECT = "reflect"


class AugmentPolicy(StrEnum):
    """Texture augmentation applied to the warped half of a training pair."""

    NONE = "none"
    JITTER = "jitter"
    STYLE_BANK = "style_bank"


class PixelOptimizer(StrEnum):
    ADAM = "adam"
    LBFGS = "lbfgs"


class ExecutorType(StrEnum):
    """Type of executor for parallel jobs."""

    THREAD = "thread"
    PROCESS = "process"


class AffineParams(BaseModel):
    """Affine map on normalized coordinates: ``[a11, a12, tx, a21, a22, ty]``."""

    model_config = ConfigDict(frozen=True)

    theta: tuple[float, float, float, float, float, float] = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)

    @field_validator("theta")
    @classmethod
    def warn_degenerate(
        cls, v: tuple[float, float, float, float, float, float]
    ) -> tuple[float, float, float, float, float, float]:
        det = v[0] * v[4] - v[1] * v[3]
        if abs(det) < DEGENERATE_DETERMINANT:
            logger.warning("Affine parameters are not invertible (determinant %.3g)", det)
        return v

    @property
    def kind(self) -> WarpKind:
        return WarpKind.AFFINE

    @property
    def determinant(self) -> float:
        a11, a12, _, a21, a22, _ = self.theta
        return a11 * a22 - a12 * a21

    @classmethod
    def identity(cls) -> AffineParams:
        return cls()

    def values(self) -> list[float]:
        return list(self.theta)


class TpsParams(BaseModel):
    """Displacements ``(dx, dy)`` of the 3x3 control grid, control points row-major."""

    model_config = ConfigDict(frozen=True)

    offsets: tuple[float, ...] = (0.0,) * TPS_PARAM_COUNT

    @field_validator("offsets")
    @classmethod
    def validate_offsets(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if len(v) != TPS_PARAM_COUNT:
            raise ValueError(f"TPS needs {TPS_PARAM_COUNT} offsets, got {len(v)}")
        return v

    @property
    def kind(self) -> WarpKind:
        return WarpKind.TPS

    @classmethod
    def identity(cls) -> TpsParams:
        return cls()

    def values(self) -> list[float]:
        return list(self.offsets)


WarpParams = AffineParams | TpsParams


class BackboneConfig(BaseModel):
    """Where the VGG-19 weights come from and where the network runs."""

    weights_path: Path | None = None  # None downloads the torchvision ImageNet weights
    pretrained: bool = True  # False builds a seeded random network (tests)
    expected_digest: str | None = None
    device: str | None = None  # None reads GEOSTYLE_DEVICE, then falls back to cpu
    analysis_size: int = Field(240, ge=32)
    seed: int = 0


class TransferConfig(BaseModel):
    """Texture transfer settings. ``iterations_per_level`` lists the finest level first."""

    layer_weights: list[float] = Field(default_factory=lambda: [0.2] * TEXTURE_LAYER_COUNT)
    alpha_over_beta: float = Field(5e-3, gt=0)
    pyramid_levels: int = Field(3, ge=1)
    iterations_per_level: list[int] = Field(default_factory=lambda: [100, 200, 300])
    optimizer: PixelOptimizer = PixelOptimizer.ADAM
    step_size: float = Field(0.02, gt=0)
    seed: int = 0
    loss_log_path: Path | None = None

    @field_validator("layer_weights")
    @classmethod
    def validate_layer_weights(cls, v: list[float]) -> list[float]:
        if len(v) != TEXTURE_LAYER_COUNT:
            raise ValueError(f"Expected {TEXTURE_LAYER_COUNT} layer weights, got {len(v)}")
        if any(w < 0 for w in v) or sum(v) <= 0:
            raise ValueError("Layer weights must be non-negative with a positive sum")
        return v

    @field_validator("iterations_per_level")
    @classmethod
    def validate_iterations(cls, v: list[int]) -> list[int]:
        if not v or any(n < 1 for n in v):
            raise ValueError("Every pyramid level needs at least one iteration")
        return v

    def iterations_for_level(self, level: int) -> int:
        """Iterations for pyramid level ``level`` (0 = finest); the last entry repeats."""
        return self.iterations_per_level[min(level, len(self.iterations_per_level) - 1)]


class JitterConfig(BaseModel):
    """Ranges of the photometric jitter used as cheap texture augmentation."""

    color_shift: float = Field(0.15, ge=0)
    contrast_range: tuple[float, float] = (0.7, 1.3)
    noise_sigma: float = Field(0.05, ge=0)  # upper bound; each image draws its own level

    @field_validator("contrast_range")
    @classmethod
    def validate_contrast(cls, v: tuple[float, float]) -> tuple[float, float]:
        if v[0] <= 0 or v[0] > v[1]:
            raise ValueError(f"Invalid contrast range {v}")
        return v


class AffineRanges(BaseModel):
    """Sampling intervals of the synthetic affine warps."""

    translation: float = Field(0.25, ge=0)
    rotation_degrees: float = Field(30.0, ge=0)
    scale: tuple[float, float] = (0.75, 1.25)
    shear: float = Field(0.15, ge=0)


class TpsRanges(BaseModel):
    """Sampling interval of the synthetic TPS control-point offsets."""

    offset: float = Field(0.4, ge=0)


class TrainConfig(BaseModel):
    """Warp regressor training settings."""

    batch_size: int = Field(8, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    image_size: int = Field(240, ge=32)
    grid_size: int = Field(20, ge=2)
    epochs: int = Field(3, ge=1)
    corpus_path: Path | None = None
    max_images: int | None = Field(None, ge=1)
    augment_policy: AugmentPolicy = AugmentPolicy.JITTER
    style_bank_path: Path | None = None
    checkpoint_path: Path = Path("regressor.pt")
    log_path: Path | None = None
    validation_fraction: float = Field(0.1, ge=0, lt=1)
    num_workers: int = Field(0, ge=0)
    deterministic: bool = True
    seed: int = 0
    jitter: JitterConfig = Field(default_factory=JitterConfig)
    affine_ranges: AffineRanges = Field(default_factory=AffineRanges)
    tps_ranges: TpsRanges = Field(default_factory=TpsRanges)

    @model_validator(mode="after")
    def check_style_bank(self) -> Self:
        if self.augment_policy == AugmentPolicy.STYLE_BANK and self.style_bank_path is None:
            raise ValueError("augment_policy=style_bank needs style_bank_path")
        return self

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form, stored next to checkpoints."""
        payload = self.model_dump_json(exclude={"log_path", "checkpoint_path", "num_workers"})
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class CheckpointMetadata(BaseModel):
    """Sidecar metadata written next to every regressor checkpoint."""

    format_version: int = CHECKPOINT_FORMAT_VERSION
    kind: WarpKind
    grid_h: int
    grid_w: int
    param_count: int
    config_digest: str = ""
    weights_digest: str = ""
    epochs: int = 0

    @model_validator(mode="after")
    def check_param_count(self) -> Self:
        if self.param_count != self.kind.param_count:
            raise ValueError(
                f"{self.kind} regressor emits {self.kind.param_count} values, "
                f"metadata says {self.param_count}"
            )
        return self

    def to_text(self) -> str:
        """Render as ``key = value`` lines."""
        return "".join(f"{key} = {value}\n" for key, value in self.model_dump(mode="json").items())

    @classmethod
    def from_text(cls, text: str) -> CheckpointMetadata:
        values: dict[str, str] = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"Malformed metadata line: {raw!r}")
            values[key.strip()] = value.strip()
        return cls.model_validate(values)
