"""Job orchestration: transfer, regressor training, evaluation and style bank preparation."""

from __future__ import annotations

import logging
import threading
from collections.abc import Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Self

import torch
from pydantic import BaseModel, Field, model_validator

from geostyle.base import (
    AffineParams,
    BackboneConfig,
    ConfigurationError,
    ExecutorType,
    FillPolicy,
    ImageCorpus,
    ImageIOError,
    ImageTensor,
    PreconditionError,
    StateError,
    TpsParams,
    TrainConfig,
    TransferConfig,
    WarpKind,
    WarpMode,
    image_size,
    load_image,
    resize,
    save_image,
)
from geostyle.features import FeatureExtractor, geometric_grid
from geostyle.geometry import cascade_field, field_from_tensor, params_to_tensor, warp_image
from geostyle.texture import (
    BankJobResult,
    LevelResult,
    LossLog,
    TransferResult,
    multiscale_transfer,
    prepare_style_bank,
)
from geostyle.warp import (
    EvaluationReport,
    Regressor,
    estimate_affine,
    estimate_warp,
    evaluate,
    load_regressor,
    train,
)

logger = logging.getLogger(__name__)

WARPED_CONTENT_NAME = "warped_content.png"
WARP_PARAMS_NAME = "warp.json"
LOSSES_NAME = "losses.csv"


class JobSpec(BaseModel):
    """One transfer job.

    Two-image mode leaves ``geometry_style_path`` unset, so the style image
    supplies both the geometry and the texture.
    """

    content_path: Path
    style_path: Path
    geometry_style_path: Path | None = None
    output_path: Path
    warp_mode: WarpMode = WarpMode.TPS
    affine_checkpoint: Path | None = None
    tps_checkpoint: Path | None = None
    transfer: TransferConfig = Field(default_factory=TransferConfig)
    seed: int = 0
    fill: FillPolicy = FillPolicy.REPLICATE
    emit_intermediates: Path | None = None
    deterministic: bool = True
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)

    @model_validator(mode="after")
    def check_checkpoints(self) -> Self:
        if self.warp_mode != WarpMode.NONE and self.affine_checkpoint is None:
            raise ValueError(f"warp_mode={self.warp_mode} needs an affine checkpoint")
        if self.warp_mode == WarpMode.TPS and self.tps_checkpoint is None:
            raise ValueError("warp_mode=tps needs a TPS checkpoint")
        return self

    @property
    def geometry_source(self) -> Path:
        return self.geometry_style_path or self.style_path


class WarpEstimate(BaseModel):
    """Parameters of the warp applied to the content, written as ``warp.json``."""

    warp_mode: WarpMode
    affine: AffineParams | None = None
    tps: TpsParams | None = None


@dataclass
class PipelineResult:
    output_path: Path
    warp: WarpEstimate
    warped_content: ImageTensor
    transfer: TransferResult


@contextmanager
def deterministic_mode(enabled: bool):
    """Force deterministic torch kernels for the duration of a job."""
    previous = torch.are_deterministic_algorithms_enabled()
    if enabled:
        torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def _checkpoint(path: Path | None, kind: WarpKind) -> Path:
    if path is None:
        raise StateError(f"No {kind} checkpoint given; pass --{kind}-ckpt")
    return path


class TransferPipeline:
    """Runs transfer jobs with a shared feature extractor and cached regressors."""

    def __init__(self, extractor: FeatureExtractor | None = None) -> None:
        self._extractor = extractor
        self._regressors: dict[tuple[Path, WarpKind], Regressor] = {}
        self._lock = threading.Lock()

    def extractor(self, backbone: BackboneConfig) -> FeatureExtractor:
        with self._lock:
            if self._extractor is None:
                self._extractor = FeatureExtractor.from_config(backbone)
            return self._extractor

    def regressor(self, path: Path, kind: WarpKind, extractor: FeatureExtractor) -> Regressor:
        key = (path, kind)
        with self._lock:
            if key not in self._regressors:
                self._regressors[key] = load_regressor(
                    path,
                    kind=kind,
                    grid=geometric_grid(extractor.analysis_size),
                    device=extractor.device,
                )
            return self._regressors[key]

    def estimate(
        self,
        job: JobSpec,
        content: ImageTensor,
        geometry_style: ImageTensor,
        extractor: FeatureExtractor,
    ) -> WarpEstimate:
        """Warp parameters from the content and the geometry style only."""
        if job.warp_mode == WarpMode.NONE:
            return WarpEstimate(warp_mode=job.warp_mode)
        affine_path = _checkpoint(job.affine_checkpoint, WarpKind.AFFINE)
        affine = self.regressor(affine_path, WarpKind.AFFINE, extractor)
        if job.warp_mode == WarpMode.AFFINE:
            theta = estimate_affine(content, geometry_style, affine, extractor)[0]
            params = AffineParams(theta=tuple(theta.tolist()))
            return WarpEstimate(warp_mode=job.warp_mode, affine=params)
        tps_path = _checkpoint(job.tps_checkpoint, WarpKind.TPS)
        tps = self.regressor(tps_path, WarpKind.TPS, extractor)
        affine_params, tps_params = estimate_warp(content, geometry_style, affine, tps, extractor)
        return WarpEstimate(warp_mode=job.warp_mode, affine=affine_params, tps=tps_params)

    def render(
        self, content: ImageTensor, warp: WarpEstimate, height: int, width: int, fill: FillPolicy
    ) -> ImageTensor:
        """Content on a ``height x width`` canvas through the estimated backward field."""
        if warp.affine is None:
            return resize(content, width, height)
        theta = params_to_tensor(warp.affine, dtype=content.dtype)
        if warp.tps is None:
            grid = field_from_tensor(WarpKind.AFFINE, theta, height, width)
        else:
            offsets = params_to_tensor(warp.tps, dtype=content.dtype)
            grid = cascade_field(theta, offsets, height, width)
        return warp_image(content, grid[0], fill)

    def run(self, job: JobSpec) -> PipelineResult:
        """Estimate, render, stylize and save; returns the output and intermediate artifacts."""
        extractor = self.extractor(job.backbone)
        config = job.transfer.model_copy(update={"seed": job.seed})
        torch.manual_seed(job.seed)

        content = load_image(job.content_path)
        style = load_image(job.style_path)
        geometry_style = (
            style if job.geometry_style_path is None else load_image(job.geometry_style_path)
        )
        height, width = image_size(style)
        logger.info(
            "Transfer %s -> %s (geometry from %s, warp=%s, canvas %dx%d)",
            job.content_path,
            job.style_path,
            job.geometry_source,
            job.warp_mode,
            width,
            height,
        )

        with deterministic_mode(job.deterministic):
            warp = self.estimate(job, content, geometry_style, extractor)
            warped = self.render(content, warp, height, width, job.fill)
            emit = _IntermediateWriter(job.emit_intermediates)
            emit.warp(warped, warp)
            loss_log = LossLog(config.loss_log_path)
            result = multiscale_transfer(
                warped, style, config, extractor, loss_log=loss_log, on_level=emit.level
            )

        try:
            job.output_path.parent.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ImageIOError(f"Cannot create output directory for {job.output_path}: {e}") from e
        save_image(result.image, job.output_path)
        if config.loss_log_path is not None:
            emit.losses(loss_log)
        logger.info("Wrote %s", job.output_path)
        return PipelineResult(
            output_path=job.output_path, warp=warp, warped_content=warped, transfer=result
        )


class _IntermediateWriter:
    """Writes ablation artifacts when an intermediates directory is set."""

    def __init__(self, root: Path | None) -> None:
        self.root = root
        if root is not None:
            try:
                root.mkdir(parents=True, exist_ok=True)
            except OSError as e:
                raise ImageIOError(f"Cannot create intermediates directory {root}: {e}") from e

    def warp(self, warped: ImageTensor, estimate: WarpEstimate) -> None:
        if self.root is None:
            return
        save_image(warped, self.root / WARPED_CONTENT_NAME)
        _write_text(self.root / WARP_PARAMS_NAME, estimate.model_dump_json(indent=2))

    def level(self, result: LevelResult) -> None:
        if self.root is not None:
            save_image(result.image, self.root / f"level_{result.level}.png")

    def losses(self, log: LossLog) -> None:
        if self.root is not None:
            _write_text(self.root / LOSSES_NAME, log.to_csv())


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise ImageIOError(f"Cannot write {path}: {e}") from e


def run_transfer(job: JobSpec, extractor: FeatureExtractor | None = None) -> Path:
    """Run one transfer job and return the path of the written image.

    Raises:
        ImageIOError: If an input cannot be read or the output cannot be written.
        StateError: If a required checkpoint is missing.
    """
    return TransferPipeline(extractor).run(job).output_path


def _open_corpus(path: Path | None, image_size: int, max_images: int | None) -> ImageCorpus:
    if path is None:
        raise ConfigurationError("No corpus directory given (corpus_path)")
    return ImageCorpus(path, image_size=image_size, max_images=max_images)


def run_train(
    kind: WarpKind | str,
    config: TrainConfig,
    affine_checkpoint: Path | None = None,
    backbone: BackboneConfig | None = None,
    extractor: FeatureExtractor | None = None,
) -> Path:
    """Train a regressor and return its checkpoint path.

    Raises:
        PreconditionError: For ``kind=tps`` without an affine checkpoint.
    """
    kind = WarpKind(kind)
    if kind == WarpKind.TPS and affine_checkpoint is None:
        raise PreconditionError(
            "TPS training needs a trained affine regressor; pass --affine-ckpt"
        )
    extractor = extractor or FeatureExtractor.from_config(backbone)
    corpus = _open_corpus(config.corpus_path, config.image_size, config.max_images)
    prior = None
    if affine_checkpoint is not None and kind == WarpKind.TPS:
        prior = load_regressor(
            affine_checkpoint,
            kind=WarpKind.AFFINE,
            grid=geometric_grid(extractor.analysis_size),
            device=extractor.device,
        )
    try:
        train(corpus, config, kind, extractor, prior_affine=prior)
    finally:
        corpus.close()
    return config.checkpoint_path


def run_evaluate(  # noqa: PLR0913
    corpus_path: Path,
    affine_checkpoint: Path,
    tps_checkpoint: Path | None = None,
    pairs: int = 50,
    seed: int = 1000,
    image_size: int = 240,
    max_images: int | None = None,
    backbone: BackboneConfig | None = None,
    extractor: FeatureExtractor | None = None,
) -> EvaluationReport:
    """Score trained regressors on seeded synthetic pairs from ``corpus_path``."""
    extractor = extractor or FeatureExtractor.from_config(backbone)
    grid = geometric_grid(extractor.analysis_size)
    device = extractor.device
    affine = load_regressor(affine_checkpoint, kind=WarpKind.AFFINE, grid=grid, device=device)
    tps = None
    if tps_checkpoint is not None:
        tps = load_regressor(tps_checkpoint, kind=WarpKind.TPS, grid=grid, device=device)
    corpus = _open_corpus(corpus_path, image_size, max_images)
    try:
        return evaluate(corpus, affine, extractor, tps=tps, pairs=pairs, seed=seed)
    finally:
        corpus.close()


def run_prepare_bank(  # noqa: PLR0913
    corpus_path: Path,
    style_paths: Sequence[Path],
    out_dir: Path,
    config: TransferConfig | None = None,
    image_size: int = 240,
    max_images: int | None = None,
    max_workers: int = 1,
    executor: ExecutorType = ExecutorType.THREAD,
    backbone: BackboneConfig | None = None,
    extractor: FeatureExtractor | None = None,
) -> list[BankJobResult]:
    """Render the style bank used by ``augment_policy=style_bank``."""
    extractor = extractor or FeatureExtractor.from_config(backbone)
    corpus = _open_corpus(corpus_path, image_size, max_images)
    try:
        return prepare_style_bank(
            corpus,
            style_paths,
            out_dir,
            config or TransferConfig(),
            extractor,
            max_workers=max_workers,
            executor=executor,
        )
    finally:
        corpus.close()
