"""Pixel optimization of the texture loss, single level and coarse-to-fine."""

from __future__ import annotations

import functools
import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import torch

from geostyle.base import (
    ArgumentError,
    ExecutorType,
    ImageCorpus,
    ImageIOError,
    ImageTensor,
    NonFiniteLossError,
    PixelOptimizer,
    TransferConfig,
    center_square,
    gaussian_pyramid,
    image_size,
    load_image,
    resize,
    save_image,
)
from geostyle.features import FeatureExtractor
from geostyle.texture.losses import LossTerms, TransferObjective

logger = logging.getLogger(__name__)

LOSS_LOG_HEADER = "level,iter,total,texture,content"


@dataclass
class LossRecord:
    level: int
    iteration: int
    total: float
    texture: float
    content: float

    def to_line(self) -> str:
        values = (self.total, self.texture, self.content)
        return f"{self.level},{self.iteration}," + ",".join(f"{v:.8g}" for v in values)


class LossLog:
    """Collects per-iteration losses and optionally appends them to a text file."""

    def __init__(self, path: Path | str | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: list[LossRecord] = []

    def add(self, record: LossRecord) -> None:
        self.records.append(record)
        if self.path is None:
            return
        try:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(record.to_line() + "\n")
        except OSError as e:
            raise ImageIOError(f"Cannot write loss log {self.path}: {e}") from e

    def to_csv(self) -> str:
        """All records with a header line."""
        return LOSS_LOG_HEADER + "\n" + "".join(f"{r.to_line()}\n" for r in self.records)


@dataclass
class LevelResult:
    """Outcome of optimizing one pyramid level. ``history`` holds one loss per step."""

    level: int
    image: ImageTensor
    initial_loss: float
    final_loss: float
    history: list[float] = field(default_factory=list)


@dataclass
class TransferResult:
    """Finest-level image plus per-level results, coarsest first."""

    image: ImageTensor
    levels: list[LevelResult] = field(default_factory=list)


def _check_finite(terms: LossTerms, level: int, iteration: int) -> None:
    if not torch.isfinite(terms.total):
        total, texture, content = terms.as_floats()
        raise NonFiniteLossError(
            f"Transfer loss is not finite at level {level} iteration {iteration} "
            f"(total={total}, texture={texture}, content={content})"
        )


def optimize_level(  # noqa: PLR0913
    init: ImageTensor,
    style: ImageTensor,
    content: ImageTensor,
    iters: int,
    config: TransferConfig,
    extractor: FeatureExtractor,
    level: int = 0,
    loss_log: LossLog | None = None,
) -> LevelResult:
    """Run ``iters`` optimizer steps on the pixels of ``init``; returns the final iterate.

    Pixels are clamped to [0, 1] after every step.

    Raises:
        ArgumentError: If the images differ in size or ``iters < 1``.
        NonFiniteLossError: If the loss becomes NaN or infinite.
    """
    if iters < 1:
        raise ArgumentError(f"A level needs at least one iteration, got {iters}")
    if not image_size(init) == image_size(style) == image_size(content):
        raise ArgumentError(
            f"Level images differ in size: init {image_size(init)}, style {image_size(style)}, "
            f"content {image_size(content)}"
        )
    objective = TransferObjective(extractor, style, content, config)
    out = init.detach().clone().to(device=extractor.device, dtype=extractor.dtype)
    out.requires_grad_(True)
    history: list[float] = []

    def record(terms: LossTerms, iteration: int) -> None:
        total, texture, content_term = terms.as_floats()
        history.append(total)
        if loss_log is not None:
            loss_log.add(LossRecord(level, iteration, total, texture, content_term))
        logger.debug("level %d iter %d total %.6g", level, iteration, total)

    if config.optimizer == PixelOptimizer.LBFGS:
        optimizer = torch.optim.LBFGS([out], lr=1.0, max_iter=1)
        for iteration in range(iters):
            evaluated: list[LossTerms] = []

            def closure() -> torch.Tensor:
                optimizer.zero_grad()
                terms = objective(out)
                _check_finite(terms, level, iteration)  # noqa: B023
                terms.total.backward()
                evaluated.append(terms)  # noqa: B023
                return terms.total

            optimizer.step(closure)
            record(evaluated[0], iteration)
            with torch.no_grad():
                out.clamp_(0.0, 1.0)
    else:
        optimizer = torch.optim.Adam([out], lr=config.step_size)
        for iteration in range(iters):
            optimizer.zero_grad()
            terms = objective(out)
            _check_finite(terms, level, iteration)
            terms.total.backward()
            optimizer.step()
            record(terms, iteration)
            with torch.no_grad():
                out.clamp_(0.0, 1.0)

    with torch.no_grad():
        final = objective(out)
    result = LevelResult(
        level=level,
        image=out.detach(),
        initial_loss=history[0],
        final_loss=float(final.total),
        history=history,
    )
    logger.info(
        "Level %d: %d iterations, loss %.6g -> %.6g",
        level,
        iters,
        result.initial_loss,
        result.final_loss,
    )
    return result


def multiscale_transfer(  # noqa: PLR0913
    content_warped: ImageTensor,
    style: ImageTensor,
    config: TransferConfig,
    extractor: FeatureExtractor,
    loss_log: LossLog | None = None,
    on_level: Callable[[LevelResult], None] | None = None,
) -> TransferResult:
    """Coarse-to-fine texture transfer over Gaussian pyramids of both images.

    The coarsest level starts from the warped content itself; every finer
    level starts from the upsampled result of the level below. The output has
    the style image's size.

    Raises:
        ArgumentError: If the images differ in size or are too small for the pyramid.
    """
    if image_size(content_warped) != image_size(style):
        raise ArgumentError(
            f"Warped content {image_size(content_warped)} must match the style canvas "
            f"{image_size(style)}"
        )
    torch.manual_seed(config.seed)
    content_pyramid = gaussian_pyramid(content_warped, config.pyramid_levels)
    style_pyramid = gaussian_pyramid(style, config.pyramid_levels)

    levels: list[LevelResult] = []
    current = content_pyramid.coarsest
    for level in reversed(range(config.pyramid_levels)):
        style_level = style_pyramid.levels[level]
        h, w = image_size(style_level)
        init = resize(current, w, h)
        result = optimize_level(
            init,
            style_level,
            content_pyramid.levels[level],
            config.iterations_for_level(level),
            config,
            extractor,
            level=level,
            loss_log=loss_log,
        )
        levels.append(result)
        if on_level is not None:
            on_level(result)
        current = result.image

    return TransferResult(image=current.clamp(0.0, 1.0), levels=levels)


@dataclass
class BankJobResult:
    """Result of rendering one style bank entry."""

    image_key: str
    style_index: int
    path: Path
    success: bool
    error: str | None = None


def bank_entry_path(out_dir: Path, image_key: str, style_index: int) -> Path:
    return out_dir / f"{image_key}__{style_index}.png"


def _render_bank_entry(
    job: tuple[ImageTensor, str, int, Path],
    styles: Sequence[ImageTensor],
    config: TransferConfig,
    extractor: FeatureExtractor,
) -> BankJobResult:
    img, key, style_index, path = job
    result = multiscale_transfer(img, styles[style_index], config, extractor)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ImageIOError(f"Cannot create style bank directory {path.parent}: {e}") from e
    save_image(result.image, path)
    return BankJobResult(image_key=key, style_index=style_index, path=path, success=True)


def prepare_style_bank(  # noqa: PLR0913
    corpus: ImageCorpus,
    style_paths: Sequence[Path | str],
    out_dir: Path | str,
    config: TransferConfig,
    extractor: FeatureExtractor,
    max_workers: int = 1,
    executor: ExecutorType = ExecutorType.THREAD,
) -> list[BankJobResult]:
    """Render every corpus image in every style without warping.

    Writes ``<image-key>__<style-index>.png`` files to ``out_dir``. Results
    come back in job order; failed jobs are logged and reported, not raised.
    """
    if not style_paths:
        raise ArgumentError("Style bank preparation needs at least one style image")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ImageIOError(f"Cannot create style bank directory {out_dir}: {e}") from e
    size = corpus.image_size
    styles = [center_square(load_image(p), size) for p in style_paths]
    jobs = [
        (i, corpus.key(i), k, bank_entry_path(out_dir, corpus.key(i), k))
        for i in range(len(corpus))
        for k in range(len(styles))
    ]
    render = functools.partial(
        _render_bank_entry, styles=styles, config=config, extractor=extractor
    )

    def failed(job: tuple[int, str, int, Path], e: Exception) -> BankJobResult:
        _, key, k, path = job
        logger.warning("Style bank entry %s failed: %s", path.name, e)
        return BankJobResult(image_key=key, style_index=k, path=path, success=False, error=str(e))

    ordered: list[BankJobResult | None] = [None] * len(jobs)
    if max_workers <= 1 or len(jobs) <= 1:
        for n, job in enumerate(jobs):
            index, key, k, path = job
            try:
                ordered[n] = render((corpus[index], key, k, path))
            except Exception as e:
                ordered[n] = failed(job, e)
        return _summarize(ordered, out_dir)

    executor_class = ProcessPoolExecutor if executor == ExecutorType.PROCESS else ThreadPoolExecutor

    # Parallel execution with ordering preserved
    with executor_class(max_workers=max_workers) as pool:
        future_to_idx = {}
        for n, job in enumerate(jobs):
            index, key, k, path = job
            try:
                future_to_idx[pool.submit(render, (corpus[index], key, k, path))] = n
            except Exception as e:
                ordered[n] = failed(job, e)
        for future in as_completed(future_to_idx):
            n = future_to_idx[future]
            try:
                ordered[n] = future.result()
            except Exception as e:
                ordered[n] = failed(jobs[n], e)
    return _summarize(ordered, out_dir)


def _summarize(ordered: list[BankJobResult | None], out_dir: Path) -> list[BankJobResult]:
    results = [r for r in ordered if r is not None]
    done = sum(r.success for r in results)
    logger.info("Style bank %s: %d of %d entries rendered", out_dir, done, len(results))
    return results
