"""Self-supervised training of warp regressors on synthetic warps.

Every training pair starts from a corpus photo ``A``. A transform ``T`` is
sampled and ``B(x) = A(T(x))`` is rendered by backward warping, optionally
followed by texture augmentation. The regressor sees the correlation of ``A``
(content role) against ``B`` (style role) and is penalized by how far its
prediction moves a uniform grid away from where ``T`` moves it.
"""

from __future__ import annotations

import copy
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from geostyle.base import (
    AffineRanges,
    ArgumentError,
    AugmentPolicy,
    ConfigurationError,
    FillPolicy,
    ImageCorpus,
    ImageIOError,
    ImageTensor,
    JitterConfig,
    NonFiniteLossError,
    PreconditionError,
    StateError,
    TpsRanges,
    TrainConfig,
    WarpKind,
    WarpParams,
    center_square,
    image_size,
    load_image,
    resize,
)
from geostyle.features import FeatureExtractor, correlate, geometric_grid
from geostyle.geometry import (
    SampleGrid,
    affine_apply,
    apply_transform,
    cascade_apply,
    field_from_tensor,
    identity_tensor,
    params_to_tensor,
    tensor_to_params,
    uniform_grid,
    warp_image,
)
from geostyle.warp.regressor import (
    Regressor,
    init_regressor,
    prewarp_affine,
)

logger = logging.getLogger(__name__)

# A sampled warp is kept only if this share of the grid lands inside the margin box
MIN_IN_FRAME_FRACTION = 0.6
FRAME_MARGIN = 1.3
MAX_REJECTIONS = 100
LAST_CHECKPOINT_SUFFIX = ".last"


class TransformSampler:
    """Seeded source of synthetic warps.

    Draw ``index`` is a pure function of ``(seed, index)``, so data order and
    worker count never change the transforms.
    """

    def __init__(
        self,
        kind: WarpKind | str,
        seed: int = 0,
        affine_ranges: AffineRanges | None = None,
        tps_ranges: TpsRanges | None = None,
    ) -> None:
        self.kind = WarpKind(kind)
        self.seed = seed
        self.affine_ranges = affine_ranges or AffineRanges()
        self.tps_ranges = tps_ranges or TpsRanges()
        self._check_grid = uniform_grid(20, dtype=torch.float64)

    def _draw_affine(self, rng: np.random.Generator) -> np.ndarray:
        r = self.affine_ranges
        tx, ty = rng.uniform(-r.translation, r.translation, size=2)
        angle = math.radians(rng.uniform(-r.rotation_degrees, r.rotation_degrees))
        sx, sy = rng.uniform(r.scale[0], r.scale[1], size=2)
        shear = rng.uniform(-r.shear, r.shear)
        cos, sin = math.cos(angle), math.sin(angle)
        rotation = np.array([[cos, -sin], [sin, cos]])
        linear = rotation @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag([sx, sy])
        return np.array([linear[0, 0], linear[0, 1], tx, linear[1, 0], linear[1, 1], ty])

    def _draw_tps(self, rng: np.random.Generator) -> np.ndarray:
        limit = self.tps_ranges.offset
        return rng.uniform(-limit, limit, size=self.kind.param_count)

    def in_frame_fraction(self, theta: torch.Tensor) -> float:
        moved = apply_transform(self.kind, theta.to(torch.float64), self._check_grid)
        inside = (moved.abs() <= FRAME_MARGIN).all(dim=-1)
        return float(inside.double().mean())

    def sample_tensor(self, index: int = 0) -> torch.Tensor:
        """Parameters of draw ``index`` as a float32 ``(p,)`` tensor.

        Raises:
            ConfigurationError: If 100 consecutive draws leave too little of the image in frame.
        """
        rng = np.random.default_rng([self.seed, index])
        draw = self._draw_affine if self.kind == WarpKind.AFFINE else self._draw_tps
        for _ in range(MAX_REJECTIONS):
            theta = torch.from_numpy(draw(rng))
            if self.in_frame_fraction(theta) >= MIN_IN_FRAME_FRACTION:
                return theta.float()
        raise ConfigurationError(
            f"{MAX_REJECTIONS} consecutive {self.kind} draws kept less than "
            f"{MIN_IN_FRAME_FRACTION:.0%} of the grid in frame; narrow the sampling ranges"
        )

    def sample(self, index: int = 0) -> WarpParams:
        return tensor_to_params(self.kind, self.sample_tensor(index))


def sample_transform(sampler: TransformSampler, index: int = 0) -> WarpParams:
    """Draw ``index`` of ``sampler`` as a parameter model."""
    return sampler.sample(index)


class StyleBank:
    """Precomputed stylized renditions of corpus images, stored as ``<key>__<k>.png``.

    Keys with subdirectories map to the same subdirectories of the bank.
    """

    def __init__(self, root: Path | str, image_size: int = 240) -> None:
        self.root = Path(root)
        if not self.root.is_dir():
            raise StateError(
                f"Style bank {self.root} not found; build it with 'geostyle prepare-bank'"
            )
        self.image_size = image_size
        self._entries: dict[str, list[Path]] = {}
        for path in sorted(self.root.rglob("*__*.png")):
            stem, _, _ = path.stem.rpartition("__")
            key = (path.parent.relative_to(self.root) / stem).as_posix()
            self._entries.setdefault(key, []).append(path)
        if not self._entries:
            raise StateError(
                f"Style bank {self.root} is empty; build it with 'geostyle prepare-bank'"
            )

    def __len__(self) -> int:
        return sum(len(paths) for paths in self._entries.values())

    def renditions(self, key: str) -> list[Path]:
        return self._entries.get(key, [])

    def rendition(self, key: str, generator: torch.Generator | None = None) -> ImageTensor:
        """A random stylized rendition of the corpus image ``key``.

        Raises:
            StateError: If the bank holds no rendition of ``key``.
        """
        paths = self.renditions(key)
        if not paths:
            raise StateError(f"Style bank {self.root} has no rendition of '{key}'")
        pick = int(torch.randint(len(paths), (1,), generator=generator))
        return center_square(load_image(paths[pick]), self.image_size)


def jitter_image(
    img: ImageTensor, jitter: JitterConfig, generator: torch.Generator | None = None
) -> ImageTensor:
    """Random per-channel shift, global contrast scale and Gaussian noise, clamped to [0, 1].

    The noise level of each image is drawn from ``[0, noise_sigma]``.
    """
    batched = img.dim() != 3  # noqa: PLR2004
    channel_shape = (img.shape[0], 3, 1, 1) if batched else (3, 1, 1)
    image_shape = (img.shape[0], 1, 1, 1) if batched else (1, 1, 1)
    shift = (torch.rand(channel_shape, generator=generator) * 2 - 1) * jitter.color_shift
    low, high = jitter.contrast_range
    contrast = low + torch.rand((), generator=generator) * (high - low)
    sigma = torch.rand(image_shape, generator=generator) * jitter.noise_sigma
    noise = torch.randn(img.shape, generator=generator) * sigma
    mean = img.mean(dim=(-3, -2, -1), keepdim=True)
    out = (img - mean) * contrast.to(img) + mean + shift.to(img) + noise.to(img)
    return out.clamp(0.0, 1.0)


def texture_augment(  # noqa: PLR0913
    img: ImageTensor,
    policy: AugmentPolicy | str,
    generator: torch.Generator | None = None,
    jitter: JitterConfig | None = None,
    bank: StyleBank | None = None,
    key: str | None = None,
) -> ImageTensor:
    """Change the texture of ``img`` while keeping its geometry.

    Raises:
        StateError: If ``style_bank`` is requested without a bank or key.
    """
    policy = AugmentPolicy(policy)
    if policy == AugmentPolicy.NONE:
        return img
    if policy == AugmentPolicy.JITTER:
        return jitter_image(img, jitter or JitterConfig(), generator)
    if bank is None or key is None:
        raise StateError("style_bank augmentation needs a prepared style bank")
    return bank.rendition(key, generator).to(img)


@dataclass
class TrainingPair:
    """``image_b`` is ``image_a`` warped by ``truth`` and then texture-augmented."""

    image_a: ImageTensor
    image_b: ImageTensor
    kind: WarpKind
    truth_tensor: torch.Tensor

    @property
    def truth(self) -> WarpParams:
        return tensor_to_params(self.kind, self.truth_tensor)


def make_training_pair(  # noqa: PLR0913
    img: ImageTensor,
    sampler: TransformSampler,
    policy: AugmentPolicy | str = AugmentPolicy.NONE,
    index: int = 0,
    jitter: JitterConfig | None = None,
    bank: StyleBank | None = None,
    key: str | None = None,
    truth: WarpParams | None = None,
) -> TrainingPair:
    """Build pair ``index``; ``truth`` overrides the sampled transform.

    A style-bank rendition replaces the photo before warping; jitter is
    applied to the warped image.
    """
    policy = AugmentPolicy(policy)
    theta = params_to_tensor(truth) if truth is not None else sampler.sample_tensor(index)
    kind = truth.kind if truth is not None else sampler.kind
    generator = torch.Generator().manual_seed(sampler.seed * 1_000_003 + index)

    source = img
    if policy == AugmentPolicy.STYLE_BANK:
        source = texture_augment(img, policy, generator, bank=bank, key=key)
    h, w = image_size(img)
    grid = field_from_tensor(kind, theta.to(img.dtype), h, w)
    warped = warp_image(source, grid, FillPolicy.REPLICATE)
    if policy == AugmentPolicy.JITTER:
        warped = texture_augment(warped, policy, generator, jitter=jitter)
    return TrainingPair(image_a=img, image_b=warped, kind=kind, truth_tensor=theta)


def _as_tensor(params: WarpParams | torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(params, torch.Tensor):
        return params.to(dtype)
    return params_to_tensor(params, dtype=dtype)


def grid_loss(
    pred: WarpParams | torch.Tensor,
    truth: WarpParams | torch.Tensor,
    grid: SampleGrid | None = None,
    kind: WarpKind | None = None,
) -> torch.Tensor:
    """Mean squared distance between the grid points moved by ``pred`` and by ``truth``.

    Parameter models carry their kind; raw tensors need ``kind``. Batched
    tensors average over the batch as well.
    """
    if kind is None:
        if isinstance(pred, torch.Tensor):
            raise ArgumentError("grid_loss on raw tensors needs the transform kind")
        kind = pred.kind
    if grid is None:
        grid = uniform_grid(20, dtype=torch.float64)
    pred_t = _as_tensor(pred, grid.dtype)
    truth_t = _as_tensor(truth, grid.dtype)
    return point_loss(apply_transform(kind, pred_t, grid), apply_transform(kind, truth_t, grid))


def point_loss(moved_pred: torch.Tensor, moved_truth: torch.Tensor) -> torch.Tensor:
    return (moved_pred - moved_truth).square().sum(dim=-1).mean()


def grid_distance(moved_pred: torch.Tensor, moved_truth: torch.Tensor) -> torch.Tensor:
    """Per-sample mean Euclidean distance between two moved grids ``(B, N, 2)``."""
    return (moved_pred - moved_truth).norm(dim=-1).mean(dim=-1)


class PairDataset(Dataset[tuple[ImageTensor, ImageTensor, torch.Tensor]]):
    """Synthetic pairs over a subset of the corpus; each epoch draws fresh warps."""

    def __init__(  # noqa: PLR0913
        self,
        corpus: ImageCorpus,
        indices: list[int],
        sampler: TransformSampler,
        policy: AugmentPolicy = AugmentPolicy.NONE,
        jitter: JitterConfig | None = None,
        bank: StyleBank | None = None,
    ) -> None:
        self.corpus = corpus
        self.indices = indices
        self.sampler = sampler
        self.policy = policy
        self.jitter = jitter
        self.bank = bank
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, position: int) -> tuple[ImageTensor, ImageTensor, torch.Tensor]:
        image_index = self.indices[position]
        pair = make_training_pair(
            self.corpus[image_index],
            self.sampler,
            self.policy,
            index=self.epoch * len(self.corpus) + image_index,
            jitter=self.jitter,
            bank=self.bank,
            key=self.corpus.key(image_index),
        )
        return pair.image_a, pair.image_b, pair.truth_tensor


@contextmanager
def _deterministic(enabled: bool):
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled or previous, warn_only=True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


class _StepRunner:
    """Forward pass and loss of one batch, shared by training, validation and evaluation."""

    def __init__(
        self,
        regressor: Regressor,
        extractor: FeatureExtractor,
        prior_affine: Regressor | None,
        grid: SampleGrid,
    ) -> None:
        self.regressor = regressor
        self.extractor = extractor
        self.prior_affine = prior_affine
        self.grid = grid

    def _analysis(self, img: ImageTensor) -> ImageTensor:
        size = self.extractor.analysis_size
        return resize(img.to(self.extractor.device, self.extractor.dtype), size, size)

    def predict(
        self, image_a: ImageTensor, image_b: ImageTensor
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Prediction for a batch, plus the prior affine parameters in the TPS stage."""
        a = self._analysis(image_a)
        b = self._analysis(image_b)
        with torch.no_grad():
            gs = self.extractor.extract_geometric(b)
            prior = None
            if self.prior_affine is not None:
                prior = self.prior_affine.predict_tensor(
                    correlate(self.extractor.extract_geometric(a), gs)
                )
                a = prewarp_affine(a, prior)
            correlation = correlate(self.extractor.extract_geometric(a), gs)
        return self.regressor.forward(correlation), prior

    def loss(
        self, image_a: ImageTensor, image_b: ImageTensor, truth: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        pred, prior = self.predict(image_a, image_b)
        grid = self.grid.to(device=pred.device, dtype=pred.dtype)
        truth = truth.to(device=pred.device, dtype=pred.dtype)
        moved_truth = apply_transform(self.regressor.kind, truth, grid)
        if prior is None:
            moved_pred = apply_transform(self.regressor.kind, pred, grid)
        else:
            moved_pred = cascade_apply(prior.to(pred.dtype), pred, grid)
        return point_loss(moved_pred, moved_truth), pred


def _log_line(path: Path | None, line: str) -> None:
    if path is None:
        return
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a", encoding="utf-8") as f:
            f.write(line + "\n")
    except OSError as e:
        raise ImageIOError(f"Cannot write training log {path}: {e}") from e


def last_checkpoint_path(path: Path | str) -> Path:
    path = Path(path)
    return path.with_name(path.name + LAST_CHECKPOINT_SUFFIX)


def _load_bank(cfg: TrainConfig) -> StyleBank | None:
    if cfg.augment_policy != AugmentPolicy.STYLE_BANK:
        return None
    if cfg.style_bank_path is None:
        raise StateError("augment_policy=style_bank needs style_bank_path")
    return StyleBank(cfg.style_bank_path, cfg.image_size)


def train(
    corpus: ImageCorpus,
    cfg: TrainConfig,
    kind: WarpKind | str,
    extractor: FeatureExtractor,
    prior_affine: Regressor | None = None,
) -> Regressor:
    """Train a regressor of ``kind`` on synthetic warps of ``corpus``.

    Writes ``cfg.checkpoint_path`` whenever validation improves and
    ``<checkpoint>.last`` after every epoch, and appends ``epoch,batch,loss``
    lines to ``cfg.log_path``. Returns the best regressor seen.

    Raises:
        PreconditionError: For ``kind=tps`` without a trained affine prior.
        ArgumentError: If the corpus is empty.
        NonFiniteLossError: If a batch loss becomes NaN or infinite.
    """
    kind = WarpKind(kind)
    if kind == WarpKind.TPS:
        if prior_affine is None or not prior_affine.trained or prior_affine.kind != WarpKind.AFFINE:
            raise PreconditionError(
                "TPS training runs on affine-prewarped pairs and needs a trained affine regressor"
            )
    elif prior_affine is not None:
        raise PreconditionError("An affine regressor is trained without a prior stage")
    if len(corpus) == 0:
        raise ArgumentError("Cannot train on an empty corpus")

    torch.manual_seed(cfg.seed)
    device = extractor.device
    regressor = init_regressor(kind, geometric_grid(extractor.analysis_size), seed=cfg.seed)
    regressor.net.to(device)
    if prior_affine is not None:
        prior_affine.net.to(device)

    sampler = TransformSampler(kind, cfg.seed, cfg.affine_ranges, cfg.tps_ranges)
    val_sampler = TransformSampler(kind, cfg.seed + 1, cfg.affine_ranges, cfg.tps_ranges)
    bank = _load_bank(cfg)
    train_idx, val_idx = corpus.split(cfg.validation_fraction, cfg.seed)
    train_set = PairDataset(corpus, train_idx, sampler, cfg.augment_policy, cfg.jitter, bank)
    val_set = PairDataset(corpus, val_idx, val_sampler, cfg.augment_policy, cfg.jitter, bank)

    workers = 0 if cfg.deterministic else cfg.num_workers
    loader = DataLoader(
        train_set,
        batch_size=cfg.batch_size,
        shuffle=True,
        num_workers=workers,
        generator=torch.Generator().manual_seed(cfg.seed),
    )
    runner = _StepRunner(regressor, extractor, prior_affine, uniform_grid(cfg.grid_size))
    optimizer = torch.optim.Adam(regressor.net.parameters(), lr=cfg.learning_rate)
    digest = cfg.digest()
    best_loss = math.inf
    best_state = copy.deepcopy(regressor.net.state_dict())

    logger.info(
        "Training %s regressor: %d train / %d validation images, %d epochs",
        kind,
        len(train_idx),
        len(val_idx),
        cfg.epochs,
    )
    with _deterministic(cfg.deterministic):
        for epoch in range(cfg.epochs):
            train_set.set_epoch(epoch)
            regressor.net.train()
            batch_losses = []
            for batch, (image_a, image_b, truth) in enumerate(loader):
                loss, pred = runner.loss(image_a, image_b, truth)
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(
                        f"{kind} training loss is {loss.item()} at epoch {epoch} batch {batch} "
                        f"(lr={cfg.learning_rate}, prediction range "
                        f"[{pred.min().item():.3g}, {pred.max().item():.3g}])"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                batch_losses.append(loss.item())
                _log_line(cfg.log_path, f"{epoch},{batch},{loss.item():.6f}")
                logger.debug("epoch %d batch %d loss %.6f", epoch, batch, loss.item())

            train_loss = float(np.mean(batch_losses))
            regressor.history.append(train_loss)
            val_loss = _validate(runner, val_set, cfg.batch_size) if len(val_set) else train_loss
            logger.info(
                "Epoch %d: train loss %.6f, validation loss %.6f", epoch, train_loss, val_loss
            )

            regressor.trained = True
            regressor.save(last_checkpoint_path(cfg.checkpoint_path), digest)
            if val_loss < best_loss:
                best_loss = val_loss
                best_state = copy.deepcopy(regressor.net.state_dict())
                regressor.save(cfg.checkpoint_path, digest)

    regressor.net.load_state_dict(best_state)
    regressor.net.eval()
    return regressor


def _validate(runner: _StepRunner, dataset: PairDataset, batch_size: int) -> float:
    runner.regressor.net.eval()
    losses = []
    weights = []
    with torch.no_grad():
        for image_a, image_b, truth in DataLoader(dataset, batch_size=batch_size):
            loss, _ = runner.loss(image_a, image_b, truth)
            losses.append(loss.item())
            weights.append(len(truth))
    runner.regressor.net.train()
    return float(np.average(losses, weights=weights))


@dataclass
class EvaluationReport:
    """Mean grid-point distances (normalized units) on held-out synthetic pairs."""

    kind: WarpKind
    identity: list[float] = field(default_factory=list)
    affine: list[float] = field(default_factory=list)
    cascade: list[float] = field(default_factory=list)

    @property
    def pair_count(self) -> int:
        return len(self.identity)

    @property
    def mean_identity(self) -> float:
        return float(np.mean(self.identity))

    @property
    def mean_affine(self) -> float:
        return float(np.mean(self.affine))

    @property
    def mean_cascade(self) -> float | None:
        return float(np.mean(self.cascade)) if self.cascade else None

    @property
    def cascade_win_fraction(self) -> float | None:
        """Share of pairs on which the cascade beats the affine stage alone."""
        if not self.cascade:
            return None
        wins = sum(c < a for c, a in zip(self.cascade, self.affine, strict=True))
        return wins / len(self.cascade)

    def summary(self) -> dict[str, float | int | str | None]:
        return {
            "kind": str(self.kind),
            "pairs": self.pair_count,
            "identity": self.mean_identity,
            "affine": self.mean_affine,
            "cascade": self.mean_cascade,
            "cascade_win_fraction": self.cascade_win_fraction,
        }


def evaluate(  # noqa: PLR0913
    corpus: ImageCorpus,
    affine: Regressor,
    extractor: FeatureExtractor,
    tps: Regressor | None = None,
    pairs: int = 50,
    seed: int = 1000,
    kind: WarpKind | str | None = None,
    policy: AugmentPolicy | str = AugmentPolicy.NONE,
    grid_size: int = 20,
    jitter: JitterConfig | None = None,
) -> EvaluationReport:
    """Compare identity, affine-only and cascade predictions on seeded synthetic pairs.

    Pairs are warped with ``kind`` transforms (TPS when a TPS regressor is
    given, affine otherwise) and cycle through the corpus images.
    """
    if pairs < 1:
        raise ArgumentError(f"Evaluation needs at least one pair, got {pairs}")
    kind = WarpKind(kind) if kind is not None else (WarpKind.TPS if tps else WarpKind.AFFINE)
    sampler = TransformSampler(kind, seed)
    grid = uniform_grid(grid_size, dtype=torch.float64)
    report = EvaluationReport(kind=kind)
    affine_runner = _StepRunner(affine, extractor, None, grid)
    tps_runner = _StepRunner(tps, extractor, affine, grid) if tps is not None else None
    identity = affine_apply(identity_tensor(WarpKind.AFFINE, dtype=torch.float64), grid)

    for n in range(pairs):
        image_index = n % len(corpus)
        pair = make_training_pair(
            corpus[image_index],
            sampler,
            policy,
            index=n,
            jitter=jitter,
            key=corpus.key(image_index),
        )
        a, b = pair.image_a.unsqueeze(0), pair.image_b.unsqueeze(0)
        moved_truth = apply_transform(kind, pair.truth_tensor.double(), grid).unsqueeze(0)

        affine.net.eval()
        with torch.no_grad():
            theta, _ = affine_runner.predict(a, b)
            moved_affine = affine_apply(theta.double().cpu(), grid)
            report.identity.append(float(grid_distance(identity.unsqueeze(0), moved_truth)))
            report.affine.append(float(grid_distance(moved_affine, moved_truth)))
            if tps_runner is not None:
                tps_runner.regressor.net.eval()
                offsets, prior = tps_runner.predict(a, b)
                moved = cascade_apply(prior.double().cpu(), offsets.double().cpu(), grid)
                report.cascade.append(float(grid_distance(moved, moved_truth)))

    logger.info("Evaluation on %d %s pairs: %s", pairs, kind, report.summary())
    return report
