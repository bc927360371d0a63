from pathlib import Path

import pytest
import torch

from geostyle.base import (
    AffineParams,
    AffineRanges,
    ArgumentError,
    AugmentPolicy,
    ConfigurationError,
    ImageCorpus,
    JitterConfig,
    NonFiniteLossError,
    PreconditionError,
    StateError,
    TpsParams,
    TpsRanges,
    TrainConfig,
    WarpKind,
)
from geostyle.geometry import apply_params, uniform_grid
from geostyle.warp import (
    EvaluationReport,
    PairDataset,
    StyleBank,
    TransformSampler,
    evaluate,
    grid_distance,
    grid_loss,
    init_regressor,
    jitter_image,
    last_checkpoint_path,
    load_regressor,
    make_training_pair,
    sample_transform,
    texture_augment,
    train,
)
from geostyle.warp import training as training_module
from tests.conftest import write_test_image

GRID = (11, 11)
NO_JITTER = JitterConfig(color_shift=0.0, contrast_range=(1.0, 1.0), noise_sigma=0.0)


@pytest.fixture
def corpus(corpus_dir: Path) -> ImageCorpus:
    return ImageCorpus(corpus_dir, image_size=64)


@pytest.fixture
def bank_dir(tmp_path: Path, corpus: ImageCorpus) -> Path:
    root = tmp_path / "bank"
    root.mkdir()
    for i in range(len(corpus)):
        for k in range(2):
            write_test_image(root / f"{corpus.key(i)}__{k}.png", 64, 64, seed=500 + 10 * i + k)
    return root


def _train_config(tmp_path: Path, **overrides) -> TrainConfig:
    fields = {
        "epochs": 2,
        "batch_size": 3,
        "image_size": 64,
        "checkpoint_path": tmp_path / "regressor.pt",
        "log_path": tmp_path / "train.log",
        "augment_policy": AugmentPolicy.NONE,
    }
    fields.update(overrides)
    return TrainConfig(**fields)


class TestTransformSampler:
    def test_same_index_same_draw(self) -> None:
        a = TransformSampler(WarpKind.AFFINE, seed=7)
        b = TransformSampler(WarpKind.AFFINE, seed=7)
        assert torch.equal(a.sample_tensor(3), b.sample_tensor(3))

    def test_draws_do_not_depend_on_order(self) -> None:
        sampler = TransformSampler(WarpKind.TPS, seed=1)
        late = [sampler.sample_tensor(i) for i in range(5)][2]
        assert torch.equal(TransformSampler(WarpKind.TPS, seed=1).sample_tensor(2), late)

    def test_indices_and_seeds_differ(self) -> None:
        sampler = TransformSampler(WarpKind.AFFINE, seed=0)
        assert not torch.equal(sampler.sample_tensor(0), sampler.sample_tensor(1))
        other = TransformSampler(WarpKind.AFFINE, seed=1)
        assert not torch.equal(sampler.sample_tensor(0), other.sample_tensor(0))

    def test_affine_draws_stay_in_range(self) -> None:
        ranges = AffineRanges(translation=0.2)
        sampler = TransformSampler(WarpKind.AFFINE, seed=2, affine_ranges=ranges)
        for i in range(20):
            theta = sampler.sample_tensor(i)
            assert theta.shape == (6,)
            assert theta.dtype == torch.float32
            assert abs(theta[2]) <= 0.2
            assert abs(theta[5]) <= 0.2
            assert sampler.in_frame_fraction(theta) >= 0.6

    def test_tps_draws_stay_in_range(self) -> None:
        sampler = TransformSampler(WarpKind.TPS, seed=3, tps_ranges=TpsRanges(offset=0.1))
        for i in range(20):
            offsets = sampler.sample_tensor(i)
            assert offsets.shape == (18,)
            assert offsets.abs().max() <= 0.1

    def test_zero_ranges_give_identity(self) -> None:
        ranges = AffineRanges(translation=0.0, rotation_degrees=0.0, scale=(1.0, 1.0), shear=0.0)
        sampler = TransformSampler(WarpKind.AFFINE, affine_ranges=ranges)
        assert sample_transform(sampler, 4) == AffineParams.identity()

    def test_impossible_ranges_rejected(self) -> None:
        ranges = AffineRanges(translation=0.0, rotation_degrees=0.0, scale=(10.0, 10.0), shear=0.0)
        sampler = TransformSampler(WarpKind.AFFINE, affine_ranges=ranges)
        with pytest.raises(ConfigurationError, match="narrow the sampling ranges"):
            sampler.sample_tensor(0)

    def test_sample_returns_model(self) -> None:
        assert isinstance(TransformSampler(WarpKind.TPS).sample(0), TpsParams)


class TestGridLoss:
    def test_translation(self) -> None:
        shifted = AffineParams(theta=(1.0, 0.0, 0.1, 0.0, 1.0, 0.0))
        assert float(grid_loss(shifted, AffineParams.identity())) == pytest.approx(0.01)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_point_loop(self, seed: int) -> None:
        kind = WarpKind.AFFINE if seed % 2 == 0 else WarpKind.TPS
        pred = TransformSampler(kind, seed=seed).sample(0)
        truth = TransformSampler(kind, seed=100 + seed).sample(0)
        side = 2 + seed % 3
        grid = uniform_grid(side, dtype=torch.float64)

        def move(params, x: float, y: float) -> tuple[float, float]:
            if kind == WarpKind.AFFINE:
                a, b, tx, c, d, ty = params.theta
                return a * x + b * y + tx, c * x + d * y + ty
            moved = apply_params(params, torch.tensor([[x, y]], dtype=torch.float64))[0]
            return float(moved[0]), float(moved[1])

        squares = []
        for x, y in grid.tolist():
            (px, py), (qx, qy) = move(pred, x, y), move(truth, x, y)
            squares.append((px - qx) ** 2 + (py - qy) ** 2)
        expected = sum(squares) / len(squares)
        assert float(grid_loss(pred, truth, grid=grid)) == pytest.approx(expected, abs=1e-6)

    def test_default_grid_is_20_by_20(self) -> None:
        pred = TransformSampler(WarpKind.TPS, seed=1).sample(0)
        truth = TransformSampler(WarpKind.TPS, seed=2).sample(0)
        grid = uniform_grid(20, dtype=torch.float64)
        assert float(grid_loss(pred, truth)) == pytest.approx(
            float(grid_loss(pred, truth, grid=grid)), abs=1e-12
        )

    def test_zero_for_equal_transforms(self) -> None:
        params = TransformSampler(WarpKind.TPS, seed=5).sample(0)
        assert float(grid_loss(params, params)) == 0.0

    def test_raw_tensors_need_kind(self) -> None:
        theta = torch.tensor([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
        with pytest.raises(ArgumentError, match="needs the transform kind"):
            grid_loss(theta, theta)
        assert float(grid_loss(theta, theta, kind=WarpKind.AFFINE)) == 0.0

    def test_grid_distance(self) -> None:
        points = torch.zeros(2, 4, 2)
        moved = points + torch.tensor([0.3, 0.4])
        assert torch.allclose(grid_distance(moved, points), torch.tensor([0.5, 0.5]))


class TestAugmentation:
    def test_degenerate_jitter_is_identity(self, image_factory) -> None:
        img = image_factory(20, 20)
        assert torch.allclose(jitter_image(img, NO_JITTER), img, atol=1e-6)

    def test_jitter_stays_in_unit_range(self, image_factory) -> None:
        strong = JitterConfig(color_shift=0.5, contrast_range=(0.2, 3.0), noise_sigma=0.3)
        out = jitter_image(image_factory(20, 20), strong, torch.Generator().manual_seed(0))
        assert out.min() >= 0.0
        assert out.max() <= 1.0

    def test_jitter_on_batch(self, image_factory) -> None:
        batch = torch.stack([image_factory(8, 8), image_factory(8, 8, seed=1)])
        assert jitter_image(batch, JitterConfig()).shape == (2, 3, 8, 8)

    def test_noise_level_is_drawn_per_image(self) -> None:
        noise_only = JitterConfig(color_shift=0.0, contrast_range=(1.0, 1.0), noise_sigma=0.05)
        flat = torch.full((3, 64, 64), 0.5)
        levels = [
            float((jitter_image(flat, noise_only, torch.Generator().manual_seed(s)) - 0.5).std())
            for s in range(16)
        ]
        assert max(levels) < 0.055
        assert min(levels) < 0.04
        assert max(levels) - min(levels) > 0.01

    def test_batch_images_get_their_own_noise_level(self) -> None:
        noise_only = JitterConfig(color_shift=0.0, contrast_range=(1.0, 1.0), noise_sigma=0.05)
        batch = torch.full((8, 3, 64, 64), 0.5)
        out = jitter_image(batch, noise_only, torch.Generator().manual_seed(0))
        levels = (out - 0.5).flatten(1).std(dim=1)
        assert levels.max() - levels.min() > 0.005

    def test_none_policy_returns_input(self, image_factory) -> None:
        img = image_factory(8, 8)
        assert texture_augment(img, AugmentPolicy.NONE) is img

    def test_style_bank_policy_needs_bank(self, image_factory) -> None:
        with pytest.raises(StateError, match="prepared style bank"):
            texture_augment(image_factory(8, 8), AugmentPolicy.STYLE_BANK)


class TestStyleBank:
    def test_missing_directory(self, tmp_path: Path) -> None:
        with pytest.raises(StateError, match="prepare-bank"):
            StyleBank(tmp_path / "absent")

    def test_empty_directory(self, tmp_path: Path) -> None:
        with pytest.raises(StateError, match="empty"):
            StyleBank(tmp_path)

    def test_renditions_by_key(self, bank_dir: Path) -> None:
        bank = StyleBank(bank_dir, image_size=48)
        assert len(bank) == 12
        names = [p.name for p in bank.renditions("photo_03")]
        assert names == ["photo_03__0.png", "photo_03__1.png"]
        assert bank.rendition("photo_03").shape == (3, 48, 48)

    def test_unknown_key(self, bank_dir: Path) -> None:
        with pytest.raises(StateError, match="no rendition"):
            StyleBank(bank_dir).rendition("photo_99")

    def test_nested_keys_stay_apart(self, tmp_path: Path) -> None:
        for seed, sub in enumerate(("a", "b")):
            (tmp_path / sub).mkdir()
            write_test_image(tmp_path / sub / "x__0.png", 32, 32, seed=seed)

        bank = StyleBank(tmp_path, image_size=32)

        assert len(bank) == 2
        assert bank.renditions("a/x") == [tmp_path / "a" / "x__0.png"]
        assert bank.renditions("b/x") == [tmp_path / "b" / "x__0.png"]


class TestTrainingPair:
    def test_identity_truth_keeps_image(self, image_factory) -> None:
        img = image_factory(40, 40)
        sampler = TransformSampler(WarpKind.AFFINE)
        pair = make_training_pair(img, sampler, truth=AffineParams.identity())

        assert pair.truth == AffineParams.identity()
        assert torch.allclose(pair.image_b, img, atol=1e-5)

    def test_warp_satisfies_backward_relation(self, image_factory) -> None:
        img = image_factory(40, 40)
        shift = AffineParams(theta=(1.0, 0.0, 0.1, 0.0, 1.0, 0.0))  # two pixels
        pair = make_training_pair(img, TransformSampler(WarpKind.AFFINE), truth=shift)
        assert torch.allclose(pair.image_b[:, :, :-2], img[:, :, 2:], atol=1e-5)

    def test_pairs_are_reproducible(self, image_factory) -> None:
        img = image_factory(40, 40)
        sampler = TransformSampler(WarpKind.TPS, seed=3)
        a = make_training_pair(img, sampler, AugmentPolicy.JITTER, index=5)
        b = make_training_pair(img, sampler, AugmentPolicy.JITTER, index=5)
        c = make_training_pair(img, sampler, AugmentPolicy.JITTER, index=6)

        assert torch.equal(a.image_b, b.image_b)
        assert torch.equal(a.truth_tensor, b.truth_tensor)
        assert not torch.equal(a.truth_tensor, c.truth_tensor)

    def test_style_bank_rendition_replaces_photo(self, image_factory, bank_dir: Path) -> None:
        bank = StyleBank(bank_dir, image_size=64)
        img = image_factory(64, 64)
        pair = make_training_pair(
            img,
            TransformSampler(WarpKind.AFFINE),
            AugmentPolicy.STYLE_BANK,
            bank=bank,
            key="photo_00",
            truth=AffineParams.identity(),
        )
        candidates = [
            bank.rendition("photo_00", torch.Generator().manual_seed(s)) for s in range(8)
        ]
        assert torch.equal(pair.image_a, img)
        assert any(torch.allclose(pair.image_b, c, atol=1e-5) for c in candidates)

    def test_dataset_draws_fresh_warps_per_epoch(self, corpus: ImageCorpus) -> None:
        dataset = PairDataset(corpus, [0, 1], TransformSampler(WarpKind.AFFINE, seed=0))
        _, _, first = dataset[0]
        dataset.set_epoch(1)
        _, _, second = dataset[0]

        assert len(dataset) == 2
        assert not torch.equal(first, second)


class TestTrain:
    def test_tps_needs_trained_affine(self, tmp_path, corpus, extractor) -> None:
        with pytest.raises(PreconditionError, match="trained affine"):
            train(corpus, _train_config(tmp_path), WarpKind.TPS, extractor)

    def test_untrained_prior_rejected(self, tmp_path, corpus, extractor) -> None:
        prior = init_regressor(WarpKind.AFFINE, GRID)
        with pytest.raises(PreconditionError):
            train(corpus, _train_config(tmp_path), WarpKind.TPS, extractor, prior_affine=prior)

    def test_affine_takes_no_prior(self, tmp_path, corpus, extractor) -> None:
        prior = init_regressor(WarpKind.AFFINE, GRID)
        prior.trained = True
        with pytest.raises(PreconditionError, match="without a prior"):
            train(corpus, _train_config(tmp_path), WarpKind.AFFINE, extractor, prior_affine=prior)

    def test_affine_training_writes_checkpoints_and_log(self, tmp_path, corpus, extractor) -> None:
        cfg = _train_config(tmp_path)
        regressor = train(corpus, cfg, WarpKind.AFFINE, extractor)

        assert regressor.trained
        assert len(regressor.history) == 2
        assert cfg.checkpoint_path.is_file()
        assert last_checkpoint_path(cfg.checkpoint_path).is_file()
        # 5 training images in batches of 3, two epochs
        lines = cfg.log_path.read_text(encoding="utf-8").splitlines()
        assert [line.split(",")[:2] for line in lines] == [
            ["0", "0"],
            ["0", "1"],
            ["1", "0"],
            ["1", "1"],
        ]
        assert all(float(line.split(",")[2]) >= 0 for line in lines)

        loaded = load_regressor(cfg.checkpoint_path, kind=WarpKind.AFFINE, grid=GRID)
        assert loaded.metadata.config_digest == cfg.digest()

    def test_loss_drops_on_a_biased_warp_distribution(self, tmp_path, corpus, extractor) -> None:
        zoom_only = AffineRanges(
            translation=0.0, rotation_degrees=0.0, scale=(1.2, 1.25), shear=0.0
        )
        cfg = _train_config(
            tmp_path, epochs=4, batch_size=2, validation_fraction=0.0, affine_ranges=zoom_only
        )
        regressor = train(corpus, cfg, WarpKind.AFFINE, extractor)

        lines = cfg.log_path.read_text(encoding="utf-8").splitlines()
        first_batch = float(lines[0].split(",")[2])
        assert len(regressor.history) == 4
        assert regressor.history[-1] < regressor.history[0]
        assert regressor.history[-1] < first_batch

    def test_training_is_deterministic(self, tmp_path, corpus, extractor) -> None:
        first = train(corpus, _train_config(tmp_path / "a", epochs=1), WarpKind.AFFINE, extractor)
        second = train(corpus, _train_config(tmp_path / "b", epochs=1), WarpKind.AFFINE, extractor)
        a, b = first.net.state_dict(), second.net.state_dict()
        assert all(torch.equal(a[key], b[key]) for key in a)
        assert first.history == second.history

    def test_tps_training_on_prewarped_pairs(self, tmp_path, corpus, extractor) -> None:
        affine_cfg = _train_config(tmp_path, epochs=1, checkpoint_path=tmp_path / "affine.pt")
        affine = train(corpus, affine_cfg, WarpKind.AFFINE, extractor)
        tps_cfg = _train_config(
            tmp_path, epochs=1, checkpoint_path=tmp_path / "tps.pt", augment_policy="jitter"
        )
        tps = train(corpus, tps_cfg, WarpKind.TPS, extractor, prior_affine=affine)

        assert tps.kind == WarpKind.TPS
        assert len(tps.history) == 1
        assert load_regressor(tps_cfg.checkpoint_path).kind == WarpKind.TPS

    def test_style_bank_training(self, tmp_path, corpus, bank_dir, extractor) -> None:
        cfg = _train_config(
            tmp_path, epochs=1, augment_policy=AugmentPolicy.STYLE_BANK, style_bank_path=bank_dir
        )
        assert train(corpus, cfg, WarpKind.AFFINE, extractor).trained

    def test_non_finite_loss_stops_training(
        self, tmp_path, corpus, extractor, monkeypatch: pytest.MonkeyPatch
    ) -> None:
        monkeypatch.setattr(
            training_module, "point_loss", lambda a, b: (a - b).sum() * float("nan")
        )
        with pytest.raises(NonFiniteLossError, match="epoch 0 batch 0"):
            train(corpus, _train_config(tmp_path), WarpKind.AFFINE, extractor)


class TestEvaluate:
    def test_identity_regressors_score_like_identity(self, corpus, extractor) -> None:
        affine = init_regressor(WarpKind.AFFINE, GRID)
        tps = init_regressor(WarpKind.TPS, GRID)
        report = evaluate(corpus, affine, extractor, tps=tps, pairs=4, seed=1000)

        assert report.kind == WarpKind.TPS
        assert report.pair_count == 4
        assert report.affine == pytest.approx(report.identity)
        assert report.cascade == pytest.approx(report.identity)
        assert all(d > 0 for d in report.identity)

    def test_affine_only(self, corpus, extractor) -> None:
        report = evaluate(corpus, init_regressor(WarpKind.AFFINE, GRID), extractor, pairs=2)
        summary = report.summary()

        assert report.kind == WarpKind.AFFINE
        assert summary["cascade"] is None
        assert summary["cascade_win_fraction"] is None
        assert summary["pairs"] == 2

    def test_evaluation_is_seeded(self, corpus, extractor) -> None:
        affine = init_regressor(WarpKind.AFFINE, GRID)
        a = evaluate(corpus, affine, extractor, pairs=2, seed=3)
        b = evaluate(corpus, affine, extractor, pairs=2, seed=3)
        assert a.identity == b.identity

    def test_needs_pairs(self, corpus, extractor) -> None:
        with pytest.raises(ArgumentError):
            evaluate(corpus, init_regressor(WarpKind.AFFINE, GRID), extractor, pairs=0)


def test_cascade_win_fraction() -> None:
    report = EvaluationReport(
        kind=WarpKind.TPS,
        identity=[1.0, 1.0, 1.0, 1.0],
        affine=[0.5, 0.4, 0.3, 0.2],
        cascade=[0.4, 0.5, 0.1, 0.2],
    )
    assert report.cascade_win_fraction == 0.5
    assert report.mean_cascade == pytest.approx(0.3)
