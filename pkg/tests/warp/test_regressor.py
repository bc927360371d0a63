from pathlib import Path

import pytest
import torch

from geostyle.base import AffineParams, ArgumentError, StateError, TpsParams, WarpKind
from geostyle.features import CorrelationTensor
from geostyle.warp import (
    correlate_images,
    estimate_affine,
    estimate_warp,
    init_regressor,
    load_regressor,
    metadata_path,
    prewarp_affine,
)

GRID = (11, 11)


def _correlation(batch: int = 1, seed: int = 0) -> CorrelationTensor:
    generator = torch.Generator().manual_seed(seed)
    return CorrelationTensor(values=torch.rand(batch, *GRID, *GRID, generator=generator))


def _perturbed(kind: WarpKind, seed: int = 1):
    regressor = init_regressor(kind, GRID, seed=seed)
    with torch.no_grad():
        regressor.net.head.weight.normal_(0.0, 1e-3, generator=torch.Generator().manual_seed(seed))
    return regressor


class TestRegressorNet:
    def test_untrained_affine_predicts_identity(self) -> None:
        regressor = init_regressor(WarpKind.AFFINE, GRID)
        assert regressor.predict(_correlation()) == AffineParams.identity()

    def test_untrained_tps_predicts_identity(self) -> None:
        regressor = init_regressor(WarpKind.TPS, GRID)
        assert regressor.predict(_correlation()) == TpsParams.identity()
        assert regressor.param_count == 18

    def test_init_is_seeded(self) -> None:
        a = init_regressor(WarpKind.AFFINE, GRID, seed=4).net.state_dict()
        b = init_regressor(WarpKind.AFFINE, GRID, seed=4).net.state_dict()
        assert all(torch.equal(a[key], b[key]) for key in a)

    def test_grid_too_small(self) -> None:
        with pytest.raises(ArgumentError, match="at least 11x11"):
            init_regressor(WarpKind.AFFINE, (10, 10))

    def test_wrong_correlation_grid(self) -> None:
        regressor = init_regressor(WarpKind.AFFINE, (15, 15))
        with pytest.raises(ArgumentError, match="expects correlation"):
            regressor.predict(_correlation())

    def test_predict_takes_single_item(self) -> None:
        regressor = init_regressor(WarpKind.AFFINE, GRID)
        with pytest.raises(ArgumentError, match="batch of 2"):
            regressor.predict(_correlation(batch=2))

    def test_predict_tensor_restores_mode(self) -> None:
        regressor = init_regressor(WarpKind.AFFINE, GRID)
        regressor.net.train()
        out = regressor.predict_tensor(_correlation(batch=3))
        assert out.shape == (3, 6)
        assert not out.requires_grad
        assert regressor.net.training

    def test_forward_is_differentiable(self) -> None:
        regressor = init_regressor(WarpKind.TPS, GRID)
        regressor.net.train()
        regressor.forward(_correlation(batch=2)).square().sum().backward()
        assert regressor.net.head.weight.grad is not None
        assert regressor.net.head.weight.grad.abs().sum() > 0


class TestCheckpoints:
    def test_round_trip(self, tmp_path: Path) -> None:
        regressor = _perturbed(WarpKind.TPS)
        regressor.history = [0.5, 0.25]
        path = regressor.save(tmp_path / "ckpt" / "tps.pt", config_digest="abc")
        loaded = load_regressor(path, kind=WarpKind.TPS, grid=GRID)

        assert metadata_path(path).is_file()
        assert loaded.trained
        assert not loaded.net.training
        assert loaded.metadata.epochs == 2
        assert loaded.metadata.config_digest == "abc"
        correlation = _correlation(batch=2, seed=3)
        expected = regressor.predict_tensor(correlation)
        assert torch.allclose(loaded.predict_tensor(correlation), expected)

    def test_kind_is_read_from_metadata(self, tmp_path: Path) -> None:
        path = _perturbed(WarpKind.AFFINE).save(tmp_path / "affine.pt")
        assert load_regressor(path).kind == WarpKind.AFFINE

    def test_missing_checkpoint(self, tmp_path: Path) -> None:
        with pytest.raises(StateError, match="geostyle train --kind tps"):
            load_regressor(tmp_path / "absent.pt", kind=WarpKind.TPS)

    def test_missing_metadata(self, tmp_path: Path) -> None:
        path = _perturbed(WarpKind.AFFINE).save(tmp_path / "affine.pt")
        metadata_path(path).unlink()
        with pytest.raises(StateError, match="not found"):
            load_regressor(path)

    def test_kind_mismatch(self, tmp_path: Path) -> None:
        path = _perturbed(WarpKind.AFFINE).save(tmp_path / "affine.pt")
        with pytest.raises(StateError, match="expected tps"):
            load_regressor(path, kind=WarpKind.TPS)

    def test_grid_mismatch(self, tmp_path: Path) -> None:
        path = _perturbed(WarpKind.AFFINE).save(tmp_path / "affine.pt")
        with pytest.raises(StateError, match="correlation grid"):
            load_regressor(path, grid=(15, 15))

    def test_weights_digest_mismatch(self, tmp_path: Path) -> None:
        path = _perturbed(WarpKind.AFFINE, seed=1).save(tmp_path / "affine.pt")
        torch.save(_perturbed(WarpKind.AFFINE, seed=2).net.state_dict(), path)
        with pytest.raises(StateError, match="digest"):
            load_regressor(path)

    def test_malformed_metadata(self, tmp_path: Path) -> None:
        path = _perturbed(WarpKind.AFFINE).save(tmp_path / "affine.pt")
        metadata_path(path).write_text("kind = affine\nparam_count = 18\n", encoding="utf-8")
        with pytest.raises(StateError, match="Invalid checkpoint metadata"):
            load_regressor(path)


class TestEstimation:
    def test_correlate_images_shape(self, extractor, image_factory) -> None:
        correlation = correlate_images(image_factory(64, 80), image_factory(50, 50), extractor)
        assert correlation.values.shape == (1, *GRID, *GRID)

    def test_untrained_regressor_rejected(self, extractor, image_factory) -> None:
        regressor = init_regressor(WarpKind.AFFINE, GRID)
        with pytest.raises(StateError, match="untrained"):
            estimate_affine(image_factory(64, 64), image_factory(64, 64), regressor, extractor)

    def test_wrong_kind_rejected(self, extractor, image_factory) -> None:
        regressor = init_regressor(WarpKind.TPS, GRID)
        regressor.trained = True
        with pytest.raises(StateError, match="Expected a affine regressor"):
            estimate_affine(image_factory(64, 64), image_factory(64, 64), regressor, extractor)

    def test_identity_cascade(self, extractor, image_factory) -> None:
        affine = init_regressor(WarpKind.AFFINE, GRID)
        tps = init_regressor(WarpKind.TPS, GRID)
        affine.trained = tps.trained = True

        affine_params, tps_params = estimate_warp(
            image_factory(64, 64), image_factory(72, 60, seed=1), affine, tps, extractor
        )
        assert affine_params == AffineParams.identity()
        assert tps_params == TpsParams.identity()

    def test_estimate_affine_shape(self, extractor, image_factory) -> None:
        affine = init_regressor(WarpKind.AFFINE, GRID)
        affine.trained = True
        theta = estimate_affine(image_factory(64, 64), image_factory(64, 64), affine, extractor)
        assert theta.shape == (1, 6)

    def test_prewarp_identity(self, image_factory) -> None:
        batch = image_factory(32, 32).unsqueeze(0)
        theta = torch.tensor([[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]])
        assert torch.allclose(prewarp_affine(batch, theta), batch, atol=1e-5)
