import logging
import math

import numpy as np
import pytest

from inversion.invert import InversionConfig, invert, region_losses, round_robin_labels
from inversion.masks import TokenMask, apply_mask, pixel_mask, positions_batch
from inversion.regularizer import StatExtractor, fit_stat_regularizer, stat_penalty
from inversion.tasks import build_task, load_task, save_task
from lora.adapter import new_adapter
from lora.head import new_head, zero_head
from model.pruning import PrunePlan
from model.vit import ViTConfig, ViTModel
from tensor.gradcheck import gradcheck
from tensor.tensor import Tensor, no_grad
from utils.constants import STD_FLOOR
from utils.errors import (ConfigError, CountError, DimensionError, DivergenceError, IncompatibleAdapterError)


@pytest.fixture
def quick_cfg():
    return InversionConfig(iterations=5, lr=0.25, images_per_class=3, alpha_r=0.0, seed=2)


class TestRegularizer:
    def test_identity_extractor_mean_is_pixel_mean(self, rng, float64):
        probe = rng.standard_normal((64, 1, 4, 4))
        reg = fit_stat_regularizer(probe, extractor=StatExtractor.identity(1))
        assert reg.target_means[0][0] == pytest.approx(probe.sum() / probe.size, abs=1e-12)
        assert reg.target_stds[0][0] == pytest.approx(probe.std(), rel=1e-9)

    def test_identical_images_hit_the_floor(self, caplog):
        probe = np.ones((64, 3, 8, 8))
        with caplog.at_level(logging.WARNING):
            reg = fit_stat_regularizer(probe, extractor_seed=1)
        for std in reg.target_stds:
            np.testing.assert_allclose(std, STD_FLOOR, rtol=1e-6)
        assert "near-constant" in caplog.text

    def test_deterministic(self, rng):
        probe = rng.standard_normal((64, 3, 8, 8))
        first = fit_stat_regularizer(probe, extractor_seed=4)
        second = fit_stat_regularizer(probe, extractor_seed=4)
        for a, b in zip(first.target_means + first.target_stds, second.target_means + second.target_stds):
            np.testing.assert_array_equal(a, b)

    def test_probe_set_matches_itself(self, rng, float64):
        probe = rng.standard_normal((64, 3, 8, 8))
        reg = fit_stat_regularizer(probe, extractor_seed=0)
        assert stat_penalty(Tensor(probe), reg).item() < 1e-6

    @pytest.mark.parametrize("shift", [0.5, -1.25])
    def test_shift_costs_its_magnitude(self, rng, float64, shift):
        probe = rng.standard_normal((64, 1, 4, 4))
        reg = fit_stat_regularizer(probe, extractor=StatExtractor.identity(1))
        assert stat_penalty(Tensor(probe + shift), reg).item() == pytest.approx(abs(shift), abs=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_penalty_gradient(self, seed):
        gen = np.random.default_rng(seed)
        reg = fit_stat_regularizer(gen.standard_normal((64, 2, 8, 8)), extractor_seed=seed)
        passed, worst = gradcheck(lambda x: stat_penalty(x, reg), [gen.standard_normal((3, 2, 8, 8)) * 1.5],
                                  rtol=1e-3, seed=seed)
        assert passed, worst

    def test_needs_enough_probe_images(self, rng):
        with pytest.raises(CountError):
            fit_stat_regularizer(rng.standard_normal((10, 3, 8, 8)))
        with pytest.raises(DimensionError):
            fit_stat_regularizer(rng.standard_normal((64, 8, 8)))

    def test_extractor_channel_check(self, rng):
        reg = fit_stat_regularizer(rng.standard_normal((64, 3, 8, 8)))
        with pytest.raises(DimensionError):
            stat_penalty(Tensor(rng.standard_normal((2, 1, 8, 8))), reg)


class TestMasks:
    def test_positions_and_ratio(self):
        mask = TokenMask.from_positions([0, 5, 15], 4)
        np.testing.assert_array_equal(mask.positions(), [0, 5, 15])
        assert mask.ones == 3
        assert mask.sparse_ratio == pytest.approx(13 / 16)

    def test_square_grid_required(self):
        with pytest.raises(DimensionError):
            TokenMask(np.ones((2, 3)))

    def test_apply_all_ones_and_zeros(self, rng):
        image = rng.standard_normal((3, 16, 16))
        np.testing.assert_array_equal(apply_mask(image, TokenMask.all_ones(4), 4), image)
        assert not apply_mask(image, np.zeros((4, 4)), 4).any()

    def test_checkerboard_zeroes_half(self):
        grid = (np.add.outer(np.arange(4), np.arange(4)) % 2).astype(bool)
        masked = apply_mask(np.full((3, 16, 16), 2.0), grid, 4)
        assert np.count_nonzero(masked == 0) == masked.size // 2

    def test_pixel_mask_expands_patches(self):
        pixels = pixel_mask(TokenMask.from_positions([1], 2), 3)
        assert pixels.shape == (6, 6)
        assert pixels[:3, 3:].all() and pixels.sum() == 9

    def test_grid_mismatch(self):
        with pytest.raises(DimensionError):
            apply_mask(np.ones((3, 16, 16)), np.ones((3, 3)), 4)

    def test_positions_batch_needs_equal_counts(self):
        with pytest.raises(DimensionError):
            positions_batch([TokenMask.from_positions([0], 2), TokenMask.from_positions([0, 1], 2)])


class TestInvert:
    def test_weights_are_untouched(self, tiny_model, trained_adapter, two_way_head, quick_cfg):
        before = (tiny_model.digest(), trained_adapter.digest(), two_way_head.digest())
        invert(trained_adapter, two_way_head, tiny_model, quick_cfg)
        assert (tiny_model.digest(), trained_adapter.digest(), two_way_head.digest()) == before

    def test_result_layout(self, tiny_model, trained_adapter, two_way_head, quick_cfg):
        result = invert(trained_adapter, two_way_head, tiny_model, quick_cfg)
        assert result.images.shape == (6, 3, 16, 16)
        np.testing.assert_array_equal(result.labels, [0, 1, 0, 1, 0, 1])
        assert len(result.loss_trace) == 5 and all(math.isfinite(v) for v in result.loss_trace)
        assert all(m.ones == 16 for m in result.masks)

    def test_bit_deterministic(self, tiny_model, trained_adapter, two_way_head, quick_cfg):
        first = invert(trained_adapter, two_way_head, tiny_model, quick_cfg)
        second = invert(trained_adapter, two_way_head, tiny_model, quick_cfg)
        assert first.images.tobytes() == second.images.tobytes()
        assert first.loss_trace == second.loss_trace

    def test_loss_decreases(self, tiny_model, trained_adapter, two_way_head):
        cfg = InversionConfig(iterations=30, lr=0.25, images_per_class=4, alpha_r=0.0, seed=8)
        result = invert(trained_adapter, two_way_head, tiny_model, cfg)
        assert result.loss_trace[-1] < result.loss_trace[0]

    def test_regularized_loss_is_finite(self, tiny_model, trained_adapter, two_way_head, rng):
        reg = fit_stat_regularizer(rng.standard_normal((64, 3, 16, 16)), alpha_r=0.01)
        cfg = InversionConfig(iterations=4, images_per_class=2, alpha_r=0.01, seed=1)
        result = invert(trained_adapter, two_way_head, tiny_model, cfg, reg)
        assert all(r > 0 for r in result.reg_trace)
        assert all(math.isfinite(v) for v in result.loss_trace)

    @pytest.mark.parametrize("text, ones", [("0:0.5", 8), ("1:0.75", 4), ("0:0.5,1:0.5", 4)])
    def test_mask_counts_follow_the_plan(self, tiny_model, trained_adapter, two_way_head, text, ones):
        cfg = InversionConfig(iterations=2, images_per_class=2, alpha_r=0.0, plan=PrunePlan.parse(text))
        result = invert(trained_adapter, two_way_head, tiny_model, cfg)
        assert all(m.ones == ones for m in result.masks)

    def test_masks_come_from_the_last_forward(self, tiny_model, trained_adapter, two_way_head, tiny_cfg):
        cfg = InversionConfig(iterations=1, images_per_class=2, alpha_r=0.0, plan=PrunePlan.parse("0:0.5"), seed=3)
        result = invert(trained_adapter, two_way_head, tiny_model, cfg)
        with no_grad():
            out = tiny_model.embed(Tensor(result.initial_images), adapters=[trained_adapter], plan=cfg.plan)
        expected = np.stack([TokenMask.from_positions(row, tiny_cfg.grid_size).grid
                             for row in out.kept_token_positions])
        np.testing.assert_array_equal(result.mask_grids, expected)

    def test_constant_loss_never_moves_images(self, tiny_model, trained_adapter, tiny_cfg, quick_cfg):
        head = zero_head(tiny_cfg.embed_dim, ["a", "b"])
        result = invert(trained_adapter, head, tiny_model, quick_cfg)
        np.testing.assert_array_equal(result.images, result.initial_images)

    def test_incompatible_head(self, tiny_model, trained_adapter, quick_cfg):
        with pytest.raises(IncompatibleAdapterError):
            invert(trained_adapter, new_head(8, ["a", "b"]), tiny_model, quick_cfg)

    def test_plan_beyond_depth(self, tiny_model, trained_adapter, two_way_head):
        cfg = InversionConfig(iterations=1, plan=PrunePlan({4: 0.5}))
        with pytest.raises(ConfigError):
            invert(trained_adapter, two_way_head, tiny_model, cfg)

    def test_divergence_reports_iteration(self, tiny_model, trained_adapter, two_way_head, quick_cfg, monkeypatch):
        monkeypatch.setattr("inversion.invert.cross_entropy", lambda logits, labels: logits.sum() * float("nan"))
        with pytest.raises(DivergenceError) as info:
            invert(trained_adapter, two_way_head, tiny_model, quick_cfg)
        assert info.value.iteration == 0

    @pytest.mark.parametrize("kwargs", [{"iterations": 0}, {"images_per_class": 0}, {"label_policy": "random"},
                                        {"lr": 0.0}, {"alpha_r": -1.0}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ConfigError):
            InversionConfig(**kwargs)

    def test_round_robin(self):
        np.testing.assert_array_equal(round_robin_labels(5, 2), [0, 1, 0, 1, 0])


class TestRegionLosses:
    def test_equal_at_start(self, tiny_model, trained_adapter, two_way_head, rng):
        x0 = rng.standard_normal((4, 3, 16, 16))
        masks = [TokenMask.from_positions(range(8), 4)] * 4
        labels = round_robin_labels(4, 2)
        fg, bg = region_losses(tiny_model, trained_adapter, two_way_head, x0, x0, masks, labels)
        assert fg == bg

    def test_tracked_during_inversion(self, tiny_model, trained_adapter, two_way_head):
        cfg = InversionConfig(iterations=6, images_per_class=2, alpha_r=0.0, track_regions=True,
                              checkpoint_every=2, plan=PrunePlan({0: 0.5}))
        result = invert(trained_adapter, two_way_head, tiny_model, cfg)
        assert [it for it, _, _ in result.region_trace] == [0, 2, 4]
        _, fg0, bg0 = result.region_trace[0]
        assert fg0 == pytest.approx(bg0)

    def test_all_ones_mask_foreground_is_current(self, tiny_model, trained_adapter, two_way_head, rng):
        x0 = rng.standard_normal((2, 3, 16, 16))
        xt = rng.standard_normal((2, 3, 16, 16))
        labels = round_robin_labels(2, 2)
        ones = [TokenMask.all_ones(4)] * 2
        zeros = [TokenMask(np.zeros((4, 4)))] * 2
        kept, _ = region_losses(tiny_model, trained_adapter, two_way_head, x0, xt, ones, labels)
        swapped, _ = region_losses(tiny_model, trained_adapter, two_way_head, xt, x0, zeros, labels)
        assert kept == pytest.approx(swapped)


class TestBuildTask:
    def test_split_by_generation_index(self):
        images = np.arange(4, dtype=np.float32).reshape(4, 1, 1, 1)
        task = build_task(images, np.ones((4, 2, 2)), [0, 1, 0, 1], N=2, K=1, Q=1, source="t000")
        np.testing.assert_array_equal(task.support_images.ravel(), [0, 1])
        np.testing.assert_array_equal(task.query_images.ravel(), [2, 3])
        np.testing.assert_array_equal(task.support_labels, [0, 1])
        assert task.source_ids == ["t000"]
        assert task.class_names == ["0", "1"]

    def test_five_way_fifteen_query_needs_eighty(self):
        labels = round_robin_labels(80, 5)
        task = build_task(np.zeros((80, 1)), np.ones((80, 1, 1)), labels, N=5, K=1, Q=15)
        assert len(task.query_labels) == 75
        with pytest.raises(CountError):
            build_task(np.zeros((79, 1)), np.ones((79, 1, 1)), labels[:79], N=5, K=1, Q=15)

    @pytest.mark.parametrize("seed", range(100))
    def test_support_and_query_disjoint(self, seed):
        gen = np.random.default_rng(seed)
        n, k, q = int(gen.integers(2, 6)), int(gen.integers(1, 4)), int(gen.integers(1, 6))
        total = n * (k + q + int(gen.integers(0, 3)))
        images = np.arange(total, dtype=np.float32).reshape(total, 1)
        task = build_task(images, np.ones((total, 1, 1)), round_robin_labels(total, n), N=n, K=k, Q=q)
        assert not set(task.support_images.ravel()) & set(task.query_images.ravel())
        assert sorted(set(task.query_labels)) == list(range(n))

    def test_misaligned_inputs(self):
        with pytest.raises(DimensionError):
            build_task(np.zeros((4, 1)), np.ones((3, 1, 1)), [0, 1, 0, 1], N=2, K=1, Q=1)

    def test_save_and_load(self, tmp_path, rng):
        grids = rng.random((6, 4, 4)) > 0.5
        task = build_task(rng.standard_normal((6, 3, 16, 16)).astype(np.float32), grids,
                          [0, 1, 0, 1, 0, 1], N=2, K=1, Q=2, class_names=["cat", "dog"], source="t001")
        save_task(task, str(tmp_path / "task"))
        loaded = load_task(str(tmp_path / "task"))
        np.testing.assert_array_equal(loaded.query_images, task.query_images)
        np.testing.assert_array_equal(loaded.query_masks, task.query_masks)
        np.testing.assert_array_equal(loaded.support_labels, task.support_labels)
        assert loaded.class_names == ["cat", "dog"] and loaded.sources == ["t001", "t001"]
        assert (loaded.k_shot, loaded.q_query) == (1, 2)


@pytest.mark.slow
class TestInversionConvergence:
    def test_cross_entropy_collapses(self):
        cfg = ViTConfig(image_size=16, patch_size=4, channels=3, depth=2, embed_dim=64, num_heads=4)
        successes = 0
        for seed in range(10):
            model = ViTModel(cfg, seed=seed)
            adapter = new_adapter(cfg, rank=4, seed=seed)
            head = new_head(cfg.embed_dim, ["a", "b"], seed=seed, std=0.5)
            result = invert(adapter, head, model,
                            InversionConfig(iterations=200, lr=0.25, images_per_class=4, alpha_r=0.0, seed=seed))
            successes += result.ce_trace[-1] < 0.1 * result.ce_trace[0]
        assert successes >= 9
