import json
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest

from harness.pretune import teacher_ranks
from inversion.invert import InversionConfig, invert, round_robin_labels
from inversion.tasks import GeneratedTask, build_task
from lora.adapter import new_adapter
from lora.head import ClassificationHead, new_head, zero_head
from meta.distill import distill_step, teacher_probs
from meta.interpolation import interpolate_task, interpolation_step
from meta.joint import JointConfig, joint_train, pool_tasks
from meta.meta_lora import new_meta_lora, resolve_layers
from meta.prototypes import (PrototypeSet, embed_images, embed_support, proto_logits, proto_predict, proto_probs,
                             prototypes_from)
from meta.trainer import (BRANCH_DISTILL, BRANCH_INTERPOLATE, MetaTrainConfig, TeacherEntry, flip_task, meta_train,
                          read_log, step_flops)
from model.flops import VIT_B, dense_seq_lengths, relative_delta, training_flops
from model.pruning import PrunePlan
from model.vit import ViTConfig, ViTModel
from tensor.optim import Optimizer
from tensor.tensor import Tensor, no_grad
from utils.constants import DEFAULT_SETTINGS
from utils.errors import ConfigError, CountError, LabelError, PipelineStateError


def make_task(names, source, seed, k=1, q=3, image_size=16, grid=4, masks=None):
    n = len(names)
    total = n * (k + q)
    gen = np.random.default_rng(seed)
    images = gen.standard_normal((total, 3, image_size, image_size)).astype(np.float32)
    if masks is None:
        masks = np.ones((total, grid, grid), dtype=bool)
    return build_task(images, masks, round_robin_labels(total, n), N=n, K=k, Q=q, class_names=names, source=source)


def make_teacher(cfg, teacher_id, names, seed):
    adapter = new_adapter(cfg, rank=2, seed=seed)
    gen = np.random.default_rng(seed + 50)
    for _, b in adapter.sites.values():
        b.data = gen.normal(0.0, 0.3, b.shape).astype(b.dtype)
    return TeacherEntry(teacher_id, adapter, new_head(cfg.embed_dim, names, seed=seed, std=0.5))


@pytest.fixture
def teachers(tiny_cfg):
    return [make_teacher(tiny_cfg, f"t{i:03d}", [f"c{2 * i}", f"c{2 * i + 1}"], seed=i) for i in range(3)]


@pytest.fixture
def cache(teachers):
    return {t.teacher_id: [make_task(t.head.labels, t.teacher_id, seed=20 + i)] for i, t in enumerate(teachers)}


class TestPrototypes:
    def test_one_shot_center_is_the_support_point(self, rng):
        emb = rng.standard_normal((2, 5))
        protos = prototypes_from(Tensor(emb), np.array([0, 1]), 2)
        np.testing.assert_array_equal(protos.centers.data, emb.astype(protos.centers.dtype))

    def test_duplicate_support_leaves_center(self, rng):
        emb = rng.standard_normal((2, 5))
        once = prototypes_from(Tensor(emb), np.array([0, 1]), 2).centers.data
        twice = prototypes_from(Tensor(emb[[0, 0, 1]]), np.array([0, 0, 1]), 2).centers.data
        np.testing.assert_allclose(twice, once, atol=1e-7)

    def test_center_is_the_mean(self, rng):
        emb = rng.standard_normal((6, 4))
        labels = np.array([0, 1, 0, 1, 0, 1])
        protos = prototypes_from(Tensor(emb), labels, 2)
        assert np.max(np.abs(protos.centers.data[1] - emb[labels == 1].mean(axis=0))) < 1e-6

    def test_empty_class(self, rng):
        with pytest.raises(CountError):
            prototypes_from(Tensor(rng.standard_normal((2, 4))), np.array([0, 0]), 2)

    def test_matches_direct_formula(self, float64):
        centers = np.array([[0.0, 0.0], [1.0, 2.0], [-1.5, 0.5]])
        query = np.array([[0.3, -0.4]])
        probs = proto_probs(Tensor(query), PrototypeSet(Tensor(centers), [0, 1, 2])).data[0]
        weights = np.exp(-np.linalg.norm(query - centers, axis=1))
        np.testing.assert_allclose(probs, weights / weights.sum(), atol=1e-9)

    def test_zero_distance_wins_and_ties_are_equal(self, float64):
        centers = Tensor(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 3.0]]))
        protos = PrototypeSet(centers, [0, 1, 2])
        probs = proto_probs(Tensor(np.array([[2.0, 0.0], [1.0, 0.0]])), protos).data
        assert probs[0].argmax() == 1
        assert probs[1, 0] == pytest.approx(probs[1, 1])

    def test_probabilities_are_a_distribution(self, rng):
        protos = PrototypeSet(Tensor(rng.standard_normal((4, 8))), [0, 1, 2, 3])
        probs = proto_probs(Tensor(rng.standard_normal((10, 8)) * 5), protos).data
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert (probs > 0).all()

    def test_translation_invariance(self, rng, float64):
        centers, query = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
        shift = rng.standard_normal(4) * 10
        base = proto_probs(Tensor(query), PrototypeSet(Tensor(centers), [0, 1, 2])).data
        moved = proto_probs(Tensor(query + shift), PrototypeSet(Tensor(centers + shift), [0, 1, 2])).data
        np.testing.assert_array_equal(base.argmax(axis=1), moved.argmax(axis=1))
        np.testing.assert_allclose(base, moved, atol=1e-9)

    def test_one_shot_argmax_is_nearest_neighbour(self, rng):
        support, query = rng.standard_normal((3, 6)), rng.standard_normal((20, 6))
        protos = prototypes_from(Tensor(support), np.arange(3), 3)
        predicted = proto_probs(Tensor(query), protos).data.argmax(axis=1)
        nearest = np.linalg.norm(query[:, None, :] - support[None, :, :], axis=-1).argmin(axis=1)
        np.testing.assert_array_equal(predicted, nearest)

    def test_squared_distance(self, float64):
        protos = PrototypeSet(Tensor(np.array([[0.0, 0.0], [3.0, 4.0]])), [0, 1])
        logits = proto_logits(Tensor(np.array([[0.0, 0.0]])), protos, distance="squared").data
        np.testing.assert_allclose(logits, [[0.0, -25.0]])
        with pytest.raises(ConfigError):
            proto_logits(Tensor(np.zeros((1, 2))), protos, distance="cosine")

    def test_predict_recovers_support_images(self, tiny_model, tiny_images, trained_adapter):
        with no_grad():
            support = embed_images(tiny_model, [trained_adapter], tiny_images[:3])
            protos = prototypes_from(support, np.arange(3), 3)
            probs = proto_predict(tiny_model, trained_adapter, protos, tiny_images[:3]).data
        np.testing.assert_array_equal(probs.argmax(axis=1), np.arange(3))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_predict_reaches_meta_parameters(self, tiny_model, tiny_images):
        meta = new_meta_lora(tiny_model, 2, 0)
        for _, b in meta.adapters[0].sites.values():
            b.data[...] = 0.1
        protos = prototypes_from(embed_images(tiny_model, meta.adapters, tiny_images[:2]), np.arange(2), 2)
        probs = proto_predict(tiny_model, meta, protos, tiny_images[2:4])
        (probs[:, 0]).sum().backward()
        assert any(p.grad is not None and np.abs(p.grad).sum() > 0 for p in meta.parameters())


class TestSparseEmbedding:
    def test_all_ones_mask_equals_dense(self, tiny_model, tiny_images):
        with no_grad():
            dense = embed_images(tiny_model, [], tiny_images).data
            sparse = embed_images(tiny_model, [], tiny_images, np.ones((6, 4, 4), dtype=bool), sparse_mode=True).data
        assert np.max(np.abs(dense - sparse)) < 1e-6

    def test_mixed_counts_keep_input_order(self, tiny_model, tiny_images, rng):
        grids = np.zeros((6, 16), dtype=bool)
        for i, count in enumerate([4, 8, 4, 12, 8, 16]):
            grids[i, rng.permutation(16)[:count]] = True
        grids = grids.reshape(6, 4, 4)
        with no_grad():
            batched = embed_images(tiny_model, [], tiny_images, grids, sparse_mode=True).data
            single = [embed_images(tiny_model, [], tiny_images[i:i + 1], grids[i:i + 1], sparse_mode=True).data[0]
                      for i in range(6)]
        np.testing.assert_allclose(batched, np.stack(single), atol=1e-5)

    def test_empty_mask(self, tiny_model, tiny_images):
        grids = np.ones((6, 4, 4), dtype=bool)
        grids[2] = False
        with pytest.raises(CountError):
            embed_images(tiny_model, [], tiny_images, grids, sparse_mode=True)

    def test_first_layer_attention_selection(self, tiny_model, tiny_images):
        grids = np.zeros((6, 4, 4), dtype=bool)
        grids[:, :2, :] = True
        with no_grad():
            out = embed_images(tiny_model, [], tiny_images, grids, sparse_mode=True,
                               token_selection="first_layer_attention")
        assert out.shape == (6, 16)
        with pytest.raises(ConfigError):
            embed_images(tiny_model, [], tiny_images, grids, sparse_mode=True, token_selection="random")

    def test_dense_mode_ignores_masks(self, tiny_model, tiny_images):
        grids = np.zeros((6, 4, 4), dtype=bool)
        grids[:, 0, 0] = True
        with no_grad():
            plain = embed_images(tiny_model, [], tiny_images).data
            masked = embed_images(tiny_model, [], tiny_images, grids, sparse_mode=False).data
        np.testing.assert_array_equal(plain, masked)

    def test_embed_support_counts(self, tiny_model, tiny_cfg):
        task = make_task(["a", "b"], "t", seed=1, k=2, q=1)
        meta = new_meta_lora(tiny_model, rank=2, seed=0)
        with no_grad():
            protos = embed_support(tiny_model, meta, task.support_images, task.support_labels, 2)
        assert protos.centers.shape == (2, tiny_cfg.embed_dim)


class TestDistill:
    def test_class_mismatch(self, tiny_model, teachers):
        meta = new_meta_lora(tiny_model, rank=2, seed=0)
        task = make_task(["x", "y"], "t000", seed=3)
        with pytest.raises(LabelError):
            distill_step(tiny_model, meta, teachers[0].adapter, teachers[0].head, task,
                         Optimizer(meta.parameters()))

    def test_teacher_and_backbone_untouched(self, tiny_model, teachers, cache):
        entry = teachers[0]
        before = (tiny_model.digest(), entry.adapter.digest(), entry.head.digest())
        meta = new_meta_lora(tiny_model, rank=2, seed=0)
        start = meta.digest()
        distill_step(tiny_model, meta, entry.adapter, entry.head, cache[entry.teacher_id][0],
                     Optimizer(meta.parameters(), learning_rate=0.01))
        assert (tiny_model.digest(), entry.adapter.digest(), entry.head.digest()) == before
        assert meta.digest() != start

    def test_uniform_teacher_loss_is_nonnegative(self, tiny_model, tiny_cfg, teachers, cache):
        head = zero_head(tiny_cfg.embed_dim, list(teachers[0].head.labels))
        meta = new_meta_lora(tiny_model, rank=2, seed=0)
        task = cache["t000"][0]
        np.testing.assert_allclose(teacher_probs(tiny_model, teachers[0].adapter, head, task.query_images), 0.5,
                                   atol=1e-6)
        loss = distill_step(tiny_model, meta, teachers[0].adapter, head, task, Optimizer(meta.parameters()))
        assert loss >= 0.0

    def test_entire_backbone_trains_a_copy(self, tiny_model, teachers, cache):
        meta = new_meta_lora(tiny_model, rank=2, seed=0, entire_backbone=True)
        assert meta.backbone is not tiny_model
        model_digest, copy_digest = tiny_model.digest(), meta.backbone.digest()
        assert model_digest == copy_digest
        distill_step(tiny_model, meta, teachers[0].adapter, teachers[0].head, cache["t000"][0],
                     Optimizer(meta.parameters(), learning_rate=0.01))
        assert tiny_model.digest() == model_digest
        assert meta.backbone.digest() != copy_digest


    def test_matching_teacher_is_a_fixed_point(self, float64, tiny_cfg):
        model = ViTModel(tiny_cfg, seed=3)
        task = make_task(["a", "b"], "t", seed=8)
        with no_grad():
            support = embed_images(model, [], task.support_images)
            centers = prototypes_from(support, task.support_labels, 2).centers.data
        # x.W + b equals -||x - c||^2 up to a per-row constant
        head = ClassificationHead(weight=Tensor(2.0 * centers.T), bias=Tensor(-(centers ** 2).sum(axis=1)),
                                  labels=["a", "b"])
        teacher = new_adapter(tiny_cfg, rank=2, seed=1)
        meta = new_meta_lora(model, rank=2, seed=0)
        start = [p.data.copy() for p in meta.parameters()]
        opt = Optimizer(meta.parameters(), kind="sgd", learning_rate=0.1)
        loss = distill_step(model, meta, teacher, head, task, opt, distance="squared")
        assert abs(loss) < 1e-9
        assert max(float(np.abs(p.grad).max()) for p in meta.parameters()) < 1e-9
        for p, before in zip(meta.parameters(), start):
            np.testing.assert_allclose(p.data, before, atol=1e-9)
    @pytest.mark.slow
    def test_loss_decreases(self, tiny_model, tiny_cfg):
        improved = 0
        for seed in range(10):
            entry = make_teacher(tiny_cfg, "t", ["a", "b"], seed=seed)
            task = make_task(["a", "b"], "t", seed=100 + seed)
            meta = new_meta_lora(tiny_model, rank=2, seed=seed)
            opt = Optimizer(meta.parameters(), learning_rate=0.01)
            losses = [distill_step(tiny_model, meta, entry.adapter, entry.head, task, opt) for _ in range(50)]
            improved += np.mean(losses[-5:]) < np.mean(losses[:5])
        assert improved >= 9


class TestInterpolation:
    @pytest.fixture
    def dog_tasks(self):
        return [make_task(["husky", "sparrow"], "lora_a", seed=1),
                make_task(["golden retriever", "wild horse"], "lora_b", seed=2)]

    def test_every_draw_mixes_sources(self, dog_tasks):
        seen = set()
        for seed in range(1000):
            task = interpolate_task(dog_tasks, N=2, K=1, Q=3, seed=seed)
            assert len(set(task.sources)) == 2
            assert len(set(task.class_names)) == 2
            seen.add(frozenset(task.class_names))
        assert frozenset({"husky", "golden retriever"}) in seen

    def test_relabels_and_sizes(self, dog_tasks):
        task = interpolate_task(dog_tasks, N=2, K=1, Q=2, seed=7)
        np.testing.assert_array_equal(task.support_labels, [0, 1])
        np.testing.assert_array_equal(task.query_labels, [0, 0, 1, 1])

    def test_single_source(self, dog_tasks):
        with pytest.raises(CountError):
            interpolate_task(dog_tasks[:1], N=2, K=1, Q=1, seed=0)
        same = [dog_tasks[0], make_task(["owl", "cat"], "lora_a", seed=5)]
        with pytest.raises(CountError):
            interpolate_task(same, N=2, K=1, Q=1, seed=0)
        assert interpolate_task(same, N=2, K=1, Q=1, seed=0, allow_same_source=True).n_way == 2

    def test_too_few_classes(self, dog_tasks):
        with pytest.raises(CountError):
            interpolate_task(dog_tasks, N=5, K=1, Q=1, seed=0)

    def test_pool_too_small(self, dog_tasks):
        with pytest.raises(CountError):
            interpolate_task(dog_tasks, N=2, K=2, Q=3, seed=0)

    def test_matching_query_beats_chance(self, tiny_model, rng):
        images = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
        masks = np.ones((2, 4, 4), dtype=bool)
        task = GeneratedTask(images, masks, np.array([0, 1]), images.copy(), masks.copy(), np.array([0, 1]),
                             ["a", "b"], ["s", "t"])
        meta = new_meta_lora(tiny_model, rank=2, seed=0)
        loss = interpolation_step(tiny_model, meta, task, Optimizer(meta.parameters()))
        assert loss < math.log(2)

    def test_relabelling_leaves_loss(self, tiny_model, dog_tasks):
        task = interpolate_task(dog_tasks, N=2, K=1, Q=3, seed=3)
        swapped = GeneratedTask(task.support_images, task.support_masks, 1 - task.support_labels,
                                task.query_images, task.query_masks, 1 - task.query_labels,
                                task.class_names[::-1], task.sources[::-1], task.k_shot, task.q_query)
        losses = []
        for t in (task, swapped):
            meta = new_meta_lora(tiny_model, rank=2, seed=0)
            losses.append(interpolation_step(tiny_model, meta, t, Optimizer(meta.parameters())))
        assert losses[0] == pytest.approx(losses[1], rel=1e-5)

    @pytest.mark.slow
    def test_loss_decreases(self, tiny_model):
        improved = 0
        for seed in range(10):
            pool = [make_task(["husky", "sparrow"], "lora_a", seed=200 + seed),
                    make_task(["golden retriever", "wild horse"], "lora_b", seed=300 + seed)]
            task = interpolate_task(pool, N=2, K=1, Q=3, seed=seed)
            meta = new_meta_lora(tiny_model, rank=2, seed=seed)
            opt = Optimizer(meta.parameters(), learning_rate=0.01)
            losses = [interpolation_step(tiny_model, meta, task, opt) for _ in range(50)]
            improved += np.mean(losses[-5:]) < np.mean(losses[:5])
        assert improved >= 9


class TestTrainer:
    def _cfg(self, **kwargs):
        base = dict(iterations=6, n_way=2, k_shot=1, q_query=3, rank=2, seed=4)
        base.update(kwargs)
        return MetaTrainConfig(**base)

    def test_distill_only(self, tiny_model, teachers, cache):
        result = meta_train(tiny_model, teachers, cache, self._cfg(p_interp=0.0))
        assert set(result.branches()) == {BRANCH_DISTILL}
        assert all(r["teacher"] in {"t000", "t001", "t002"} for r in result.log)

    def test_interpolate_only(self, tiny_model, teachers, cache):
        result = meta_train(tiny_model, teachers, cache, self._cfg(p_interp=1.0))
        assert set(result.branches()) == {BRANCH_INTERPOLATE}

    def test_log_file(self, tiny_model, teachers, cache, tmp_path):
        path = str(tmp_path / "meta.jsonl")
        result = meta_train(tiny_model, teachers, cache, self._cfg(p_interp=0.5), log_path=path)
        records = read_log(path)
        assert len(records) == 6
        assert set(records[0]) == {"iteration", "branch", "teacher", "loss", "lr", "flops", "wall_time"}
        assert [r["loss"] for r in records] == [r["loss"] for r in result.log]
        with open(path) as f:
            assert all(json.loads(line)["flops"] > 0 for line in f)

    def test_deterministic(self, tiny_model, teachers, cache):
        first = meta_train(tiny_model, teachers, cache, self._cfg(p_interp=0.5))
        second = meta_train(tiny_model, teachers, cache, self._cfg(p_interp=0.5))
        assert first.meta.digest() == second.meta.digest()
        assert [r["loss"] for r in first.log] == [r["loss"] for r in second.log]

    def test_schedule_is_applied(self, tiny_model, teachers, cache):
        result = meta_train(tiny_model, teachers, cache, self._cfg(p_interp=0.0))
        assert result.log[0]["lr"] == pytest.approx(1e-5)
        assert result.log[1]["lr"] > result.log[0]["lr"]

    def test_missing_tasks_without_generation(self, tiny_model, teachers, cache):
        cache = dict(cache, t001=[])
        with pytest.raises(PipelineStateError):
            meta_train(tiny_model, teachers, cache, self._cfg())

    def test_generation_fills_empty_cache(self, tiny_model, teachers, cache):
        calls = []

        def generate(entry):
            calls.append(entry.teacher_id)
            return make_task(entry.head.labels, entry.teacher_id, seed=99)

        meta_train(tiny_model, teachers, dict(cache, t001=[]), self._cfg(iterations=2), generate=generate)
        assert calls == ["t001"]

    def test_interpolation_needs_two_teachers(self, tiny_model, teachers, cache):
        with pytest.raises(PipelineStateError):
            meta_train(tiny_model, teachers[:1], cache, self._cfg(p_interp=1.0))

    def test_no_teachers(self, tiny_model):
        with pytest.raises(PipelineStateError):
            meta_train(tiny_model, [], {}, self._cfg())

    def test_sparse_first_layer_attention(self, tiny_model, teachers):
        grids = np.zeros((8, 4, 4), dtype=bool)
        grids[:, 1:3, :] = True
        sparse_cache = {t.teacher_id: [make_task(t.head.labels, t.teacher_id, seed=i, masks=grids)]
                        for i, t in enumerate(teachers)}
        for selection in ("mask", "first_layer_attention"):
            result = meta_train(tiny_model, teachers, sparse_cache,
                                self._cfg(sparse=True, token_selection=selection, iterations=3))
            assert all(math.isfinite(r["loss"]) for r in result.log)

    def test_mixed_rank_pool_inverts_and_distils(self, tiny_model, tiny_cfg):
        entries = []
        for i, rank in enumerate(teacher_ranks([2, 4], 4)):
            entry = make_teacher(tiny_cfg, f"t{i:03d}", [f"c{2 * i}", f"c{2 * i + 1}"], seed=i)
            adapter = new_adapter(tiny_cfg, rank=rank, seed=i)
            gen = np.random.default_rng(i + 50)
            for _, b in adapter.sites.values():
                b.data = gen.normal(0.0, 0.3, b.shape).astype(b.dtype)
            entries.append(TeacherEntry(entry.teacher_id, adapter, entry.head))
        assert [e.adapter.rank for e in entries] == [2, 4, 2, 4]

        inv = InversionConfig(iterations=3, images_per_class=4, alpha_r=0.0, plan=PrunePlan.parse("0:0.5"))
        tasks = {}
        for e in entries:
            result = invert(e.adapter, e.head, tiny_model, inv)
            tasks[e.teacher_id] = [build_task(result.images, result.mask_grids, result.labels, N=2, K=1, Q=3,
                                              class_names=e.head.labels, source=e.teacher_id)]
        result = meta_train(tiny_model, entries, tasks, self._cfg(p_interp=0.5, iterations=8, sparse=True))
        assert result.meta.adapter.rank == 2
        assert {r["teacher"] for r in result.log if r["branch"] == BRANCH_DISTILL} <= set(tasks)
        assert all(math.isfinite(r["loss"]) for r in result.log)

    def test_layer_subset(self, tiny_model, teachers, cache):
        result = meta_train(tiny_model, teachers, cache, self._cfg(trainable_layers="last_half", iterations=2))
        assert result.meta.adapter.layers == [1]

    @pytest.mark.parametrize("kwargs", [{"p_interp": 1.5}, {"iterations": 0}, {"distance": "cosine"},
                                        {"token_selection": "random"}, {"rank": 0}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ConfigError):
            self._cfg(**kwargs)

    def test_from_settings(self, tiny_settings):
        cfg = MetaTrainConfig.from_settings(tiny_settings, seed=9)
        assert (cfg.iterations, cfg.q_query, cfg.rank, cfg.seed) == (4, 3, 2, 9)


class TestFlipAndFlops:
    def test_flip_moves_masks_with_images(self, rng):
        grids = rng.random((8, 4, 4)) > 0.5
        task = make_task(["a", "b"], "t", seed=1, masks=grids)
        flipped = flip_task(task, np.random.default_rng(0))
        np.testing.assert_array_equal(flipped.support_labels, task.support_labels)
        for before, after, m_before, m_after in zip(task.query_images, flipped.query_images,
                                                    task.query_masks, flipped.query_masks):
            if np.array_equal(before, after):
                np.testing.assert_array_equal(m_after, m_before)
            else:
                np.testing.assert_array_equal(after, before[..., ::-1])
                np.testing.assert_array_equal(m_after, m_before[..., ::-1])

    def test_dense_step_flops(self, tiny_model, tiny_cfg):
        task = make_task(["a", "b"], "t", seed=1)
        assert step_flops(tiny_model, task, sparse=False) == 8 * training_flops(tiny_cfg, dense_seq_lengths(tiny_cfg))

    def test_sparse_step_flops_follow_the_formula(self, tiny_model, tiny_cfg):
        grids = np.zeros((8, 4, 4), dtype=bool)
        grids[:, 0, :] = True
        task = make_task(["a", "b"], "t", seed=1, masks=grids)
        expected = 8 * training_flops(tiny_cfg, [5] * tiny_cfg.depth, image_tokens=4)
        assert step_flops(tiny_model, task, sparse=True) == expected

    def test_quarter_of_the_tokens_cuts_flops_by_three_quarters(self):
        grids = np.zeros((4, 14, 14), dtype=bool)
        grids.reshape(4, -1)[:, :49] = True
        task = build_task(np.zeros((4, 1)), grids, [0, 1, 0, 1], N=2, K=1, Q=1)
        model = SimpleNamespace(cfg=VIT_B)
        delta = relative_delta(step_flops(model, task, sparse=True), step_flops(model, task, sparse=False))
        assert abs(delta - (-74.0)) <= 2.0

    def test_desk_backbone_quarter_of_the_tokens(self):
        cfg = ViTConfig.from_settings(DEFAULT_SETTINGS)
        assert cfg.grid_size == 6
        grids = np.zeros((4, 6, 6), dtype=bool)
        grids.reshape(4, -1)[:, :9] = True
        task = build_task(np.zeros((4, 1)), grids, [0, 1, 0, 1], N=2, K=1, Q=1)
        model = SimpleNamespace(cfg=cfg)
        delta = relative_delta(step_flops(model, task, sparse=True), step_flops(model, task, sparse=False))
        assert abs(delta - (-74.0)) <= 2.0

    @pytest.mark.slow
    def test_sparse_desk_step_is_faster(self):
        cfg = ViTConfig.from_settings(DEFAULT_SETTINGS)
        model = ViTModel(cfg, seed=0)
        model.freeze()
        entry = make_teacher(cfg, "t", ["a", "b"], seed=1)
        grids = np.zeros((64, 6, 6), dtype=bool)
        grids.reshape(64, -1)[:, :9] = True
        task = make_task(["a", "b"], "t", seed=2, q=31, image_size=24, grid=6, masks=grids)

        def best_of(sparse):
            meta = new_meta_lora(model, rank=4, seed=0)
            opt = Optimizer(meta.parameters(), learning_rate=1e-3)
            times = []
            for _ in range(4):
                started = time.perf_counter()
                distill_step(model, meta, entry.adapter, entry.head, task, opt, sparse_mode=sparse)
                times.append(time.perf_counter() - started)
            return min(times)

        assert best_of(False) / best_of(True) >= 1.5


class TestResolveLayers:
    @pytest.mark.parametrize("spec, expected", [("all", list(range(12))), ("last_half", list(range(6, 12))),
                                                ("first_half", list(range(6))), ("0,3", [0, 3]), ([5, 5, 1], [1, 5])])
    def test_forms(self, spec, expected):
        assert resolve_layers(spec, 12) == expected

    @pytest.mark.parametrize("spec", ["12", "a,b", ""])
    def test_rejects(self, spec):
        with pytest.raises(ConfigError):
            resolve_layers(spec, 12)


class TestJoint:
    def test_pool_uses_global_labels(self, cache):
        images, labels, names = pool_tasks(list(cache.values())[0] + list(cache.values())[1])
        assert names == ["c0", "c1", "c2", "c3"]
        assert len(images) == 16 and set(labels.tolist()) == {0, 1, 2, 3}

    def test_trains_adapter_and_head(self, tiny_model, cache):
        tasks = [task for tasks in cache.values() for task in tasks]
        adapter, head = joint_train(tiny_model, tasks, JointConfig(rank=2, steps=3, batch_size=8, seed=1))
        assert head.labels == ["c0", "c1", "c2", "c3", "c4", "c5"]
        assert adapter.metadata["kind"] == "joint"

    def test_needs_tasks(self, tiny_model):
        with pytest.raises(CountError):
            joint_train(tiny_model, [], JointConfig())
