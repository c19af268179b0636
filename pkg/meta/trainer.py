"""The outer meta-training loop: distillation steps mixed with interpolation steps."""

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from inversion.tasks import GeneratedTask
from lora.adapter import LoRAAdapter
from lora.head import ClassificationHead
from meta.distill import distill_step
from meta.interpolation import interpolate_task, interpolation_step
from meta.meta_lora import MetaLoRA, new_meta_lora
from model.flops import dense_seq_lengths, training_flops
from model.pruning import PrunePlan, plan_seq_lengths
from model.vit import ViTModel
from tensor.optim import Optimizer
from tensor.schedule import LrSchedule, lr_at
from utils.constants import DEFAULT_RANK, SparseSelection
from utils.errors import ConfigError, PipelineStateError

logger = logging.getLogger(__name__)

BRANCH_DISTILL = "distill"
BRANCH_INTERPOLATE = "interpolate"


@dataclass
class TeacherEntry:
    teacher_id: str
    adapter: LoRAAdapter
    head: ClassificationHead


@dataclass
class MetaTrainConfig:
    iterations: int = 300
    p_interp: float = 0.3
    n_way: int = 2
    k_shot: int = 1
    q_query: int = 15
    rank: int = DEFAULT_RANK
    sparse: bool = False
    token_selection: str = SparseSelection.MASK.value
    trainable_layers: object = "all"
    entire_backbone: bool = False
    distance: str = "euclidean"
    flip: bool = True
    schedule: LrSchedule = field(default_factory=LrSchedule)
    optimizer: str = "adam"
    seed: int = 0
    progress: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p_interp <= 1.0:
            raise ConfigError(f"p_interp must lie in [0, 1], got {self.p_interp}")
        if self.iterations < 1 or min(self.n_way, self.k_shot, self.q_query, self.rank) < 1:
            raise ConfigError("iterations, N, K, Q and rank must all be positive")
        if self.distance not in ("euclidean", "squared"):
            raise ConfigError(f"unknown distance {self.distance!r}")
        if self.token_selection not in {s.value for s in SparseSelection}:
            raise ConfigError(f"unknown token selection {self.token_selection!r}")

    @classmethod
    def from_settings(cls, settings: Dict, seed: int = 0) -> "MetaTrainConfig":
        m = settings["meta"]
        return cls(
            iterations=m["iterations"],
            p_interp=m["p_interp"],
            n_way=m["n_way"],
            k_shot=m["k_shot"],
            q_query=m["q_query"],
            rank=m["rank"],
            sparse=m["sparse"],
            token_selection=m["token_selection"],
            trainable_layers=m["trainable_layers"],
            entire_backbone=m["entire_backbone"],
            distance=m["distance"],
            flip=m["flip"],
            schedule=LrSchedule(mode=m["lr_mode"]),
            seed=seed,
            progress=settings["runtime"]["progress"],
        )


@dataclass
class MetaTrainResult:
    meta: MetaLoRA
    log: List[Dict] = field(default_factory=list)

    def branches(self) -> List[str]:
        return [record["branch"] for record in self.log]


def flip_task(task: GeneratedTask, rng: np.random.Generator) -> GeneratedTask:
    """Random horizontal flip of each image, with its mask flipped alongside."""

    def flip(images, masks):
        images, masks = images.copy(), masks.copy()
        chosen = rng.random(len(images)) < 0.5
        images[chosen] = images[chosen][..., ::-1]
        masks[chosen] = masks[chosen][..., ::-1]
        return images, masks

    s_img, s_mask = flip(task.support_images, task.support_masks)
    q_img, q_mask = flip(task.query_images, task.query_masks)
    return GeneratedTask(s_img, s_mask, task.support_labels, q_img, q_mask, task.query_labels,
                         list(task.class_names), list(task.sources), task.k_shot, task.q_query)


def step_flops(model: ViTModel, task: GeneratedTask, sparse: bool,
               token_selection: str = SparseSelection.MASK.value) -> int:
    """Student forward+backward FLOPs over every support and query image of a step."""
    cfg = model.cfg
    n = cfg.num_patches
    masks = np.concatenate([task.support_masks, task.query_masks])
    total = 0
    for grid in masks:
        kept = int(grid.sum())
        if not sparse or kept == n:
            total += training_flops(cfg, dense_seq_lengths(cfg))
        elif token_selection == SparseSelection.FIRST_LAYER_ATTENTION.value:
            seq = plan_seq_lengths(cfg.depth, n, PrunePlan({0: kept / n}))
            total += training_flops(cfg, seq)
        else:
            total += training_flops(cfg, [kept + 1] * cfg.depth, image_tokens=kept)
    return total


def _choose_task(tasks: Sequence[GeneratedTask], rng: np.random.Generator) -> GeneratedTask:
    return tasks[int(rng.integers(len(tasks)))]


def meta_train(model: ViTModel, teachers: Sequence[TeacherEntry], task_cache: Dict[str, List[GeneratedTask]],
               cfg: MetaTrainConfig, log_path: Optional[str] = None,
               generate: Optional[Callable[[TeacherEntry], GeneratedTask]] = None) -> MetaTrainResult:
    """Distill a meta-LoRA from the teachers' generated tasks.

    Each outer iteration runs an interpolation step with probability
    ``p_interp`` and otherwise a distillation step against a uniformly sampled
    teacher. ``generate`` fills in tasks for teachers with an empty cache.
    """
    if not teachers:
        raise PipelineStateError("meta-training needs at least one teacher")
    cache = {t.teacher_id: list(task_cache.get(t.teacher_id, [])) for t in teachers}
    for entry in teachers:
        if not cache[entry.teacher_id]:
            if generate is None:
                raise PipelineStateError(f"no cached tasks for teacher {entry.teacher_id} and generation is disabled")
            cache[entry.teacher_id].append(generate(entry))

    rng = np.random.default_rng(cfg.seed)
    meta = new_meta_lora(model, cfg.rank, cfg.seed, cfg.trainable_layers, cfg.entire_backbone)
    opt = Optimizer(meta.parameters(), kind=cfg.optimizer, learning_rate=cfg.schedule.peak)
    all_tasks = [task for entry in teachers for task in cache[entry.teacher_id]]
    can_interpolate = len({s for task in all_tasks for s in task.sources}) >= 2

    log: List[Dict] = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for it in tqdm(range(cfg.iterations), desc="meta-train", disable=not cfg.progress, leave=False):
            started = time.perf_counter()
            opt.learning_rate = lr_at(cfg.schedule, it)
            interpolate = rng.random() < cfg.p_interp
            if interpolate and not can_interpolate:
                raise PipelineStateError("interpolation needs tasks from at least two teachers")

            if interpolate:
                task = interpolate_task(all_tasks, cfg.n_way, cfg.k_shot, cfg.q_query, seed=int(rng.integers(2 ** 31)))
                if cfg.flip:
                    task = flip_task(task, rng)
                loss = interpolation_step(model, meta, task, opt, cfg.sparse, cfg.distance, cfg.token_selection)
                branch, teacher_id = BRANCH_INTERPOLATE, None
            else:
                entry = teachers[int(rng.integers(len(teachers)))]
                task = _choose_task(cache[entry.teacher_id], rng)
                if cfg.flip:
                    task = flip_task(task, rng)
                loss = distill_step(model, meta, entry.adapter, entry.head, task, opt, cfg.sparse, cfg.distance,
                                    cfg.token_selection)
                branch, teacher_id = BRANCH_DISTILL, entry.teacher_id

            record = {
                "iteration": it,
                "branch": branch,
                "teacher": teacher_id,
                "loss": loss,
                "lr": opt.learning_rate,
                "flops": step_flops(model, task, cfg.sparse, cfg.token_selection),
                "wall_time": time.perf_counter() - started,
            }
            log.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()

    logger.info("Meta-trained %d iterations (%d interpolation steps)", cfg.iterations,
                sum(r["branch"] == BRANCH_INTERPOLATE for r in log))
    return MetaTrainResult(meta=meta, log=log)


def read_log(path: str) -> List[Dict]:
    with open(path, "r") as f:
        return [json.loads(line) for line in f if line.strip()]
