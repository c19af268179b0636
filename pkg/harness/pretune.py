"""Supervised training: the desk backbone and the teacher LoRAs built on it."""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from tqdm import tqdm

from harness.toy_data import ToyDataset
from lora.adapter import LoRAAdapter, new_adapter
from lora.head import ClassificationHead, new_head
from model.vit import ViTModel
from tensor.functional import cross_entropy
from tensor.optim import Optimizer
from tensor.tensor import Tensor, no_grad
from utils.constants import PretrainTarget
from utils.errors import ConfigError, TrainingFailedError

logger = logging.getLogger(__name__)

# A tuned teacher must beat chance by this margin
CHANCE_MARGIN = 0.10
EVAL_EVERY = 10


@dataclass
class PretuneResult:
    adapter: LoRAAdapter
    head: ClassificationHead
    accuracy: float
    steps: int


def accuracy(model: ViTModel, adapters, head: ClassificationHead, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> float:
    correct = 0
    with no_grad():
        for start in range(0, len(images), batch_size):
            out = model.embed(Tensor(images[start:start + batch_size]), adapters=adapters)
            predicted = head(out.cls_embedding).data.argmax(axis=1)
            correct += int((predicted == labels[start:start + batch_size]).sum())
    return correct / max(1, len(images))


def pretrain_backbone(model: ViTModel, dataset: ToyDataset, steps: int, lr: float, batch_size: int,
                      seed: int = 0, progress: bool = False, target: str = PretrainTarget.CLASS.value) -> float:
    """Briefly train every backbone weight on the meta-train split, then freeze it.

    ``target`` picks the labels: the split's classes, or the coarse per-image
    shape color, which leaves the class-relevant features for the adapters.
    Returns the final training accuracy of the throwaway classification head.
    """
    if steps < 0 or batch_size < 1:
        raise ConfigError("pretraining steps must be nonnegative and batch_size positive")
    if target == PretrainTarget.CLASS.value:
        names, labels = dataset.class_names, dataset.labels
    elif target == PretrainTarget.COLOR.value:
        names, labels = dataset.spec.color_names, dataset.colors
    else:
        raise ConfigError(f"unknown pretraining target {target!r}; use class or color")
    rng = np.random.default_rng(seed)
    head = new_head(model.cfg.embed_dim, names, seed=seed)
    model.unfreeze()
    opt = Optimizer(model.parameters() + head.parameters(), learning_rate=lr)
    for _ in tqdm(range(steps), desc="backbone", disable=not progress, leave=False):
        batch = rng.choice(len(dataset.images), size=min(batch_size, len(dataset.images)), replace=False)
        opt.zero_grad()
        out = model.embed(Tensor(dataset.images[batch]))
        loss = cross_entropy(head(out.cls_embedding), labels[batch])
        loss.backward()
        opt.step()
    model.freeze()
    acc = accuracy(model, [], head, dataset.images, labels)
    logger.info("Pretrained backbone on %s labels for %d steps (train accuracy %.1f%%)", target, steps, 100 * acc)
    return acc


def pretune_teacher(model: ViTModel, dataset: ToyDataset, class_names: Sequence[str], seed: int, rank: int = 4,
                    lr: float = 1e-3, max_steps: int = 300, target_accuracy: float = 0.95, batch_size: int = 32,
                    progress: bool = False, teacher_id: str = "") -> PretuneResult:
    """Tune a LoRA + head on a class subset with the backbone frozen.

    Stops once training accuracy reaches ``target_accuracy`` or after
    ``max_steps``; a teacher that never beats chance signals a broken setup.
    """
    if len(class_names) < 2:
        raise ConfigError(f"a teacher needs at least 2 classes, got {len(class_names)}")
    images, labels = dataset.subset(class_names)
    rng = np.random.default_rng(seed)
    adapter = new_adapter(model.cfg, rank=rank, seed=seed,
                          metadata={"teacher_id": teacher_id, "classes": list(class_names)})
    head = new_head(model.cfg.embed_dim, class_names, seed=seed)
    opt = Optimizer(adapter.parameters() + head.parameters(), learning_rate=lr)

    acc, step = 0.0, 0
    for step in tqdm(range(1, max_steps + 1), desc=f"teacher {teacher_id}", disable=not progress, leave=False):
        batch = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        opt.zero_grad()
        out = model.embed(Tensor(images[batch]), adapters=[adapter])
        loss = cross_entropy(head(out.cls_embedding), labels[batch])
        loss.backward()
        opt.step()
        if step % EVAL_EVERY == 0 or step == max_steps:
            acc = accuracy(model, [adapter], head, images, labels)
            if acc >= target_accuracy:
                break

    chance = 1.0 / len(class_names)
    if acc <= chance + CHANCE_MARGIN:
        raise TrainingFailedError(
            f"teacher {teacher_id or class_names} reached only {100 * acc:.1f}% after {step} steps "
            f"(chance is {100 * chance:.1f}%); check the toy dataset settings")
    logger.info("Tuned teacher %s on %s: %.1f%% after %d steps", teacher_id, list(class_names), 100 * acc, step)
    return PretuneResult(adapter=adapter, head=head, accuracy=acc, steps=step)


def teacher_class_subsets(class_names: Sequence[str], count: int, ways: int, seed: int = 0) -> list:
    """``count`` random ``ways``-class subsets of the meta-train classes."""
    if ways > len(class_names):
        raise ConfigError(f"teachers need {ways} classes; only {len(class_names)} exist")
    rng = np.random.default_rng(seed)
    return [[class_names[i] for i in rng.choice(len(class_names), size=ways, replace=False)] for _ in range(count)]


def teacher_ranks(ranks: Sequence[int], count: int) -> list:
    """Rank of each of ``count`` teachers, cycling through ``ranks``.

    ``[4, 8]`` gives a pool that is half rank 4 and half rank 8.
    """
    if isinstance(ranks, int):
        ranks = [ranks]
    if not ranks or any(not isinstance(r, int) or isinstance(r, bool) or r < 1 for r in ranks):
        raise ConfigError(f"teacher ranks must be a non-empty list of positive integers, got {ranks!r}")
    return [ranks[i % len(ranks)] for i in range(count)]
