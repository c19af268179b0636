"""Joint supervised baseline: one LoRA + head over every teacher's generated data."""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from inversion.tasks import GeneratedTask
from lora.adapter import LoRAAdapter, new_adapter
from lora.head import ClassificationHead, new_head
from model.vit import ViTModel
from tensor.functional import cross_entropy
from tensor.optim import Optimizer
from tensor.tensor import Tensor
from utils.constants import DEFAULT_RANK, PEAK_LR
from utils.errors import CountError

logger = logging.getLogger(__name__)


@dataclass
class JointConfig:
    rank: int = DEFAULT_RANK
    lr: float = PEAK_LR
    steps: int = 200
    batch_size: int = 32
    seed: int = 0
    progress: bool = False


def pool_tasks(tasks: Sequence[GeneratedTask]) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """All images from all tasks under global labels (sorted class names)."""
    if not tasks:
        raise CountError("joint training needs at least one task")
    names = sorted({name for task in tasks for name in task.class_names})
    index = {name: i for i, name in enumerate(names)}
    images, labels = [], []
    for task in tasks:
        for split_images, split_labels in ((task.support_images, task.support_labels),
                                           (task.query_images, task.query_labels)):
            images.append(split_images)
            labels.extend(index[task.class_names[l]] for l in split_labels)
    return np.concatenate(images), np.asarray(labels, dtype=np.int64), names


def joint_train(model: ViTModel, tasks: Sequence[GeneratedTask], cfg: JointConfig) -> Tuple[LoRAAdapter, ClassificationHead]:
    images, labels, names = pool_tasks(tasks)
    if len(names) < 2:
        raise CountError("joint training needs at least two classes")
    adapter = new_adapter(model.cfg, cfg.rank, cfg.seed, metadata={"kind": "joint"})
    head = new_head(model.cfg.embed_dim, names, seed=cfg.seed)
    opt = Optimizer(adapter.parameters() + head.parameters(), learning_rate=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    for _ in tqdm(range(cfg.steps), desc="joint", disable=not cfg.progress, leave=False):
        batch = rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
        opt.zero_grad()
        out = model.embed(Tensor(images[batch]), adapters=[adapter])
        loss = cross_entropy(head(out.cls_embedding), labels[batch])
        loss.backward()
        opt.step()
    logger.info("Joint baseline trained on %d images over %d classes", len(images), len(names))
    return adapter, head
