"""FLOPs tables for pruning plans and sparse ratios."""

import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from model.flops import flops_estimate, relative_delta, sparse_seq_lengths, training_flops
from model.pruning import PrunePlan, keep_count, plan_seq_lengths
from model.vit import ViTConfig, ViTModel
from tensor.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class FlopsRow:
    label: str
    flops: int
    train_flops: int
    delta: float
    throughput: Optional[float] = None


def _measure(model: ViTModel, plan: Optional[PrunePlan], positions: Optional[np.ndarray], batch: int,
             repeats: int, seed: int) -> float:
    """Images per second through a forward pass."""
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    images = Tensor(rng.standard_normal((batch, cfg.channels, cfg.image_size, cfg.image_size)))
    with no_grad():
        model.embed(images, plan=plan, positions=positions)
        started = time.perf_counter()
        for _ in range(repeats):
            model.embed(images, plan=plan, positions=positions)
        elapsed = time.perf_counter() - started
    return batch * repeats / elapsed if elapsed > 0 else float("inf")


def report_flops_table(cfg: ViTConfig, plans: Sequence[PrunePlan] = (), sparse_ratios: Sequence[float] = (),
                       model: Optional[ViTModel] = None, batch: int = 16, repeats: int = 3,
                       seed: int = 0) -> List[FlopsRow]:
    """Analytical FLOPs per plan and per sparse ratio, each against the unpruned row.

    With a ``model`` of the same shape, measured forward throughput is added.
    """
    base = flops_estimate(cfg, plan_seq_lengths(cfg.depth, cfg.num_patches))
    base_train = training_flops(cfg, plan_seq_lengths(cfg.depth, cfg.num_patches))
    rows = [FlopsRow("{}", base, base_train, 0.0)]

    for plan in plans:
        if plan.is_empty():
            continue
        plan.validate(cfg.depth)
        seq = plan_seq_lengths(cfg.depth, cfg.num_patches, plan)
        value = flops_estimate(cfg, seq)
        rows.append(FlopsRow(plan.label(), value, training_flops(cfg, seq), relative_delta(value, base)))

    for ratio in sparse_ratios:
        seq = sparse_seq_lengths(cfg, ratio)
        kept = keep_count(cfg.num_patches, 1.0 - ratio)
        value = flops_estimate(cfg, seq)
        rows.append(FlopsRow(f"sparse {ratio:g}", value, training_flops(cfg, seq, image_tokens=kept),
                             relative_delta(value, base)))

    if model is not None:
        rows[0].throughput = _measure(model, None, None, batch, repeats, seed)
        index = 1
        for plan in plans:
            if plan.is_empty():
                continue
            rows[index].throughput = _measure(model, plan, None, batch, repeats, seed)
            index += 1
        rng = np.random.default_rng(seed)
        for ratio in sparse_ratios:
            kept = keep_count(cfg.num_patches, 1.0 - ratio)
            positions = np.sort(np.stack([rng.permutation(cfg.num_patches)[:kept] for _ in range(batch)]), axis=1)
            rows[index].throughput = _measure(model, None, positions, batch, repeats, seed)
            index += 1
    return rows
