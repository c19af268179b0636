"""LoRA inversion: synthesize a labelled batch by gradient descent on the input.

The backbone, adapter and head are frozen; only the images X move. Each
iteration minimizes CE(h(f_lora(X)), Y) + alpha_r * stat_penalty(X), optionally
with token pruning in the forward pass.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from inversion.masks import TokenMask, pixel_mask, stack_masks
from inversion.regularizer import StatRegularizer, stat_penalty
from lora.adapter import LoRAAdapter, check_compatible
from lora.head import ClassificationHead
from model.pruning import PrunePlan
from model.vit import ViTModel
from tensor.functional import cross_entropy
from tensor.optim import Optimizer
from tensor.tensor import Tensor, no_grad
from utils.constants import ALPHA_R, INVERSION_ITERS, INVERSION_LR
from utils.errors import ConfigError, DivergenceError, IncompatibleAdapterError

logger = logging.getLogger(__name__)


@dataclass
class InversionConfig:
    iterations: int = INVERSION_ITERS
    lr: float = INVERSION_LR
    images_per_class: int = 16
    alpha_r: float = ALPHA_R
    plan: PrunePlan = field(default_factory=PrunePlan)
    label_policy: str = "round_robin"
    seed: int = 0
    track_regions: bool = False
    checkpoint_every: int = 50
    progress: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be at least 1, got {self.iterations}")
        if self.images_per_class < 1:
            raise ConfigError(f"images_per_class must be at least 1, got {self.images_per_class}")
        if self.label_policy != "round_robin":
            raise ConfigError(f"unknown label policy {self.label_policy!r}")
        if self.lr <= 0 or self.alpha_r < 0:
            raise ConfigError("inversion lr must be positive and alpha_r nonnegative")

    @classmethod
    def from_settings(cls, settings: Dict, seed: int = 0) -> "InversionConfig":
        section = settings["inversion"]
        return cls(
            iterations=section["iterations"],
            lr=section["lr"],
            images_per_class=section["images_per_class"],
            alpha_r=section["alpha_r"],
            plan=PrunePlan.parse(section["plan"]),
            seed=seed,
            track_regions=section["track_regions"],
            checkpoint_every=section["checkpoint_every"],
            progress=settings["runtime"]["progress"],
        )


@dataclass
class InversionResult:
    images: np.ndarray
    masks: List[TokenMask]
    labels: np.ndarray
    loss_trace: List[float]
    ce_trace: List[float]
    reg_trace: List[float]
    initial_images: Optional[np.ndarray] = None
    # (iteration, foreground CE, background CE)
    region_trace: List[Tuple[int, float, float]] = field(default_factory=list)

    @property
    def mask_grids(self) -> np.ndarray:
        return stack_masks(self.masks)


def round_robin_labels(count: int, num_classes: int) -> np.ndarray:
    return np.arange(count, dtype=np.int64) % num_classes


def _frozen(adapter: LoRAAdapter, head: ClassificationHead) -> Tuple[LoRAAdapter, ClassificationHead]:
    """Detached copies, so gradients can only ever reach the images."""
    frozen_adapter = adapter.clone().requires_grad_(False)
    frozen_head = ClassificationHead(head.weight.detach(), head.bias.detach(), list(head.labels))
    return frozen_adapter, frozen_head


def _ce(model: ViTModel, adapter: LoRAAdapter, head: ClassificationHead, images: np.ndarray, labels: np.ndarray,
        plan: Optional[PrunePlan] = None) -> float:
    with no_grad():
        out = model.embed(Tensor(images), adapters=[adapter], plan=plan)
        return cross_entropy(head(out.cls_embedding), labels).item()


def region_losses(model: ViTModel, adapter: LoRAAdapter, head: ClassificationHead, x0: np.ndarray,
                  xt: np.ndarray, masks: List[TokenMask], labels: np.ndarray) -> Tuple[float, float]:
    """CE of images that keep only the foreground (or background) of ``xt``.

    The foreground image takes the mask-1 patches from ``xt`` and the rest from
    the initial noise ``x0``; the background image swaps the roles.
    """
    patch = model.cfg.patch_size
    keep = np.stack([pixel_mask(m, patch) for m in masks])[:, None, :, :] > 0
    foreground = np.where(keep, xt, x0)
    background = np.where(keep, x0, xt)
    return _ce(model, adapter, head, foreground, labels), _ce(model, adapter, head, background, labels)


def invert(adapter: LoRAAdapter, head: ClassificationHead, model: ViTModel, cfg: InversionConfig,
           reg: Optional[StatRegularizer] = None) -> InversionResult:
    """Optimize a Gaussian-noise batch until the frozen teacher labels it as Y."""
    check_compatible(adapter, model.cfg)
    if head.weight.shape[0] != model.cfg.embed_dim:
        raise IncompatibleAdapterError(f"head expects width {head.weight.shape[0]}, model has {model.cfg.embed_dim}")
    cfg.plan.validate(model.cfg.depth)
    adapter, head = _frozen(adapter, head)

    mc = model.cfg
    batch = cfg.images_per_class * head.num_classes
    labels = round_robin_labels(batch, head.num_classes)
    rng = np.random.default_rng(cfg.seed)
    x0 = rng.standard_normal((batch, mc.channels, mc.image_size, mc.image_size))
    X = Tensor(x0, requires_grad=True, name="X")
    x0 = X.data.copy()
    opt = Optimizer([X], kind="adam", learning_rate=cfg.lr)
    use_reg = reg is not None and cfg.alpha_r > 0

    loss_trace, ce_trace, reg_trace = [], [], []
    region_trace = []
    kept = None
    for it in tqdm(range(cfg.iterations), desc="invert", disable=not cfg.progress, leave=False):
        opt.zero_grad()
        out = model.embed(X, adapters=[adapter], plan=cfg.plan)
        ce = cross_entropy(head(out.cls_embedding), labels)
        loss = ce
        reg_value = 0.0
        if use_reg:
            penalty = stat_penalty(X, reg)
            loss = ce + penalty * cfg.alpha_r
            reg_value = penalty.item()
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"inversion loss became {value} at iteration {it}", iteration=it)
        loss_trace.append(value)
        ce_trace.append(ce.item())
        reg_trace.append(reg_value)
        kept = out.kept_token_positions

        if cfg.track_regions and it % cfg.checkpoint_every == 0:
            masks = _masks_from(out.kept_token_positions, mc.grid_size)
            fg, bg = region_losses(model, adapter, head, x0, X.data, masks, labels)
            region_trace.append((it, fg, bg))

        loss.backward()
        opt.step()

    # kept positions of the final iteration's forward, before its Adam step
    masks = _masks_from(kept, mc.grid_size)
    logger.debug("Inverted %d images: CE %.4f -> %.4f", batch, ce_trace[0], ce_trace[-1])
    return InversionResult(
        images=X.data.copy(),
        masks=masks,
        labels=labels,
        loss_trace=loss_trace,
        ce_trace=ce_trace,
        reg_trace=reg_trace,
        initial_images=x0,
        region_trace=region_trace,
    )


def _masks_from(positions: np.ndarray, grid_size: int) -> List[TokenMask]:
    return [TokenMask.from_positions(row, grid_size) for row in positions]
