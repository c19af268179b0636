"""Token pruning plans and CLS-attention token selection."""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from utils.errors import ConfigError


@dataclass(frozen=True)
class PrunePlan:
    """Map of layer index -> fraction of image tokens kept after that layer's attention."""

    keep: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for layer, fraction in self.keep.items():
            if layer < 0:
                raise ConfigError(f"prune layer must be non-negative, got {layer}")
            if not 0.0 < fraction <= 1.0:
                raise ConfigError(f"keep fraction must lie in (0, 1], got {fraction} at layer {layer}")

    @classmethod
    def parse(cls, text: str) -> "PrunePlan":
        """Parse ``"layer:pruned,..."``, where each value is the fraction pruned.

        ``"11:0.75"`` prunes 75% of the image tokens at layer 11, i.e. keeps 25%.
        """
        keep: Dict[int, float] = {}
        text = (text or "").strip().strip("{}")
        if not text:
            return cls()
        for item in text.split(","):
            try:
                layer_text, pruned_text = item.split(":")
                layer, pruned = int(layer_text), float(pruned_text)
            except ValueError as e:
                raise ConfigError(f"bad prune plan entry {item!r}; expected layer:fraction") from e
            if not 0.0 <= pruned < 1.0:
                raise ConfigError(f"pruned fraction must lie in [0, 1), got {pruned}")
            keep[layer] = 1.0 - pruned
        return cls(keep)

    @classmethod
    def keep_all(cls, depth: int) -> "PrunePlan":
        return cls({layer: 1.0 for layer in range(depth)})

    def keep_fraction(self, layer: int) -> Optional[float]:
        return self.keep.get(layer)

    def validate(self, depth: int) -> None:
        for layer in self.keep:
            if layer >= depth:
                raise ConfigError(f"prune plan references layer {layer} but the model has {depth} layers")

    def label(self) -> str:
        """Pruned-fraction notation, e.g. ``{11: 0.75}``."""
        if not self.keep:
            return "{}"
        items = ", ".join(f"{layer}: {1.0 - frac:g}" for layer, frac in sorted(self.keep.items()))
        return "{" + items + "}"

    def is_empty(self) -> bool:
        return not self.keep


def keep_count(image_tokens: int, fraction: float) -> int:
    """Image tokens surviving a keep fraction: ceil(fraction * m), at least one."""
    return max(1, min(image_tokens, math.ceil(fraction * image_tokens - 1e-9)))


def select_tokens(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the top-``k`` image tokens per row, returned in ascending order.

    Ties go to the lower index.
    """
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def plan_seq_lengths(depth: int, image_tokens: int, plan: Optional[PrunePlan] = None) -> List[Tuple[int, int]]:
    """Per-layer (attention, FFN) sequence lengths, CLS included.

    Pruning at layer ``l`` happens between its attention and its FFN, so the
    FFN of that layer already runs on the shorter sequence.
    """
    lengths = []
    m = image_tokens
    for layer in range(depth):
        attn_n = m + 1
        fraction = plan.keep_fraction(layer) if plan is not None else None
        if fraction is not None:
            m = keep_count(m, fraction)
        lengths.append((attn_n, m + 1))
    return lengths


def final_image_tokens(depth: int, image_tokens: int, plan: Optional[PrunePlan] = None) -> int:
    """Image tokens left after the last layer."""
    return plan_seq_lengths(depth, image_tokens, plan)[-1][1] - 1 if depth else image_tokens
