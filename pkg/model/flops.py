"""Analytical FLOPs for the ViT backbone.

Per layer with sequence length N and width D:
self-attention 3ND^2 + 2N^2D, FFN 8ND^2. All arithmetic is exact integers.
"""

import math
from typing import Optional, Sequence, Tuple, Union

from model.pruning import PrunePlan, keep_count, plan_seq_lengths
from model.vit import ViTConfig
from utils.constants import TRAIN_FLOPS_FACTOR
from utils.errors import ConfigError

SeqEntry = Union[int, Tuple[int, int]]

# ViT-B/16 at 224px, the shape the reported GFLOPs columns refer to
VIT_B = ViTConfig(image_size=224, patch_size=16, channels=3, depth=12, embed_dim=768, num_heads=12)


def attention_flops(n: int, d: int) -> int:
    return 3 * n * d * d + 2 * n * n * d


def ffn_flops(n: int, d: int) -> int:
    return 8 * n * d * d


def flops_estimate(cfg: ViTConfig, seq_lengths_per_layer: Sequence[SeqEntry]) -> int:
    """Sum the per-layer cost.

    Each entry is a sequence length N_l, or a pair (N_attn, N_ffn) for a layer
    that prunes between its attention and its FFN.
    """
    if len(seq_lengths_per_layer) != cfg.depth:
        raise ConfigError(f"expected {cfg.depth} per-layer sequence lengths, got {len(seq_lengths_per_layer)}")
    d = cfg.embed_dim
    total = 0
    for entry in seq_lengths_per_layer:
        if isinstance(entry, (tuple, list)):
            n_attn, n_ffn = int(entry[0]), int(entry[1])
        else:
            n_attn = n_ffn = int(entry)
        if n_attn < 1 or n_ffn < 1:
            raise ConfigError(f"sequence lengths must be positive, got {entry}")
        total += attention_flops(n_attn, d) + ffn_flops(n_ffn, d)
    return total


def dense_seq_lengths(cfg: ViTConfig) -> list:
    return [cfg.seq_len] * cfg.depth


def sparse_seq_lengths(cfg: ViTConfig, sparse_ratio: float) -> list:
    """Every layer runs on CLS plus the unmasked image tokens."""
    if not 0.0 <= sparse_ratio < 1.0:
        raise ConfigError(f"sparse ratio must lie in [0, 1), got {sparse_ratio}")
    kept = keep_count(cfg.num_patches, 1.0 - sparse_ratio)
    return [kept + 1] * cfg.depth


def plan_flops(cfg: ViTConfig, plan: Optional[PrunePlan] = None, image_tokens: Optional[int] = None) -> int:
    tokens = cfg.num_patches if image_tokens is None else image_tokens
    return flops_estimate(cfg, plan_seq_lengths(cfg.depth, tokens, plan))


def embedding_flops(cfg: ViTConfig, image_tokens: Optional[int] = None) -> int:
    """Patch projection, counted in multiply-adds like the layer terms."""
    tokens = cfg.num_patches if image_tokens is None else image_tokens
    return tokens * cfg.patch_dim * cfg.embed_dim


def training_flops(cfg: ViTConfig, seq_lengths_per_layer: Sequence[SeqEntry], image_tokens: Optional[int] = None) -> int:
    """One forward plus backward pass, taken as three forwards."""
    return TRAIN_FLOPS_FACTOR * (flops_estimate(cfg, seq_lengths_per_layer) + embedding_flops(cfg, image_tokens))


def relative_delta(value: float, reference: float) -> float:
    """Percentage change of ``value`` against ``reference``."""
    if reference == 0:
        return 0.0
    return 100.0 * (value - reference) / reference


def gflops(value: int) -> float:
    return value / 1e9


def format_delta(delta: float) -> str:
    if math.isclose(delta, 0.0, abs_tol=0.05):
        return "0%"
    return f"{delta:+.0f}%"
