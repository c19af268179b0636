"""A small pre-norm Vision Transformer with LoRA hooks and CLS-attention pruning."""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from model.pruning import PrunePlan, keep_count, select_tokens
from tensor.functional import gelu, layernorm, linear, softmax
from tensor.tensor import Tensor, concat, get_dtype, parameters_digest
from utils.errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 24
    patch_size: int = 4
    channels: int = 3
    depth: int = 2
    embed_dim: int = 64
    num_heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if min(self.image_size, self.patch_size, self.channels, self.depth,
               self.embed_dim, self.num_heads, self.mlp_ratio) < 1:
            raise ConfigError("all ViT dimensions must be positive")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def hidden_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio

    @classmethod
    def from_settings(cls, settings: Dict) -> "ViTConfig":
        data, backbone = settings["dataset"], settings["backbone"]
        return cls(
            image_size=data["image_size"],
            patch_size=backbone["patch_size"],
            channels=data["channels"],
            depth=backbone["depth"],
            embed_dim=backbone["embed_dim"],
            num_heads=backbone["num_heads"],
            mlp_ratio=backbone["mlp_ratio"],
        )


@dataclass
class AttentionRecord:
    """Head-averaged attention from CLS to every token, one row per image."""

    layer: int
    a_cls: np.ndarray


@dataclass
class ForwardOutput:
    cls_embedding: Tensor
    attention_records: List[AttentionRecord] = field(default_factory=list)
    kept_token_positions: Optional[np.ndarray] = None


def cls_attention(q_cls, keys, d: int) -> Tensor:
    """softmax(q_cls . K^T / sqrt(d)) over every token in ``keys``."""
    if d <= 0:
        raise ConfigError(f"head dimension must be positive, got {d}")
    q = q_cls if isinstance(q_cls, Tensor) else Tensor(q_cls)
    k = keys if isinstance(keys, Tensor) else Tensor(keys)
    scores = q.reshape(1, -1) @ k.transpose() * (1.0 / math.sqrt(d))
    return softmax(scores, axis=-1).reshape(-1)


def patch_index(token_index: int, cfg: ViTConfig):
    """(row, col) of the image patch behind a token (token 0 is CLS)."""
    i = token_index - 1
    return i // cfg.grid_size, i % cfg.grid_size


class ViTModel:
    """The frozen-by-default backbone f; adapters are passed into ``forward``."""

    def __init__(self, cfg: ViTConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        rng = np.random.default_rng(seed)
        D, P, Hd = cfg.embed_dim, cfg.patch_dim, cfg.hidden_dim

        def add(name, array):
            self.params[name] = Tensor(array, name=name)

        add("patch.weight", rng.normal(0.0, INIT_STD, (P, D)))
        add("patch.bias", np.zeros(D))
        add("cls_token", rng.normal(0.0, INIT_STD, (D,)))
        add("pos_embed", rng.normal(0.0, INIT_STD, (cfg.seq_len, D)))
        for l in range(cfg.depth):
            add(f"blocks.{l}.ln1.gamma", np.ones(D))
            add(f"blocks.{l}.ln1.beta", np.zeros(D))
            for proj in ("q", "k", "v", "o"):
                add(f"blocks.{l}.{proj}.weight", rng.normal(0.0, INIT_STD, (D, D)))
                add(f"blocks.{l}.{proj}.bias", np.zeros(D))
            add(f"blocks.{l}.ln2.gamma", np.ones(D))
            add(f"blocks.{l}.ln2.beta", np.zeros(D))
            add(f"blocks.{l}.fc1.weight", rng.normal(0.0, INIT_STD, (D, Hd)))
            add(f"blocks.{l}.fc1.bias", np.zeros(Hd))
            add(f"blocks.{l}.fc2.weight", rng.normal(0.0, INIT_STD, (Hd, D)))
            add(f"blocks.{l}.fc2.bias", np.zeros(D))
        add("norm.gamma", np.ones(D))
        add("norm.beta", np.zeros(D))

    # --- parameter bookkeeping ---
    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = True

    def digest(self) -> str:
        return parameters_digest(self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, p.data) for name, p in self.params.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise ConfigError(f"missing backbone weight {name}")
            array = np.asarray(state[name])
            if array.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {array.shape}")
            p.data = array.astype(get_dtype())

    def p(self, name: str) -> Tensor:
        return self.params[name]

    # --- embedding ---
    def _as_batch(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        cfg = self.cfg
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"expected images of shape (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), got {x.shape}")
        return x

    def extract_patches(self, images) -> Tensor:
        """(B, C, H, W) -> (B, n, C*p*p), patches in row-major grid order."""
        x = self._as_batch(images)
        cfg = self.cfg
        B, C, g, p = x.shape[0], cfg.channels, cfg.grid_size, cfg.patch_size
        x = x.reshape(B, C, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(B, g * g, C * p * p)

    def embed_patches(self, images, positions: Optional[np.ndarray] = None) -> Tensor:
        """Linear patch embedding before position encodings, optionally only at ``positions``."""
        patches = self.extract_patches(images)
        if positions is not None:
            rows = np.arange(patches.shape[0])[:, None]
            patches = patches[rows, positions]
        return linear(patches, self.p("patch.weight"), self.p("patch.bias"))

    def patchify(self, images, positions: Optional[np.ndarray] = None) -> Tensor:
        """Images -> token sequence (B, 1 + m, D) with CLS first.

        With ``positions`` (B, m) only those patches are embedded, each with its
        own position encoding; otherwise all n patches are.
        """
        tokens = self.embed_patches(images, positions)
        B, D = tokens.shape[0], self.cfg.embed_dim
        pos = self.p("pos_embed")
        if positions is None:
            tokens = tokens + pos[1:]
        else:
            tokens = tokens + pos[np.asarray(positions) + 1]
        cls = (self.p("cls_token") + pos[0]).reshape(1, 1, D).broadcast_to((B, 1, D))
        return concat([cls, tokens], axis=1)

    # --- transformer ---
    def forward(self, tokens: Tensor, adapters: Optional[Sequence] = None, plan: Optional[PrunePlan] = None,
                positions: Optional[np.ndarray] = None) -> ForwardOutput:
        """Run all layers; record CLS attention and prune where the plan says so.

        Args:
            tokens: (B, T, D) sequence with CLS at index 0
            adapters: LoRA adapters whose low-rank paths are added to q/v projections
            plan: layer -> keep fraction, applied after that layer's attention
            positions: original patch index of each image token (defaults to 0..T-2)
        """
        cfg = self.cfg
        if tokens.ndim != 3 or tokens.shape[1] < 1 or tokens.shape[2] != cfg.embed_dim:
            raise DimensionError(f"expected tokens (B, T, {cfg.embed_dim}), got {tokens.shape}")
        if plan is not None:
            plan.validate(cfg.depth)
        adapters = [a for a in (adapters or []) if a is not None]

        B, T = tokens.shape[0], tokens.shape[1]
        if positions is None:
            positions = np.tile(np.arange(T - 1), (B, 1))
        positions = np.asarray(positions)

        x = tokens
        records: List[AttentionRecord] = []
        for l in range(cfg.depth):
            x, a_cls = self._attention_block(x, l, adapters)
            records.append(AttentionRecord(layer=l, a_cls=a_cls))

            fraction = plan.keep_fraction(l) if plan is not None else None
            if fraction is not None:
                m = x.shape[1] - 1
                k = keep_count(m, fraction)
                if k < m:
                    keep = select_tokens(a_cls[:, 1:], k)
                    rows = np.arange(B)[:, None]
                    index = np.concatenate([np.zeros((B, 1), dtype=np.int64), keep + 1], axis=1)
                    x = x[rows, index]
                    positions = np.take_along_axis(positions, keep, axis=1)

            x = self._mlp_block(x, l)

        cls = layernorm(x[:, 0, :], self.p("norm.gamma"), self.p("norm.beta"))
        return ForwardOutput(cls_embedding=cls, attention_records=records, kept_token_positions=positions)

    def embed(self, images, adapters: Optional[Sequence] = None, plan: Optional[PrunePlan] = None,
              positions: Optional[np.ndarray] = None) -> ForwardOutput:
        """patchify + forward."""
        tokens = self.patchify(images, positions)
        return self.forward(tokens, adapters=adapters, plan=plan, positions=positions)

    def _project(self, h: Tensor, layer: int, site: str, adapters: Iterable) -> Tensor:
        out = linear(h, self.p(f"blocks.{layer}.{site}.weight"), self.p(f"blocks.{layer}.{site}.bias"))
        for adapter in adapters:
            pair = adapter.site(layer, site)
            if pair is not None:
                a, b = pair
                out = out + (h @ a) @ b
        return out

    def _attention_block(self, x: Tensor, l: int, adapters):
        cfg = self.cfg
        B, T, D = x.shape
        H, d = cfg.num_heads, cfg.head_dim
        h = layernorm(x, self.p(f"blocks.{l}.ln1.gamma"), self.p(f"blocks.{l}.ln1.beta"))

        q = self._project(h, l, "q", adapters).reshape(B, T, H, d).transpose(0, 2, 1, 3)
        k = self._project(h, l, "k", adapters).reshape(B, T, H, d).transpose(0, 2, 1, 3)
        v = self._project(h, l, "v", adapters).reshape(B, T, H, d).transpose(0, 2, 1, 3)

        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
        attn = softmax(scores, axis=-1)
        a_cls = attn.data[:, :, 0, :].mean(axis=1)

        context = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        out = linear(context, self.p(f"blocks.{l}.o.weight"), self.p(f"blocks.{l}.o.bias"))
        return x + out, a_cls

    def _mlp_block(self, x: Tensor, l: int) -> Tensor:
        h = layernorm(x, self.p(f"blocks.{l}.ln2.gamma"), self.p(f"blocks.{l}.ln2.beta"))
        h = gelu(linear(h, self.p(f"blocks.{l}.fc1.weight"), self.p(f"blocks.{l}.fc1.bias")))
        return x + linear(h, self.p(f"blocks.{l}.fc2.weight"), self.p(f"blocks.{l}.fc2.bias"))
