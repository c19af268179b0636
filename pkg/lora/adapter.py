"""Low-rank adapters attached in parallel to the ViT's attention projections."""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from model.vit import ViTConfig
from tensor.tensor import Tensor, get_dtype, parameters_digest
from utils.constants import DEFAULT_RANK, LORA_INIT_STD, LORA_SITES
from utils.errors import ConfigError, IncompatibleAdapterError

logger = logging.getLogger(__name__)

SiteKey = Tuple[int, str]


@dataclass
class LoRAAdapter:
    """Per (layer, site) pairs of A (d x r) and B (r x k); the site computes Wx + (xA)B."""

    rank: int
    sites: "OrderedDict[SiteKey, Tuple[Tensor, Tensor]]" = field(default_factory=OrderedDict)
    metadata: Dict = field(default_factory=dict)

    def site(self, layer: int, name: str) -> Optional[Tuple[Tensor, Tensor]]:
        return self.sites.get((layer, name))

    @property
    def layers(self) -> List[int]:
        return sorted({layer for layer, _ in self.sites})

    def parameters(self) -> List[Tensor]:
        params = []
        for a, b in self.sites.values():
            params.extend((a, b))
        return params

    def requires_grad_(self, flag: bool = True) -> "LoRAAdapter":
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def digest(self) -> str:
        return parameters_digest(self.parameters())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for (layer, name), (a, b) in self.sites.items():
            state[f"lora.{layer}.{name}.A"] = a.data
            state[f"lora.{layer}.{name}.B"] = b.data
        return state

    @classmethod
    def from_state_dict(cls, state: Dict[str, np.ndarray], metadata: Optional[Dict] = None) -> "LoRAAdapter":
        pairs: Dict[SiteKey, Dict[str, np.ndarray]] = {}
        for key, array in state.items():
            parts = key.split(".")
            if len(parts) != 4 or parts[0] != "lora" or parts[3] not in ("A", "B"):
                continue
            pairs.setdefault((int(parts[1]), parts[2]), {})[parts[3]] = array
        if not pairs:
            raise IncompatibleAdapterError("state holds no LoRA tensors")

        sites: "OrderedDict[SiteKey, Tuple[Tensor, Tensor]]" = OrderedDict()
        rank = None
        for key in sorted(pairs):
            pair = pairs[key]
            if "A" not in pair or "B" not in pair:
                raise IncompatibleAdapterError(f"site {key} is missing its A or B matrix")
            a, b = pair["A"], pair["B"]
            if rank is None:
                rank = a.shape[1]
            if a.shape[1] != rank or b.shape[0] != rank:
                raise IncompatibleAdapterError(f"site {key} has inconsistent rank")
            sites[key] = (Tensor(a, name=f"lora.{key[0]}.{key[1]}.A"), Tensor(b, name=f"lora.{key[0]}.{key[1]}.B"))
        return cls(rank=rank, sites=sites, metadata=dict(metadata or {}))

    def clone(self) -> "LoRAAdapter":
        sites = OrderedDict((key, (a.clone(), b.clone())) for key, (a, b) in self.sites.items())
        return LoRAAdapter(rank=self.rank, sites=sites, metadata=dict(self.metadata))


def _site_keys(cfg: ViTConfig, layers: Optional[Iterable[int]], sites: Sequence[str]) -> List[SiteKey]:
    chosen = list(range(cfg.depth)) if layers is None else sorted(set(layers))
    for layer in chosen:
        if not 0 <= layer < cfg.depth:
            raise ConfigError(f"adapter layer {layer} does not exist in a {cfg.depth}-layer model")
    for name in sites:
        if name not in ("q", "k", "v", "o"):
            raise ConfigError(f"unknown attachment site {name!r}")
    return [(layer, name) for layer in chosen for name in sites]


def _check_rank(cfg: ViTConfig, rank: int) -> None:
    if rank < 1:
        raise ConfigError(f"rank must be at least 1, got {rank}")
    limit = cfg.embed_dim
    if rank > limit:
        raise ConfigError(f"rank {rank} exceeds min(d, k) = {limit}")
    if 4 * rank > limit:
        logger.warning("LoRA rank %d is not small relative to min(d, k) = %d", rank, limit)


def new_adapter(cfg: ViTConfig, rank: int = DEFAULT_RANK, seed: int = 0, layers: Optional[Iterable[int]] = None,
                sites: Sequence[str] = LORA_SITES, metadata: Optional[Dict] = None) -> LoRAAdapter:
    """Fresh adapter: A ~ N(0, 0.02), B = 0, so it changes nothing until trained."""
    _check_rank(cfg, rank)
    rng = np.random.default_rng(seed)
    D = cfg.embed_dim
    pairs: "OrderedDict[SiteKey, Tuple[Tensor, Tensor]]" = OrderedDict()
    for layer, name in _site_keys(cfg, layers, sites):
        a = Tensor(rng.normal(0.0, LORA_INIT_STD, (D, rank)), requires_grad=True, name=f"lora.{layer}.{name}.A")
        b = Tensor(np.zeros((rank, D)), requires_grad=True, name=f"lora.{layer}.{name}.B")
        pairs[(layer, name)] = (a, b)
    meta = {"seed": seed}
    meta.update(metadata or {})
    return LoRAAdapter(rank=rank, sites=pairs, metadata=meta)


def random_adapter(cfg: ViTConfig, rank: int = DEFAULT_RANK, seed: int = 0, std: float = LORA_INIT_STD,
                   layers: Optional[Iterable[int]] = None, sites: Sequence[str] = LORA_SITES) -> LoRAAdapter:
    """Randomly initialized adapter with Gaussian A and B, used as an untrained baseline."""
    adapter = new_adapter(cfg, rank, seed, layers, sites, metadata={"kind": "random"})
    rng = np.random.default_rng(seed + 1)
    for _, b in adapter.sites.values():
        b.data = rng.normal(0.0, std, b.shape).astype(get_dtype())
    return adapter


def scale_matched_adapter(reference: LoRAAdapter, seed: int = 0) -> LoRAAdapter:
    """Gaussian A and B at every site of ``reference``, each with that matrix's own std.

    Same rank, sites and per-matrix scale as a trained adapter, but no learned
    directions.
    """
    rng = np.random.default_rng(seed)
    sites: "OrderedDict[SiteKey, Tuple[Tensor, Tensor]]" = OrderedDict()
    for (layer, name), (a, b) in reference.sites.items():
        drawn = [Tensor(rng.normal(0.0, float(np.std(m.data)), m.shape), dtype=m.dtype,
                        name=f"lora.{layer}.{name}.{slot}") for m, slot in ((a, "A"), (b, "B"))]
        sites[(layer, name)] = (drawn[0], drawn[1])
    return LoRAAdapter(rank=reference.rank, sites=sites, metadata={"kind": "random", "seed": seed})


def average_adapters(adapters: Sequence[LoRAAdapter]) -> LoRAAdapter:
    """Elementwise mean of every A and every B.

    Values are sorted along the adapter axis and summed in float64 so the result
    does not depend on list order.
    """
    if not adapters:
        raise IncompatibleAdapterError("cannot average an empty list of adapters")
    first = adapters[0]
    keys = list(first.sites)
    for other in adapters[1:]:
        if other.rank != first.rank:
            raise IncompatibleAdapterError(f"rank mismatch: {first.rank} vs {other.rank}")
        if list(other.sites) != keys:
            raise IncompatibleAdapterError("adapters attach to different sites")

    count = len(adapters)
    sites: "OrderedDict[SiteKey, Tuple[Tensor, Tensor]]" = OrderedDict()
    for key in keys:
        averaged = []
        for slot in (0, 1):
            stacked = np.stack([a.sites[key][slot].data for a in adapters]).astype(np.float64)
            mean = np.sort(stacked, axis=0).sum(axis=0) / count
            averaged.append(Tensor(mean, dtype=first.sites[key][slot].dtype))
        sites[key] = (averaged[0], averaged[1])
    return LoRAAdapter(rank=first.rank, sites=sites, metadata={"kind": "average", "sources": count})


def num_parameters(adapter: LoRAAdapter) -> int:
    return int(sum(p.size for p in adapter.parameters()))


def check_compatible(adapter: LoRAAdapter, cfg: ViTConfig) -> None:
    """Every attached site must exist in the model and match its width."""
    D = cfg.embed_dim
    for (layer, name), (a, b) in adapter.sites.items():
        if not 0 <= layer < cfg.depth:
            raise IncompatibleAdapterError(f"adapter targets layer {layer} of a {cfg.depth}-layer model")
        if a.shape != (D, adapter.rank) or b.shape != (adapter.rank, D):
            raise IncompatibleAdapterError(
                f"site ({layer}, {name}) has shapes {a.shape}/{b.shape}, expected ({D}, r)/(r, {D})")
