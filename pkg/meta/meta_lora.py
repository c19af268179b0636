from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from lora.adapter import LoRAAdapter, new_adapter
from model.vit import ViTConfig, ViTModel
from tensor.tensor import Tensor
from utils.errors import ConfigError


@dataclass
class MetaLoRA:
    """The distilled adapter, optionally with a trainable copy of the backbone."""

    adapter: LoRAAdapter
    trainable_layers: List[int] = field(default_factory=list)
    backbone: Optional[ViTModel] = None

    @property
    def adapters(self) -> List[LoRAAdapter]:
        return [self.adapter]

    def parameters(self) -> List[Tensor]:
        params = self.adapter.parameters()
        if self.backbone is not None:
            params = params + self.backbone.parameters()
        return params

    def model_for(self, model: ViTModel) -> ViTModel:
        """The network the student runs on: its own backbone copy if it trains one."""
        return self.backbone if self.backbone is not None else model

    def digest(self) -> str:
        digest = self.adapter.digest()
        if self.backbone is not None:
            digest += self.backbone.digest()
        return digest


def resolve_layers(spec, depth: int) -> List[int]:
    """``"all"``, ``"last_half"``, ``"first_half"``, ``"0,3"`` or a list of ints."""
    if isinstance(spec, (list, tuple)):
        layers = [int(x) for x in spec]
    elif spec == "all":
        layers = list(range(depth))
    elif spec == "last_half":
        layers = list(range(depth // 2, depth))
    elif spec == "first_half":
        layers = list(range(max(1, depth // 2)))
    else:
        try:
            layers = [int(x) for x in str(spec).split(",") if x.strip()]
        except ValueError as e:
            raise ConfigError(f"bad trainable_layers value {spec!r}") from e
    if not layers or any(not 0 <= l < depth for l in layers):
        raise ConfigError(f"trainable layers {layers} do not fit a {depth}-layer model")
    return sorted(set(layers))


def copy_backbone(model: ViTModel) -> ViTModel:
    twin = ViTModel(model.cfg, seed=model.seed)
    twin.load_state_dict({name: np.array(array, copy=True) for name, array in model.state_dict().items()})
    return twin


def new_meta_lora(model: ViTModel, rank: int, seed: int, trainable_layers="all",
                  entire_backbone: bool = False) -> MetaLoRA:
    cfg: ViTConfig = model.cfg
    layers = resolve_layers(trainable_layers, cfg.depth)
    adapter = new_adapter(cfg, rank=rank, seed=seed, layers=layers, metadata={"kind": "meta"})
    backbone = None
    if entire_backbone:
        backbone = copy_backbone(model)
        backbone.unfreeze()
    return MetaLoRA(adapter=adapter, trainable_layers=layers, backbone=backbone)
