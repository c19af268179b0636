from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from tensor.functional import linear, softmax
from tensor.tensor import Tensor, parameters_digest
from utils.errors import ConfigError, LabelError


@dataclass
class ClassificationHead:
    """Linear classifier h tuned together with a teacher adapter."""

    weight: Tensor
    bias: Tensor
    labels: List[str] = field(default_factory=list)

    def __post_init__(self):
        classes = self.weight.shape[1]
        if classes < 2:
            raise ConfigError(f"a head needs at least 2 classes, got {classes}")
        if self.bias.shape != (classes,):
            raise ConfigError(f"bias shape {self.bias.shape} does not match {classes} classes")
        if len(self.labels) != classes:
            raise LabelError(f"{len(self.labels)} labels for a {classes}-class head")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def __call__(self, embeddings: Tensor) -> Tensor:
        return linear(embeddings, self.weight, self.bias)

    def probs(self, embeddings: Tensor) -> Tensor:
        return softmax(self(embeddings), axis=-1)

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def requires_grad_(self, flag: bool = True) -> "ClassificationHead":
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def digest(self) -> str:
        return parameters_digest(self.parameters())

    def index_of(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError as e:
            raise LabelError(f"head has no class {label!r}") from e


def new_head(embed_dim: int, labels: Sequence[str], seed: int = 0, std: float = 0.02) -> ClassificationHead:
    rng = np.random.default_rng(seed)
    weight = Tensor(rng.normal(0.0, std, (embed_dim, len(labels))), requires_grad=True, name="head.weight")
    bias = Tensor(np.zeros(len(labels)), requires_grad=True, name="head.bias")
    return ClassificationHead(weight=weight, bias=bias, labels=list(labels))


def zero_head(embed_dim: int, labels: Sequence[str]) -> ClassificationHead:
    """A head that ignores its input: every class gets the same logit."""
    return ClassificationHead(Tensor(np.zeros((embed_dim, len(labels))), name="head.weight"),
                              Tensor(np.zeros(len(labels)), name="head.bias"), list(labels))
