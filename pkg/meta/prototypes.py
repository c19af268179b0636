"""Tuning-free prototypical classification on top of the (adapted) backbone."""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from inversion.masks import TokenMask, stack_masks
from model.pruning import PrunePlan
from model.vit import ViTModel
from tensor.functional import softmax
from tensor.tensor import Tensor, concat, stack
from utils.constants import SparseSelection
from utils.errors import ConfigError, CountError, DimensionError

MaskBatch = Union[np.ndarray, Sequence[TokenMask], None]


@dataclass
class PrototypeSet:
    centers: Tensor  # (N, D)
    labels: List[int] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]


def _mask_grids(masks: MaskBatch) -> Optional[np.ndarray]:
    if masks is None:
        return None
    if isinstance(masks, np.ndarray):
        return masks.astype(bool)
    return stack_masks(masks)


def embed_images(model: ViTModel, adapters: Sequence, images, masks: MaskBatch = None, sparse_mode: bool = False,
                 token_selection: str = SparseSelection.MASK.value) -> Tensor:
    """CLS embeddings (B, D) of a batch.

    In sparse mode with ``mask`` selection only the tokens a mask keeps are
    embedded (each with its own position encoding). With
    ``first_layer_attention`` every token is embedded and layer 0 prunes by CLS
    attention down to the same count.
    """
    grids = _mask_grids(masks) if sparse_mode else None
    if grids is None:
        return model.embed(images, adapters=adapters).cls_embedding

    x = images if isinstance(images, Tensor) else Tensor(images)
    if grids.shape[0] != x.shape[0]:
        raise DimensionError(f"{grids.shape[0]} masks for {x.shape[0]} images")
    flat = grids.reshape(grids.shape[0], -1)
    counts = flat.sum(axis=1)

    if token_selection == SparseSelection.FIRST_LAYER_ATTENTION.value:
        fraction = float(counts.mean()) / flat.shape[1]
        plan = PrunePlan({0: fraction}) if fraction < 1.0 else None
        return model.embed(x, adapters=adapters, plan=plan).cls_embedding
    if token_selection != SparseSelection.MASK.value:
        raise ConfigError(f"unknown token selection {token_selection!r}")

    if np.any(counts == 0):
        raise CountError("a mask keeps no tokens")
    groups = sorted(set(counts.tolist()))
    if len(groups) == 1:
        positions = np.stack([np.flatnonzero(row) for row in flat])
        return model.embed(x, adapters=adapters, positions=positions).cls_embedding

    # masks of different sizes run as separate batches, then return to input order
    parts, order = [], []
    for count in groups:
        rows = np.flatnonzero(counts == count)
        positions = np.stack([np.flatnonzero(flat[r]) for r in rows])
        parts.append(model.embed(x[rows], adapters=adapters, positions=positions).cls_embedding)
        order.extend(rows.tolist())
    inverse = np.argsort(np.asarray(order))
    return concat(parts, axis=0)[inverse]


def prototypes_from(embeddings: Tensor, labels: np.ndarray, n_way: int) -> PrototypeSet:
    labels = np.asarray(labels)
    centers = []
    for c in range(n_way):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            raise CountError(f"class {c} has no support examples")
        centers.append(embeddings[idx].mean(axis=0))
    return PrototypeSet(centers=stack(centers), labels=list(range(n_way)))


def embed_support(model: ViTModel, meta, support_images, support_labels, n_way: int, masks: MaskBatch = None,
                  sparse_mode: bool = False, token_selection: str = SparseSelection.MASK.value) -> PrototypeSet:
    """Class centers: the mean support embedding of each class under the meta adapter."""
    embeddings = embed_images(model, _adapters(meta), support_images, masks, sparse_mode, token_selection)
    return prototypes_from(embeddings, support_labels, n_way)


def proto_logits(embeddings: Tensor, protos: PrototypeSet, distance: str = "euclidean") -> Tensor:
    """Negative distance from every embedding (Q, D) to every center (N, D)."""
    if protos.num_classes < 1:
        raise CountError("prototype set is empty")
    q, d = embeddings.shape
    diff = embeddings.reshape(q, 1, d) - protos.centers.reshape(1, protos.num_classes, d)
    if distance == "euclidean":
        return -diff.norm(axis=-1)
    if distance == "squared":
        return -(diff * diff).sum(axis=-1)
    raise ConfigError(f"unknown distance {distance!r}")


def proto_probs(embeddings: Tensor, protos: PrototypeSet, distance: str = "euclidean") -> Tensor:
    return softmax(proto_logits(embeddings, protos, distance), axis=-1)


def proto_predict(model: ViTModel, meta, protos: PrototypeSet, query_images, sparse_mode: bool = False,
                  masks: MaskBatch = None, distance: str = "euclidean",
                  token_selection: str = SparseSelection.MASK.value) -> Tensor:
    """Class probabilities proportional to exp(-||f(x) - c_i||)."""
    embeddings = embed_images(model, _adapters(meta), query_images, masks, sparse_mode, token_selection)
    return proto_probs(embeddings, protos, distance)


def _adapters(meta) -> list:
    """Accept a MetaLoRA, a bare adapter, a list of adapters or None."""
    if meta is None:
        return []
    if hasattr(meta, "adapters"):
        return meta.adapters
    if isinstance(meta, (list, tuple)):
        return list(meta)
    return [meta]
