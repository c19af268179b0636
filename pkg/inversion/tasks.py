"""Meta-training tasks assembled from generated (or real) images."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from inversion.masks import TokenMask
from utils.errors import CountError, DimensionError
from utils.payload import read_payload_dir, write_payload_dir

logger = logging.getLogger(__name__)


@dataclass
class GeneratedTask:
    """An N-way task: class-major support (N*K) and query (N*Q) sets with masks.

    ``class_names`` and ``sources`` are indexed by the task-local label.
    """

    support_images: np.ndarray
    support_masks: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_masks: np.ndarray
    query_labels: np.ndarray
    class_names: List[str] = field(default_factory=list)
    sources: List[str] = field(default_factory=list)
    k_shot: int = 1
    q_query: int = 1

    @property
    def n_way(self) -> int:
        return len(self.class_names)

    @property
    def source_ids(self) -> List[str]:
        return sorted(set(self.sources))

    def support_token_masks(self) -> List[TokenMask]:
        return [TokenMask(g) for g in self.support_masks]

    def query_token_masks(self) -> List[TokenMask]:
        return [TokenMask(g) for g in self.query_masks]

    def class_pool(self, label: int):
        """All images of one class (support first), with their masks."""
        s = self.support_labels == label
        q = self.query_labels == label
        images = np.concatenate([self.support_images[s], self.query_images[q]])
        masks = np.concatenate([self.support_masks[s], self.query_masks[q]])
        return images, masks


def build_task(images: np.ndarray, masks: np.ndarray, labels: Sequence[int], N: int, K: int, Q: int,
               class_names: Optional[Sequence[str]] = None, source: str = "") -> GeneratedTask:
    """Split by generation index: the first K images of each class go to support, the next Q to query."""
    images = np.asarray(images)
    masks = np.asarray(masks, dtype=bool)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels) or len(masks) != len(labels):
        raise DimensionError(f"{len(images)} images, {len(masks)} masks and {len(labels)} labels do not line up")
    if min(N, K, Q) < 1:
        raise CountError(f"N, K and Q must be positive, got {N}, {K}, {Q}")

    support_idx, query_idx = [], []
    for c in range(N):
        idx = np.flatnonzero(labels == c)
        if len(idx) < K + Q:
            raise CountError(f"class {c} has {len(idx)} images; K + Q = {K + Q} are needed")
        support_idx.extend(idx[:K])
        query_idx.extend(idx[K:K + Q])
    support_idx = np.asarray(support_idx)
    query_idx = np.asarray(query_idx)

    names = list(class_names) if class_names is not None else [str(c) for c in range(N)]
    if len(names) < N:
        raise CountError(f"{len(names)} class names for {N} classes")
    return GeneratedTask(
        support_images=images[support_idx],
        support_masks=masks[support_idx],
        support_labels=labels[support_idx],
        query_images=images[query_idx],
        query_masks=masks[query_idx],
        query_labels=labels[query_idx],
        class_names=names[:N],
        sources=[source] * N,
        k_shot=K,
        q_query=Q,
    )


_ARRAYS = ("support_images", "support_masks", "query_images", "query_masks")


def save_task(task: GeneratedTask, path: str) -> None:
    manifest = {
        "class_names": task.class_names,
        "sources": task.sources,
        "k_shot": task.k_shot,
        "q_query": task.q_query,
        "support_labels": task.support_labels.tolist(),
        "query_labels": task.query_labels.tolist(),
        "support_sparse_ratios": [round(TokenMask(g).sparse_ratio, 6) for g in task.support_masks],
        "query_sparse_ratios": [round(TokenMask(g).sparse_ratio, 6) for g in task.query_masks],
    }
    arrays = {name: getattr(task, name) for name in _ARRAYS}
    write_payload_dir(path, manifest, arrays)
    logger.debug("Saved task %s (%d-way, sources %s)", path, task.n_way, task.source_ids)


def load_task(path: str) -> GeneratedTask:
    manifest, arrays = read_payload_dir(path)
    return GeneratedTask(
        support_images=arrays["support_images"],
        support_masks=arrays["support_masks"] > 0.5,
        support_labels=np.asarray(manifest["support_labels"], dtype=np.int64),
        query_images=arrays["query_images"],
        query_masks=arrays["query_masks"] > 0.5,
        query_labels=np.asarray(manifest["query_labels"], dtype=np.int64),
        class_names=list(manifest["class_names"]),
        sources=list(manifest["sources"]),
        k_shot=int(manifest["k_shot"]),
        q_query=int(manifest["q_query"]),
    )
