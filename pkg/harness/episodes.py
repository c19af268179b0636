from dataclasses import dataclass, field
from typing import List

import numpy as np

from harness.toy_data import ToyDataset
from utils.errors import CountError


@dataclass
class Episode:
    """An N-way K-shot problem relabelled 0..N-1, class-major order."""

    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    class_names: List[str] = field(default_factory=list)
    support_index: np.ndarray = None
    query_index: np.ndarray = None
    seed: int = 0

    @property
    def n_way(self) -> int:
        return len(self.class_names)


def sample_episode(dataset: ToyDataset, N: int, K: int, Q: int, seed: int) -> Episode:
    """Uniformly pick N classes, then K + Q distinct images of each, without replacement."""
    if min(N, K, Q) < 1:
        raise CountError(f"N, K and Q must be positive, got {N}, {K}, {Q}")
    if dataset.num_classes < N:
        raise CountError(f"split has {dataset.num_classes} classes; an episode needs {N}")
    rng = np.random.default_rng(seed)
    classes = rng.choice(dataset.num_classes, size=N, replace=False)

    support, query, s_lab, q_lab = [], [], [], []
    for local, label in enumerate(classes):
        idx = dataset.indices_of(int(label))
        if len(idx) < K + Q:
            raise CountError(f"class {dataset.class_names[label]} has {len(idx)} images; K + Q = {K + Q} are needed")
        pick = rng.choice(idx, size=K + Q, replace=False)
        support.extend(pick[:K])
        query.extend(pick[K:])
        s_lab.extend([local] * K)
        q_lab.extend([local] * Q)

    support_index = np.asarray(support, dtype=np.int64)
    query_index = np.asarray(query, dtype=np.int64)
    return Episode(
        support_images=dataset.images[support_index],
        support_labels=np.asarray(s_lab, dtype=np.int64),
        query_images=dataset.images[query_index],
        query_labels=np.asarray(q_lab, dtype=np.int64),
        class_names=[dataset.class_names[c] for c in classes],
        support_index=support_index,
        query_index=query_index,
        seed=seed,
    )


def sample_episodes(dataset: ToyDataset, count: int, N: int, K: int, Q: int, seed: int = 0) -> List[Episode]:
    """``count`` episodes with seeds seed, seed+1, ..."""
    return [sample_episode(dataset, N, K, Q, seed + e) for e in range(count)]
