"""Episode-based evaluation of adapters through the prototype classifier.

Every method classifies queries by the nearest class center; methods differ
only in which adapter (if any) is attached to the frozen backbone.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from harness.episodes import Episode
from meta.prototypes import PrototypeSet, proto_logits, prototypes_from
from model.flops import embedding_flops, plan_flops
from model.pruning import PrunePlan
from model.vit import ViTModel
from tensor.tensor import Tensor, no_grad
from utils.constants import CI_Z
from utils.errors import ConfigError, PipelineStateError, ValidationError
from utils.helpers import strided_chunks

logger = logging.getLogger(__name__)

# (images, adapters) -> (B, D) embeddings; lets tests inject oracle embeddings
EmbedFn = Callable[[np.ndarray, Sequence], np.ndarray]


@dataclass
class EvalAccumulator:
    """Integer partial sums, so merging is exact and order-independent."""

    episodes: int = 0
    correct: int = 0
    correct_sq: int = 0
    queries_per_episode: int = 0
    flops: int = 0
    seconds: float = 0.0

    def add(self, correct: int, queries: int, flops: int, seconds: float = 0.0) -> None:
        if self.queries_per_episode and queries != self.queries_per_episode:
            raise ValidationError("episodes in one evaluation must have the same number of queries")
        self.queries_per_episode = queries
        self.episodes += 1
        self.correct += correct
        self.correct_sq += correct * correct
        self.flops += flops
        self.seconds += seconds

    def merge(self, other: "EvalAccumulator") -> "EvalAccumulator":
        if other.episodes == 0:
            return self
        if self.queries_per_episode and other.queries_per_episode != self.queries_per_episode:
            raise ValidationError("cannot merge evaluations with different query counts")
        self.queries_per_episode = other.queries_per_episode
        self.episodes += other.episodes
        self.correct += other.correct
        self.correct_sq += other.correct_sq
        self.flops += other.flops
        self.seconds += other.seconds
        return self

    def mean_accuracy(self) -> float:
        if self.episodes == 0:
            return 0.0
        return 100.0 * self.correct / (self.episodes * self.queries_per_episode)

    def ci95(self) -> float:
        """Normal-approximation half-width over per-episode accuracies."""
        e = self.episodes
        if e < 2:
            return 0.0
        q = self.queries_per_episode
        # sample variance of correct counts, in exact integer arithmetic up to the final division
        var_counts = (e * self.correct_sq - self.correct * self.correct) / (e * (e - 1))
        std = 100.0 * math.sqrt(max(var_counts, 0.0)) / q
        return CI_Z * std / math.sqrt(e)


@dataclass
class MethodResult:
    method: str
    accuracy: float
    ci95: float
    episodes: int
    flops: int

    def as_dict(self) -> Dict:
        return {"method": self.method, "accuracy": round(self.accuracy, 6), "ci95": round(self.ci95, 6),
                "episodes": self.episodes, "flops": self.flops}


@dataclass
class EvalReport:
    results: Dict[str, MethodResult] = field(default_factory=dict)
    throughput: Dict[str, float] = field(default_factory=dict)
    n_way: int = 0
    k_shot: int = 0
    q_query: int = 0
    sparse_ratio: float = 0.0

    def as_dict(self) -> Dict:
        """Deterministic fields only; throughput is wall-clock and kept apart."""
        return {
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "q_query": self.q_query,
            "sparse_ratio": self.sparse_ratio,
            "methods": [self.results[m].as_dict() for m in self.results],
        }

    def accuracy(self, method: str) -> float:
        return self.results[method].accuracy


def eval_plan(sparse_ratio: float) -> Optional[PrunePlan]:
    """Evaluation images carry no masks, so sparsity prunes at layer 0 by CLS attention."""
    if not 0.0 <= sparse_ratio < 1.0:
        raise ConfigError(f"sparse ratio must lie in [0, 1), got {sparse_ratio}")
    return PrunePlan({0: 1.0 - sparse_ratio}) if sparse_ratio > 0 else None


def episode_flops(model: ViTModel, episode: Episode, plan: Optional[PrunePlan]) -> int:
    images = len(episode.support_images) + len(episode.query_images)
    return images * (plan_flops(model.cfg, plan) + embedding_flops(model.cfg))


def _embed(model: ViTModel, adapters, images: np.ndarray, plan: Optional[PrunePlan],
           embed_fn: Optional[EmbedFn]) -> Tensor:
    if embed_fn is not None:
        return Tensor(embed_fn(images, adapters))
    return model.embed(Tensor(images), adapters=adapters, plan=plan).cls_embedding


def run_episode(model: ViTModel, adapters, episode: Episode, plan: Optional[PrunePlan] = None,
                distance: str = "euclidean", embed_fn: Optional[EmbedFn] = None) -> np.ndarray:
    """Predicted query labels for one episode."""
    with no_grad():
        support = _embed(model, adapters, episode.support_images, plan, embed_fn)
        protos: PrototypeSet = prototypes_from(support, episode.support_labels, episode.n_way)
        query = _embed(model, adapters, episode.query_images, plan, embed_fn)
        return proto_logits(query, protos, distance).data.argmax(axis=1)


def _evaluate_chunk(model, adapters, episodes, plan, distance, embed_fn) -> EvalAccumulator:
    acc = EvalAccumulator()
    for episode in episodes:
        started = time.perf_counter()
        predicted = run_episode(model, adapters, episode, plan, distance, embed_fn)
        elapsed = time.perf_counter() - started
        correct = int((predicted == episode.query_labels).sum())
        acc.add(correct, len(episode.query_labels), episode_flops(model, episode, plan), elapsed)
    return acc


def evaluate_method(model: ViTModel, adapters, episodes: Sequence[Episode], sparse_ratio: float = 0.0,
                    workers: int = 1, distance: str = "euclidean",
                    embed_fn: Optional[EmbedFn] = None) -> EvalAccumulator:
    plan = eval_plan(sparse_ratio)
    adapters = [a for a in (adapters or []) if a is not None]
    if workers <= 1 or len(episodes) < 2:
        return _evaluate_chunk(model, adapters, episodes, plan, distance, embed_fn)

    chunks = strided_chunks(episodes, workers)
    total = EvalAccumulator()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_evaluate_chunk, model, adapters, chunk, plan, distance, embed_fn)
                   for chunk in chunks]
        for future in futures:
            total.merge(future.result())
    return total


def evaluate(model: ViTModel, methods: Dict[str, Optional[Sequence]], episodes: Sequence[Episode],
             sparse_ratio: float = 0.0, workers: int = 1, distance: str = "euclidean",
             embed_fn: Optional[EmbedFn] = None) -> EvalReport:
    """Score each method (name -> adapters to attach) on the same episodes.

    A method mapped to ``None`` is missing its artifact; an empty list means
    the bare backbone.
    """
    if not episodes:
        raise PipelineStateError("no episodes to evaluate")
    first = episodes[0]
    report = EvalReport(n_way=first.n_way, k_shot=len(first.support_labels) // max(1, first.n_way),
                        q_query=len(first.query_labels) // max(1, first.n_way), sparse_ratio=sparse_ratio)
    for method, adapters in methods.items():
        if adapters is None:
            raise PipelineStateError(f"method {method} needs an artifact that has not been produced")
        started = time.perf_counter()
        acc = evaluate_method(model, adapters, episodes, sparse_ratio, workers, distance, embed_fn)
        wall = time.perf_counter() - started
        report.results[method] = MethodResult(method, acc.mean_accuracy(), acc.ci95(), acc.episodes, acc.flops)
        report.throughput[method] = acc.episodes / wall if wall > 0 else float("inf")
        logger.info("%s: %.2f%% +- %.2f over %d episodes", method, report.results[method].accuracy,
                    report.results[method].ci95, acc.episodes)
    return report
