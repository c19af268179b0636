"""Cross-task interpolation: new tasks mixing classes generated by different teachers."""

import logging
from typing import List, Sequence, Tuple

import numpy as np

from inversion.tasks import GeneratedTask
from meta.meta_lora import MetaLoRA
from meta.distill import fill_missing_grads
from meta.prototypes import embed_images, embed_support, proto_logits
from model.vit import ViTModel
from tensor.functional import cross_entropy
from tensor.optim import Optimizer
from utils.constants import SparseSelection
from utils.errors import CountError, DivergenceError

logger = logging.getLogger(__name__)

ClassRef = Tuple[int, int]  # (task index, task-local label)


def _pick_classes(tasks: Sequence[GeneratedTask], N: int, rng: np.random.Generator,
                  allow_same_source: bool) -> List[ClassRef]:
    refs: List[ClassRef] = [(t, c) for t, task in enumerate(tasks) for c in range(task.n_way)]
    identity = {ref: tasks[ref[0]].class_names[ref[1]] for ref in refs}
    source = {ref: tasks[ref[0]].sources[ref[1]] for ref in refs}

    if len(set(identity.values())) < N:
        raise CountError(f"only {len(set(identity.values()))} distinct classes across tasks; {N} are needed")
    if not allow_same_source:
        if len(set(source.values())) < 2:
            raise CountError("cross-task interpolation needs classes from at least two sources")
        if N < 2:
            raise CountError("an interpolated task mixing two sources needs N >= 2")

    order = [refs[i] for i in rng.permutation(len(refs))]
    chosen = [order[0]]
    if not allow_same_source:
        second = next((r for r in order[1:] if source[r] != source[chosen[0]]
                       and identity[r] != identity[chosen[0]]), None)
        if second is None:
            raise CountError("no class from a second source with a distinct identity")
        chosen.append(second)
    for ref in order:
        if len(chosen) == N:
            break
        if ref not in chosen and identity[ref] not in {identity[c] for c in chosen}:
            chosen.append(ref)
    # relabel in a random order so the two forced picks are not always classes 0 and 1
    return [chosen[i] for i in rng.permutation(len(chosen))]


def interpolate_task(tasks: Sequence[GeneratedTask], N: int, K: int, Q: int, seed: int,
                     allow_same_source: bool = False) -> GeneratedTask:
    """Sample N classes from distinct identities across the given tasks and relabel them 0..N-1."""
    rng = np.random.default_rng(seed)
    if not allow_same_source and len(tasks) < 2:
        raise CountError(f"cross-task interpolation needs at least 2 source tasks, got {len(tasks)}")
    chosen = _pick_classes(tasks, N, rng, allow_same_source)

    s_img, s_mask, s_lab, q_img, q_mask, q_lab = [], [], [], [], [], []
    names, sources = [], []
    for label, (t, c) in enumerate(chosen):
        task = tasks[t]
        images, masks = task.class_pool(c)
        if len(images) < K + Q:
            raise CountError(f"class {task.class_names[c]} has {len(images)} images; K + Q = {K + Q} are needed")
        pick = rng.permutation(len(images))[:K + Q]
        s_img.append(images[pick[:K]])
        s_mask.append(masks[pick[:K]])
        q_img.append(images[pick[K:]])
        q_mask.append(masks[pick[K:]])
        s_lab.extend([label] * K)
        q_lab.extend([label] * Q)
        names.append(task.class_names[c])
        sources.append(task.sources[c])

    return GeneratedTask(
        support_images=np.concatenate(s_img),
        support_masks=np.concatenate(s_mask),
        support_labels=np.asarray(s_lab, dtype=np.int64),
        query_images=np.concatenate(q_img),
        query_masks=np.concatenate(q_mask),
        query_labels=np.asarray(q_lab, dtype=np.int64),
        class_names=names,
        sources=sources,
        k_shot=K,
        q_query=Q,
    )


def interpolation_step(model: ViTModel, meta: MetaLoRA, task: GeneratedTask, opt: Optimizer,
                       sparse_mode: bool = False, distance: str = "euclidean",
                       token_selection: str = SparseSelection.MASK.value) -> float:
    """One outer step with cross-entropy against the relabelled query labels."""
    student_model = meta.model_for(model)
    opt.zero_grad()
    protos = embed_support(student_model, meta, task.support_images, task.support_labels, task.n_way,
                           task.support_masks, sparse_mode, token_selection)
    embeddings = embed_images(student_model, meta.adapters, task.query_images, task.query_masks, sparse_mode,
                              token_selection)
    loss = cross_entropy(proto_logits(embeddings, protos, distance), task.query_labels)
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"interpolation loss became {value}")
    loss.backward()
    fill_missing_grads(opt)
    opt.step()
    return value
