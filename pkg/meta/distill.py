import logging

import numpy as np

from inversion.tasks import GeneratedTask
from lora.adapter import LoRAAdapter
from lora.head import ClassificationHead
from meta.meta_lora import MetaLoRA
from meta.prototypes import embed_support, proto_predict
from model.vit import ViTModel
from tensor.functional import kl_divergence
from tensor.optim import Optimizer
from tensor.tensor import Tensor, no_grad
from utils.constants import SparseSelection
from utils.errors import DivergenceError, LabelError

logger = logging.getLogger(__name__)


def teacher_probs(model: ViTModel, adapter: LoRAAdapter, head: ClassificationHead, images) -> np.ndarray:
    """Dense teacher predictions h(f_lora(X)), with no graph recorded."""
    with no_grad():
        out = model.embed(images if isinstance(images, Tensor) else Tensor(images), adapters=[adapter])
        return head.probs(out.cls_embedding).data


def distill_step(model: ViTModel, meta: MetaLoRA, teacher: LoRAAdapter, head: ClassificationHead,
                 task: GeneratedTask, opt: Optimizer, sparse_mode: bool = False, distance: str = "euclidean",
                 token_selection: str = SparseSelection.MASK.value) -> float:
    """One outer step: pull the student's prototype predictions toward the teacher's on the query set."""
    if task.n_way != head.num_classes or list(task.class_names) != list(head.labels):
        raise LabelError(f"task classes {task.class_names} do not match the teacher head {head.labels}")

    target = teacher_probs(model, teacher, head, task.query_images)

    student_model = meta.model_for(model)
    opt.zero_grad()
    protos = embed_support(student_model, meta, task.support_images, task.support_labels, task.n_way,
                           task.support_masks, sparse_mode, token_selection)
    student = proto_predict(student_model, meta, protos, task.query_images, sparse_mode, task.query_masks,
                            distance, token_selection)
    loss = kl_divergence(student, target)
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"distillation loss became {value}")
    loss.backward()
    fill_missing_grads(opt)
    opt.step()
    return value


def fill_missing_grads(opt: Optimizer) -> None:
    """Parameters the loss never reached (e.g. pruned-away paths) get a zero gradient."""
    for p in opt.params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
