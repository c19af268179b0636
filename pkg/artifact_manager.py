import json
import logging
import os
import shutil
from typing import Dict, List, Optional, Tuple

import numpy as np

from harness.toy_data import GeneratorSpec, ToyDataset
from inversion.tasks import GeneratedTask, load_task, save_task
from lora.adapter import LoRAAdapter
from lora.head import ClassificationHead
from lora.store import load_artifact, load_model, save_artifact, save_model
from meta.trainer import TeacherEntry
from model.vit import ViTModel
from utils.errors import ArtifactError, PipelineStateError
from utils.payload import has_payload_dir, read_payload_dir, write_payload_dir

logger = logging.getLogger(__name__)


class ArtifactManager:
    """Owns the on-disk layout of a run directory.

    workdir/
        data/{meta-train,meta-test}/   payload directories
        backbone.lrcy
        teachers/<id>.lrcy
        tasks/<id>/<n>/                payload directories
        meta_lora.lrcy, joint_lora.lrcy
        logs/meta_train.jsonl
        reports/
    """

    def __init__(self, workdir: str):
        self.workdir = workdir
        os.makedirs(workdir, exist_ok=True)

    def path(self, *parts: str) -> str:
        return os.path.join(self.workdir, *parts)

    # --- datasets ---
    def save_dataset(self, dataset: ToyDataset) -> None:
        manifest = {
            "split": dataset.split,
            "class_names": dataset.class_names,
            "labels": dataset.labels.tolist(),
            "colors": dataset.colors.tolist(),
            "spec": {"shapes": list(dataset.spec.shapes), "textures": list(dataset.spec.textures),
                     "palette": [[name, list(rgb)] for name, rgb in dataset.spec.palette],
                     "image_size": dataset.spec.image_size, "noise": dataset.spec.noise},
        }
        write_payload_dir(self.path("data", dataset.split), manifest, {"images": dataset.images})
        logger.info("Saved %s split (%d images)", dataset.split, len(dataset.images))

    def load_dataset(self, split: str) -> ToyDataset:
        directory = self.path("data", split)
        if not has_payload_dir(directory):
            raise PipelineStateError(f"no {split} dataset in {self.workdir}; run gen-data first")
        manifest, arrays = read_payload_dir(directory)
        spec = manifest["spec"]
        return ToyDataset(
            images=arrays["images"],
            labels=np.asarray(manifest["labels"], dtype=np.int64),
            class_names=list(manifest["class_names"]),
            split=manifest["split"],
            spec=GeneratorSpec(shapes=tuple(spec["shapes"]), textures=tuple(spec["textures"]),
                               palette=tuple((name, tuple(rgb)) for name, rgb in spec["palette"]),
                               image_size=spec["image_size"], noise=spec["noise"]),
            colors=np.asarray(manifest["colors"], dtype=np.int64),
        )

    # --- backbone ---
    def save_backbone(self, model: ViTModel) -> None:
        save_model(model, self.path("backbone.lrcy"))
        logger.info("Saved backbone (%s)", model.digest()[:12])

    def load_backbone(self) -> ViTModel:
        path = self.path("backbone.lrcy")
        if not os.path.exists(path):
            raise PipelineStateError(f"no backbone in {self.workdir}; run pretune first")
        return load_model(path)

    def save_meta_backbone(self, model: ViTModel) -> None:
        save_model(model, self.path("meta_backbone.lrcy"))
        logger.info("Saved meta-trained backbone copy")

    def load_meta_backbone(self) -> Optional[ViTModel]:
        path = self.path("meta_backbone.lrcy")
        return load_model(path) if os.path.exists(path) else None

    def clear(self, *relative: str) -> None:
        """Remove stale outputs of a stage that is about to rerun."""
        for name in relative:
            path = self.path(name)
            if os.path.isdir(path):
                shutil.rmtree(path)
            elif os.path.exists(path):
                os.remove(path)

    # --- teachers ---
    def save_teacher(self, teacher_id: str, adapter: LoRAAdapter, head: ClassificationHead) -> str:
        path = self.path("teachers", f"{teacher_id}.lrcy")
        save_artifact(adapter, head, path)
        return path

    def teacher_ids(self) -> List[str]:
        directory = self.path("teachers")
        if not os.path.isdir(directory):
            return []
        return sorted(name[:-len(".lrcy")] for name in os.listdir(directory) if name.endswith(".lrcy"))

    def load_teachers(self) -> List[TeacherEntry]:
        ids = self.teacher_ids()
        if not ids:
            raise PipelineStateError(f"no teacher artifacts in {self.workdir}; run pretune first")
        teachers = []
        for teacher_id in ids:
            adapter, head = load_artifact(self.path("teachers", f"{teacher_id}.lrcy"))
            if head is None:
                raise ArtifactError(f"teacher {teacher_id} was saved without its head")
            teachers.append(TeacherEntry(teacher_id, adapter, head))
        logger.info("Loaded %d teacher artifacts", len(teachers))
        return teachers

    # --- generated tasks ---
    def save_tasks(self, teacher_id: str, tasks: List[GeneratedTask]) -> None:
        for index, task in enumerate(tasks):
            save_task(task, self.path("tasks", teacher_id, str(index)))

    def load_tasks(self) -> Dict[str, List[GeneratedTask]]:
        root = self.path("tasks")
        cache: Dict[str, List[GeneratedTask]] = {}
        if not os.path.isdir(root):
            return cache
        for teacher_id in sorted(os.listdir(root)):
            directory = os.path.join(root, teacher_id)
            indices = sorted((int(name) for name in os.listdir(directory) if name.isdigit()))
            cache[teacher_id] = [load_task(os.path.join(directory, str(i))) for i in indices]
        return cache

    # --- adapters produced by the run ---
    def save_adapter(self, name: str, adapter: LoRAAdapter, head: Optional[ClassificationHead] = None) -> None:
        save_artifact(adapter, head, self.path(f"{name}.lrcy"))
        logger.info("Saved %s", name)

    def load_adapter(self, name: str) -> Optional[Tuple[LoRAAdapter, Optional[ClassificationHead]]]:
        path = self.path(f"{name}.lrcy")
        if not os.path.exists(path):
            return None
        return load_artifact(path)

    # --- reports ---
    def write_json(self, relative: str, document: Dict) -> str:
        path = self.path(relative)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w") as f:
            json.dump(document, f, indent=4, sort_keys=True)
            f.write("\n")
        return path

    def log_path(self, name: str) -> str:
        path = self.path("logs", name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path
