import logging
import queue
import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from harness.toy_data import ToyDataset, probe_images, real_tasks
from inversion.invert import InversionConfig, invert
from inversion.regularizer import StatRegularizer, fit_stat_regularizer
from inversion.tasks import GeneratedTask, build_task
from meta.trainer import TeacherEntry
from model.vit import ViTModel
from utils.errors import ConfigError, CountError
from utils.helpers import derive_seed

logger = logging.getLogger(__name__)

# (teacher index, copy index, teacher)
_Job = Tuple[int, int, TeacherEntry]


class TaskManager:
    def __init__(self, settings: Dict, seed: int = 0):
        """Turn teachers into few-shot tasks, by inversion or from real images."""
        self.settings = settings
        self.seed = seed
        self.inversion = InversionConfig.from_settings(settings, seed)
        meta = settings["meta"]
        self.n_way = meta["n_way"]
        self.k_shot = meta["k_shot"]
        # every inverted image not used as support becomes a query
        self.q_query = self.inversion.images_per_class - self.k_shot
        if self.q_query < 1:
            raise ConfigError(f"inversion.images_per_class ({self.inversion.images_per_class}) must exceed "
                              f"meta.k_shot ({self.k_shot})")

    def fit_regularizer(self, dataset: ToyDataset) -> Optional[StatRegularizer]:
        """Statistics of a small probe set of meta-train images, or None when alpha_r is 0."""
        if self.inversion.alpha_r == 0:
            return None
        count = self.settings["dataset"]["probe_images"]
        probe = probe_images(dataset, count, seed=self.seed)
        return fit_stat_regularizer(probe, extractor_seed=self.seed, alpha_r=self.inversion.alpha_r)

    def generate(self, model: ViTModel, teacher: TeacherEntry, reg: Optional[StatRegularizer],
                 seed: int) -> GeneratedTask:
        """Invert one teacher and split its batch into a task."""
        cfg = InversionConfig(
            iterations=self.inversion.iterations,
            lr=self.inversion.lr,
            images_per_class=self.inversion.images_per_class,
            alpha_r=self.inversion.alpha_r,
            plan=self.inversion.plan,
            seed=seed,
            track_regions=self.inversion.track_regions,
            checkpoint_every=self.inversion.checkpoint_every,
        )
        if teacher.head.num_classes != self.n_way:
            raise CountError(f"teacher {teacher.teacher_id} has {teacher.head.num_classes} classes; "
                             f"tasks are {self.n_way}-way")
        result = invert(teacher.adapter, teacher.head, model, cfg, reg)
        if cfg.track_regions:
            for it, fg, bg in result.region_trace:
                logger.debug("%s it %d: foreground CE %.4f, background CE %.4f", teacher.teacher_id, it, fg, bg)
        return build_task(result.images, result.mask_grids, result.labels, self.n_way, self.k_shot, self.q_query,
                          class_names=teacher.head.labels, source=teacher.teacher_id)

    def generator_for(self, model: ViTModel, reg: Optional[StatRegularizer]) -> Callable[[TeacherEntry], GeneratedTask]:
        """On-the-fly generation hook for the meta-trainer."""
        counter = iter(range(1 << 30))
        return lambda teacher: self.generate(model, teacher, reg, derive_seed(self.seed, 1 << 20, next(counter)))

    def generate_all(self, model: ViTModel, teachers: Sequence[TeacherEntry], reg: Optional[StatRegularizer],
                     tasks_per_teacher: int = 1, workers: int = 1,
                     on_task: Optional[Callable[[str, int, GeneratedTask], None]] = None
                     ) -> Dict[str, List[GeneratedTask]]:
        """Invert every teacher ``tasks_per_teacher`` times.

        Worker threads pull jobs from a queue; seeds depend only on the job,
        so the cache is the same for any worker count.
        """
        if tasks_per_teacher < 1:
            raise ConfigError(f"tasks_per_teacher must be positive, got {tasks_per_teacher}")
        jobs: "queue.Queue[Optional[_Job]]" = queue.Queue()
        for i, teacher in enumerate(teachers):
            for copy in range(tasks_per_teacher):
                jobs.put((i, copy, teacher))
        workers = max(1, min(workers, jobs.qsize()))
        for _ in range(workers):
            jobs.put(None)

        results: Dict[Tuple[int, int], GeneratedTask] = {}
        errors: List[BaseException] = []
        lock = threading.Lock()

        def work():
            while True:
                job = jobs.get()
                if job is None:
                    return
                i, copy, teacher = job
                with lock:
                    if errors:
                        continue
                try:
                    task = self.generate(model, teacher, reg, seed=derive_seed(self.seed, i, copy))
                except Exception as e:  # surfaced on the calling thread
                    with lock:
                        errors.append(e)
                    continue
                with lock:
                    results[(i, copy)] = task
                    if on_task is not None:
                        on_task(teacher.teacher_id, copy, task)
                logger.info("Generated task %d for teacher %s", copy, teacher.teacher_id)

        threads = [threading.Thread(target=work, name=f"invert-{n}", daemon=True) for n in range(workers)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        if errors:
            raise errors[0]

        cache: Dict[str, List[GeneratedTask]] = {}
        for (i, copy) in sorted(results):
            cache.setdefault(teachers[i].teacher_id, []).append(results[(i, copy)])
        return cache

    def real_cache(self, model: ViTModel, dataset: ToyDataset,
                   teachers: Sequence[TeacherEntry]) -> Dict[str, List[GeneratedTask]]:
        """Tasks of real meta-train images over each teacher's classes."""
        classes = {t.teacher_id: list(t.head.labels) for t in teachers}
        tasks = real_tasks(dataset, classes, self.k_shot, self.settings["meta"]["q_query"],
                           model.cfg.grid_size, seed=self.seed)
        return {tid: [task] for tid, task in tasks.items()}


def sparse_summary(cache: Dict[str, List[GeneratedTask]]) -> float:
    """Mean fraction of dropped patches across all cached images."""
    ratios = [1.0 - grid.mean() for tasks in cache.values() for task in tasks
              for grid in np.concatenate([task.support_masks, task.query_masks])]
    return float(np.mean(ratios)) if ratios else 0.0
