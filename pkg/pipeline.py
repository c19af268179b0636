import logging
import os
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

from artifact_manager import ArtifactManager
from report_manager import ReportManager
from stage_manager import PipelineStage, StageManager
from task_manager import TaskManager, sparse_summary
from harness.episodes import sample_episodes
from harness.evaluate import EvalReport, evaluate
from harness.flops_table import FlopsRow, report_flops_table
from harness.pretune import pretrain_backbone, pretune_teacher, teacher_class_subsets, teacher_ranks
from harness.toy_data import CROSS_DOMAIN_SPEC, GeneratorSpec, make_toy_dataset
from lora.adapter import average_adapters, random_adapter, scale_matched_adapter
from meta.joint import JointConfig, joint_train
from meta.trainer import MetaTrainConfig, meta_train
from model.flops import VIT_B
from model.pruning import PrunePlan
from model.vit import ViTConfig, ViTModel
from tensor.tensor import set_precision
from utils.constants import EvalMethod, TaskSource
from utils.errors import ConfigError, IncompatibleAdapterError, PipelineStateError, ValidationError
from utils.settings import save_settings

logger = logging.getLogger(__name__)

META_LOG = "meta_train.jsonl"


class Pipeline:
    def __init__(self, settings: Dict):
        """Set up the managers for one run directory."""
        self.settings = settings
        runtime = settings["runtime"]
        self.seed = int(runtime["seed"])
        self.workers = int(runtime["workers"])
        self.progress = bool(runtime["progress"])
        set_precision(runtime["precision"])

        workdir = runtime["workdir"]
        self.artifact_manager = ArtifactManager(workdir)
        self.stage_manager = StageManager(os.path.join(workdir, "stages.json"))
        self.task_manager = TaskManager(settings, seed=self.seed)
        self.report_manager = ReportManager()

        save_settings(settings, os.path.join(workdir, "settings.json"))

    @property
    def model_config(self) -> ViTConfig:
        return ViTConfig.from_settings(self.settings)

    def _start(self, stage: PipelineStage) -> None:
        self.stage_manager.begin(stage)
        self.stage_manager.invalidate_after(stage)

    # --- stages ---
    def gen_data(self):
        self._start(PipelineStage.DATA)
        section = self.settings["dataset"]
        size = section["image_size"]
        spec = replace(GeneratorSpec(), image_size=size)
        test_spec = replace(CROSS_DOMAIN_SPEC, image_size=size) if section["cross_domain"] else None
        train, test = make_toy_dataset(spec, section["train_classes"], section["test_classes"],
                                       section["images_per_class"], seed=self.seed, test_spec=test_spec)
        self.artifact_manager.save_dataset(train)
        self.artifact_manager.save_dataset(test)
        self.stage_manager.complete(PipelineStage.DATA)
        return train, test

    def pretune(self) -> List[float]:
        """Pretrain the desk backbone, then tune every teacher on it."""
        self._start(PipelineStage.BACKBONE)
        train = self.artifact_manager.load_dataset("meta-train")
        b = self.settings["backbone"]
        model = ViTModel(self.model_config, seed=self.seed)
        pretrain_backbone(model, train, b["pretrain_steps"], b["pretrain_lr"], b["batch_size"],
                          seed=self.seed, progress=self.progress, target=b["pretrain_target"])
        self.artifact_manager.save_backbone(model)
        self.stage_manager.complete(PipelineStage.BACKBONE)

        self._start(PipelineStage.TEACHERS)
        self.artifact_manager.clear("teachers")
        t = self.settings["teachers"]
        subsets = teacher_class_subsets(train.class_names, t["count"], t["ways"], seed=self.seed)
        ranks = teacher_ranks(t["ranks"], len(subsets))
        accuracies = []
        for i, (classes, rank) in enumerate(zip(subsets, ranks)):
            teacher_id = f"t{i:03d}"
            result = pretune_teacher(model, train, classes, seed=self.seed + i, rank=rank, lr=t["lr"],
                                     max_steps=t["max_steps"], target_accuracy=t["target_accuracy"],
                                     batch_size=t["batch_size"], progress=self.progress, teacher_id=teacher_id)
            self.artifact_manager.save_teacher(teacher_id, result.adapter, result.head)
            accuracies.append(result.accuracy)
        logger.info("Saved %d teachers (mean train accuracy %.1f%%)", len(accuracies),
                    100 * sum(accuracies) / max(1, len(accuracies)))
        self.stage_manager.complete(PipelineStage.TEACHERS)
        return accuracies

    def invert(self, tasks_per_teacher: int = 1):
        self._start(PipelineStage.INVERSION)
        model = self.artifact_manager.load_backbone()
        teachers = self.artifact_manager.load_teachers()
        train = self.artifact_manager.load_dataset("meta-train")
        reg = self.task_manager.fit_regularizer(train)
        self.artifact_manager.clear("tasks")
        cache = self.task_manager.generate_all(model, teachers, reg, tasks_per_teacher, workers=self.workers)
        for teacher_id, tasks in cache.items():
            self.artifact_manager.save_tasks(teacher_id, tasks)
        logger.info("Saved %d tasks (mean sparse ratio %.2f)", sum(len(v) for v in cache.values()),
                    sparse_summary(cache))
        self.stage_manager.complete(PipelineStage.INVERSION)
        return cache

    def meta_train(self):
        self._start(PipelineStage.META)
        model = self.artifact_manager.load_backbone()
        teachers = self.artifact_manager.load_teachers()
        cfg = MetaTrainConfig.from_settings(self.settings, seed=self.seed)

        generate = None
        if self.settings["meta"]["task_source"] == TaskSource.REAL.value:
            train = self.artifact_manager.load_dataset("meta-train")
            cache = self.task_manager.real_cache(model, train, teachers)
        else:
            cache = self.artifact_manager.load_tasks()
            if not cache:
                logger.info("No cached tasks; generating on the fly")
                train = self.artifact_manager.load_dataset("meta-train")
                generate = self.task_manager.generator_for(model, self.task_manager.fit_regularizer(train))

        log_path = self.artifact_manager.log_path(META_LOG)
        if os.path.exists(log_path):
            os.remove(log_path)
        self.artifact_manager.clear("meta_backbone.lrcy", "joint_lora.lrcy")
        result = meta_train(model, teachers, cache, cfg, log_path=log_path, generate=generate)
        self.artifact_manager.save_adapter("meta_lora", result.meta.adapter)
        if result.meta.backbone is not None:
            result.meta.backbone.freeze()
            self.artifact_manager.save_meta_backbone(result.meta.backbone)

        if EvalMethod.JOINT_LORA.value in self.settings["eval"]["methods"]:
            tasks = [task for tasks in cache.values() for task in tasks]
            joint_cfg = JointConfig(rank=cfg.rank, lr=self.settings["teachers"]["lr"], seed=self.seed,
                                    progress=self.progress)
            adapter, head = joint_train(model, tasks, joint_cfg)
            self.artifact_manager.save_adapter("joint_lora", adapter, head)
        self.stage_manager.complete(PipelineStage.META)
        return result

    def _method_adapters(self, method: str, model: ViTModel) -> Optional[Sequence]:
        """Adapters to attach for ``method``; None when its artifact is missing."""
        if method == EvalMethod.NN_BASELINE.value:
            return []
        if method == EvalMethod.META_LORA.value:
            loaded = self.artifact_manager.load_adapter("meta_lora")
            return None if loaded is None else [loaded[0]]
        if method == EvalMethod.JOINT_LORA.value:
            loaded = self.artifact_manager.load_adapter("joint_lora")
            return None if loaded is None else [loaded[0]]
        if method == EvalMethod.LORAS_AVG_NN.value:
            if not self.artifact_manager.teacher_ids():
                return None
            return [average_adapters([t.adapter for t in self.artifact_manager.load_teachers()])]
        if method == EvalMethod.RANDOM_LORA.value:
            loaded = self.artifact_manager.load_adapter("meta_lora")
            if loaded is not None:
                return [scale_matched_adapter(loaded[0], seed=self.seed)]
            return [random_adapter(model.cfg, rank=self.settings["meta"]["rank"], seed=self.seed)]
        raise ConfigError(f"unknown evaluation method {method!r}")

    def _resolve_methods(self, names: Sequence[str], model: ViTModel) -> Dict[str, Sequence]:
        methods = {}
        for name in names:
            try:
                methods[name] = self._method_adapters(name, model)
            except IncompatibleAdapterError as e:
                # averaging cannot mix ranks; the other methods still run
                logger.warning("Skipping %s: %s", name, e)
        return methods

    def evaluate(self) -> EvalReport:
        self._start(PipelineStage.EVAL)
        e = self.settings["eval"]
        model = self.artifact_manager.load_backbone()
        test = self.artifact_manager.load_dataset("meta-test")
        episodes = sample_episodes(test, e["episodes"], e["n_way"], e["k_shot"], e["q_query"], seed=self.seed)
        distance = self.settings["meta"]["distance"]
        before = model.digest()

        methods = self._resolve_methods(e["methods"], model)
        missing = [m for m, adapters in methods.items() if adapters is None]
        if missing:
            raise PipelineStateError(f"no artifact for {', '.join(missing)}; run meta-train first")

        meta_backbone = self.artifact_manager.load_meta_backbone()
        on_backbone = {m: a for m, a in methods.items()
                       if not (m == EvalMethod.META_LORA.value and meta_backbone is not None)}
        report = evaluate(model, on_backbone, episodes, e["sparse_ratio"], self.workers, distance)
        if meta_backbone is not None and EvalMethod.META_LORA.value in methods:
            own = evaluate(meta_backbone, {EvalMethod.META_LORA.value: methods[EvalMethod.META_LORA.value]},
                           episodes, e["sparse_ratio"], self.workers, distance)
            report.results = {m: (own if m in own.results else report).results[m] for m in methods}
            report.throughput.update(own.throughput)

        if model.digest() != before:
            raise ValidationError("evaluation changed backbone weights")
        self.artifact_manager.write_json(os.path.join("reports", "eval.json"),
                                         self.report_manager.eval_document(report))
        self.artifact_manager.write_json(os.path.join("reports", "timings.json"),
                                         self.report_manager.timings_document(report))
        self.report_manager.show(self.report_manager.eval_table(report))
        self.stage_manager.complete(PipelineStage.EVAL)
        return report

    def flops(self) -> List[FlopsRow]:
        self._start(PipelineStage.FLOPS)
        f = self.settings["flops"]
        if f["reference"] == "vit-b":
            cfg = VIT_B
        elif f["reference"] == "desk":
            cfg = self.model_config
        else:
            raise ConfigError(f"unknown flops reference {f['reference']!r}; use vit-b or desk")
        plans = [PrunePlan.parse(text) for text in f["plans"]]
        model = ViTModel(cfg, seed=self.seed) if f["measure"] else None
        rows = report_flops_table(cfg, plans, f["sparse_ratios"], model=model, seed=self.seed)
        self.artifact_manager.write_json(os.path.join("reports", "flops.json"),
                                         self.report_manager.flops_document(rows))
        if model is not None:
            self.artifact_manager.write_json(os.path.join("reports", "flops_timings.json"),
                                             self.report_manager.timings_document(rows=rows))
        self.report_manager.show(self.report_manager.flops_table(rows))
        self.stage_manager.complete(PipelineStage.FLOPS)
        return rows

    def run_all(self) -> EvalReport:
        self.gen_data()
        self.pretune()
        self.invert()
        self.meta_train()
        report = self.evaluate()
        self.flops()
        return report
