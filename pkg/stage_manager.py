import enum
import json
import logging
import os
from typing import Dict, List, Optional

from utils.errors import PipelineStateError

logger = logging.getLogger(__name__)


class PipelineStage(enum.Enum):
    INIT = 0
    DATA = 1
    BACKBONE = 2
    TEACHERS = 3
    INVERSION = 4
    META = 5
    EVAL = 6
    FLOPS = 7


# Stages whose outputs a stage reads
REQUIRES: Dict[PipelineStage, List[PipelineStage]] = {
    PipelineStage.DATA: [],
    PipelineStage.BACKBONE: [PipelineStage.DATA],
    PipelineStage.TEACHERS: [PipelineStage.BACKBONE],
    PipelineStage.INVERSION: [PipelineStage.TEACHERS],
    PipelineStage.META: [PipelineStage.TEACHERS],
    PipelineStage.EVAL: [PipelineStage.BACKBONE],
    PipelineStage.FLOPS: [],
}


class StageManager:
    def __init__(self, stage_file: Optional[str] = None):
        """Track which pipeline stages have completed in a workspace."""
        self.stage_file = stage_file
        self.current_stage = PipelineStage.INIT
        self.completed: List[PipelineStage] = []
        self.history: List[PipelineStage] = []
        if stage_file and os.path.exists(stage_file):
            self._load()

    def is_complete(self, stage: PipelineStage) -> bool:
        return stage in self.completed

    def require(self, stage: PipelineStage) -> None:
        """Raise unless every stage ``stage`` depends on has completed."""
        missing = [s.name.lower() for s in REQUIRES.get(stage, []) if s not in self.completed]
        if missing:
            raise PipelineStateError(f"stage {stage.name.lower()} needs {', '.join(missing)} to run first")

    def begin(self, stage: PipelineStage) -> None:
        self.require(stage)
        self.history.append(self.current_stage)
        self.current_stage = stage
        logger.info("Stage %s started", stage.name.lower())

    def complete(self, stage: PipelineStage) -> None:
        if stage not in self.completed:
            self.completed.append(stage)
        self.current_stage = stage
        self._save()
        logger.info("Stage %s complete", stage.name.lower())

    def invalidate_after(self, stage: PipelineStage) -> None:
        """Forget stages that consumed the outputs of ``stage``, which is being rerun."""
        downstream = {stage}
        changed = True
        while changed:
            changed = False
            for s, deps in REQUIRES.items():
                if s not in downstream and any(d in downstream for d in deps):
                    downstream.add(s)
                    changed = True
        downstream.discard(stage)
        self.completed = [s for s in self.completed if s not in downstream]

    def _load(self) -> None:
        try:
            with open(self.stage_file, "r") as f:
                names = json.load(f).get("completed", [])
            self.completed = [PipelineStage[name] for name in names]
        except (OSError, json.JSONDecodeError, KeyError) as e:
            logger.warning("Ignoring unreadable stage file %s: %s", self.stage_file, e)
            self.completed = []

    def _save(self) -> None:
        if not self.stage_file:
            return
        os.makedirs(os.path.dirname(os.path.abspath(self.stage_file)), exist_ok=True)
        with open(self.stage_file, "w") as f:
            json.dump({"completed": [s.name for s in self.completed]}, f, indent=4)
