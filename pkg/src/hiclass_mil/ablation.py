"""Ablation grid: flat baselines, integration variants and every loss-toggle subset."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass
from itertools import product
from pathlib import Path

from .evaluation import evaluate
from .losses import LossConfig
from .model import INTEGRATION_MODES, ModelConfig
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

TASKS = ("flat_coarse", "flat_fine", "hierarchical")
RESULT_COLUMNS = (
    "run_id", "task", "integration", "con", "int", "gce",
    "acc_coarse", "f1_coarse", "acc_fine", "f1_fine", "status",
)


@dataclass(frozen=True)
class AblationRun:
    run_id: str
    task: str
    integration: str = "bidirectional"
    con: bool = True
    int: bool = True
    gce: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"run {self.run_id}: task must be one of {TASKS}")
        if self.integration not in INTEGRATION_MODES:
            raise ValueError(f"run {self.run_id}: unknown integration {self.integration!r}")
        if self.task != "hierarchical" and (self.integration != "none" or self.con or self.int or self.gce):
            raise ValueError(f"run {self.run_id}: flat tasks take no integration and no hierarchy losses")

    def loss_config(self, alpha: float = 1.0) -> LossConfig:
        return LossConfig(
            enable_con=self.con, enable_int=self.int, enable_gce=self.gce, alpha=alpha,
            ce_coarse_weight=0.0 if self.task == "flat_fine" else 1.0,
            ce_fine_weight=0.0 if self.task == "flat_coarse" else 1.0,
        )


@dataclass
class AblationPlan:
    runs: list[AblationRun]
    dataset: str | None = None

    def __post_init__(self):
        ids = [r.run_id for r in self.runs]
        if len(set(ids)) != len(ids):
            raise ValueError("run ids must be unique")

    def to_json(self) -> str:
        return json.dumps(
            {"dataset": self.dataset, "runs": [dataclasses.asdict(r) for r in self.runs]}, indent=2
        ) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "AblationPlan":
        unknown = set(data) - {"dataset", "runs"}
        if unknown:
            raise ValueError(f"unknown plan keys: {sorted(unknown)}")
        known = {f.name for f in dataclasses.fields(AblationRun)}
        runs = []
        for raw in data.get("runs", []):
            extra = set(raw) - known
            if extra:
                raise ValueError(f"unknown run keys: {sorted(extra)}")
            runs.append(AblationRun(**raw))
        return cls(runs, data.get("dataset"))

    @classmethod
    def load(cls, path) -> "AblationPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_default_plan(seed: int = 0, dataset: str | None = None) -> AblationPlan:
    """Two flat baselines, three integration variants with all losses, and the
    eight loss subsets under bidirectional integration (13 runs)."""
    runs = [
        AblationRun("flat_coarse", "flat_coarse", "none", False, False, False, seed),
        AblationRun("flat_fine", "flat_fine", "none", False, False, False, seed),
        AblationRun("hier_none", "hierarchical", "none", True, True, True, seed),
        AblationRun("hier_fine_to_coarse", "hierarchical", "fine_to_coarse", True, True, True, seed),
        AblationRun("hier_coarse_to_fine", "hierarchical", "coarse_to_fine", True, True, True, seed),
    ]
    subsets = [
        (False, False, False), (True, False, False), (False, True, False), (False, False, True),
        (False, True, True), (True, False, True), (True, True, False), (True, True, True),
    ]
    assert sorted(subsets) == sorted(product((False, True), repeat=3))
    for con, int_, gce in subsets:
        tag = "".join("O" if on else "X" for on in (con, int_, gce))
        runs.append(AblationRun(f"bidir_{tag}", "hierarchical", "bidirectional", con, int_, gce, seed))
    return AblationPlan(runs, dataset)


def _mark(run: AblationRun, flag: bool) -> str:
    if run.task != "hierarchical":
        return "-"
    return "O" if flag else "X"


def run_plan(plan: AblationPlan, dataset, base_model: ModelConfig,
             train_config: TrainConfig = TrainConfig(), alpha: float = 1.0,
             eval_split: str = "test") -> list[dict]:
    """Train and evaluate each run in plan order; a failing run is recorded and skipped."""
    taxonomy = dataset.taxonomy
    rows = []
    for run in plan.runs:
        row = {
            "run_id": run.run_id, "task": run.task, "integration": run.integration,
            "con": _mark(run, run.con), "int": _mark(run, run.int), "gce": _mark(run, run.gce),
            "acc_coarse": "", "f1_coarse": "", "acc_fine": "", "f1_fine": "", "status": "ok",
        }
        try:
            model_config = dataclasses.replace(base_model, integration=run.integration)
            tc = dataclasses.replace(train_config, seed=run.seed)
            if run.task == "flat_coarse" and tc.checkpoint_policy == "best_val_fine_f1":
                tc = dataclasses.replace(tc, checkpoint_policy="last")
            result = train(dataset.split("train"), dataset.split("val"), taxonomy,
                           model_config, run.loss_config(alpha), tc)
            report = evaluate(result.params, model_config, dataset.split(eval_split), taxonomy)
            if run.task != "flat_fine":
                row["acc_coarse"] = f"{report.acc_coarse:.6f}"
                row["f1_coarse"] = f"{report.f1_macro_coarse:.6f}"
            if run.task != "flat_coarse":
                row["acc_fine"] = f"{report.acc_fine:.6f}"
                row["f1_fine"] = f"{report.f1_macro_fine:.6f}"
        except Exception as exc:  # one bad run must not sink the grid
            log.exception("run %s failed", run.run_id)
            row["status"] = f"error: {exc}"
        log.info("run %s: %s", run.run_id, row)
        rows.append(row)
    return rows


def results_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
