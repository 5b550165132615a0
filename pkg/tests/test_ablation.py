import csv
import io
from itertools import product

import pytest

from hiclass_mil.ablation import (
    RESULT_COLUMNS,
    AblationPlan,
    AblationRun,
    build_default_plan,
    results_csv,
    run_plan,
)
from hiclass_mil.datagen import Dataset
from hiclass_mil.trainer import TrainConfig


@pytest.fixture(scope="module")
def small_dataset(small_split):
    tax, bags = small_split
    return Dataset(None, tax, [], bags)


def test_default_plan_shape():
    plan = build_default_plan(seed=3, dataset="abc")
    assert len(plan.runs) == 13
    assert len({r.run_id for r in plan.runs}) == 13
    assert all(r.seed == 3 for r in plan.runs)
    bidir = [r for r in plan.runs if r.integration == "bidirectional"]
    assert {(r.con, r.int, r.gce) for r in bidir} == set(product((False, True), repeat=3))
    assert {r.integration for r in plan.runs if r.task == "hierarchical"} == {
        "none", "fine_to_coarse", "coarse_to_fine", "bidirectional"}


def test_all_off_row_is_plain_ce():
    run = next(r for r in build_default_plan().runs if r.run_id == "bidir_XXX")
    cfg = run.loss_config()
    assert not (cfg.enable_con or cfg.enable_int or cfg.enable_gce)
    assert cfg.ce_coarse_weight == cfg.ce_fine_weight == 1.0


def test_flat_runs_zero_other_level():
    assert AblationRun("a", "flat_coarse", "none", False, False, False).loss_config().ce_fine_weight == 0
    assert AblationRun("b", "flat_fine", "none", False, False, False).loss_config().ce_coarse_weight == 0
    with pytest.raises(ValueError):
        AblationRun("c", "flat_fine", "bidirectional", False, False, False)
    with pytest.raises(ValueError):
        AblationRun("d", "flat", "none", False, False, False)


def test_plan_ids_unique_and_roundtrip():
    run = AblationRun("x", "hierarchical")
    with pytest.raises(ValueError, match="unique"):
        AblationPlan([run, run])
    plan = build_default_plan(1, "digest")
    import json
    again = AblationPlan.from_dict(json.loads(plan.to_json()))
    assert again == plan
    with pytest.raises(ValueError):
        AblationPlan.from_dict({"runs": [{"run_id": "a", "task": "hierarchical", "lr": 1}]})


def test_two_run_plan(small_dataset, small_model):
    plan = AblationPlan([
        AblationRun("flat", "flat_coarse", "none", False, False, False),
        AblationRun("full", "hierarchical"),
    ])
    rows = run_plan(plan, small_dataset, small_model, TrainConfig(epochs=1))
    assert [r["run_id"] for r in rows] == ["flat", "full"]
    assert rows[0]["acc_fine"] == "" and rows[0]["acc_coarse"] != ""
    assert rows[0]["con"] == "-" and rows[1]["con"] == "O"
    assert all(r["status"] == "ok" for r in rows)
    text = results_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert len(parsed) == 2 and tuple(parsed[0]) == RESULT_COLUMNS
    assert text == results_csv(run_plan(plan, small_dataset, small_model, TrainConfig(epochs=1)))


def test_failed_run_recorded(small_dataset, small_model):
    import dataclasses

    bad_model = dataclasses.replace(small_model, dim=99)
    rows = run_plan(AblationPlan([AblationRun("r", "hierarchical")]), small_dataset, bad_model,
                    TrainConfig(epochs=1))
    assert rows[0]["status"].startswith("error:")
