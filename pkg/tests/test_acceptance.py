"""Numbered acceptance criteria; a PASS/FAIL line per criterion is printed in the summary."""

import json
import math
import time
from importlib import resources

import numpy as np
import pytest

from hiclass_mil.cli import main
from hiclass_mil.datagen import Bag, DatasetSpec, decode_bag, encode_bag, iter_bags, read_bag, write_bag
from hiclass_mil.evaluation import evaluate
from hiclass_mil.gradcheck import TINY_DIMS, NearKink, check_gradients, loss_function, tiny_problem
from hiclass_mil.losses import LossConfig, ce_loss, con_loss, gce_loss, int_loss, total_loss
from hiclass_mil.model import (
    ModelConfig,
    backward,
    decode_checkpoint,
    encode_checkpoint,
    flatten_params,
    forward,
    init_params,
    load_checkpoint,
    param_shapes,
    project_and_classify,
    save_checkpoint,
)
from hiclass_mil.numerics import finite_diff_grad, relative_error
from hiclass_mil.taxonomy import balanced, gastric
from hiclass_mil.trainer import TrainConfig, train

acceptance = pytest.mark.acceptance


@acceptance(1, "analytic gradients match central differences on 20 seeds, < 1 min")
def test_gradient_correctness():
    start = time.perf_counter()
    results, seed = [], 0
    while len(results) < 20:
        try:
            results.append(check_gradients(seed, TINY_DIMS, LossConfig(alpha=1.0), h=1e-5, tolerance=1e-4))
        except NearKink:
            pass
        seed += 1
    elapsed = time.perf_counter() - start
    worst = max(max(r.max_rel_error.values()) for r in results)
    print(f"20 seeds checked (tried {seed}), worst rel err {worst:.2e}, {elapsed:.1f}s")
    failed = {r.seed: r.failed_blocks for r in results if not r.passed}
    assert not failed
    cfg = tiny_problem(TINY_DIMS, 0)[0]
    assert list(results[0].max_rel_error) == list(param_shapes(cfg))  # every block checked
    assert elapsed < 60


@acceptance(2, "stop-gradient gate blocks cross-branch gradient; forward unchanged")
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_gate_nullity(seed):
    cfg, tax, params, x, coarse, fine = tiny_problem(TINY_DIMS, seed, "bidirectional", "attention")
    s = cfg.split
    trace = forward(x, params, cfg)

    # coarse CE: no gradient leaves the gate toward the fine half, and vice versa
    _, g = ce_loss(trace.o_c, coarse)
    coarse_grads, nodes = backward(trace, params, cfg, d_o_c=g, return_nodes=True)
    assert np.all(nodes["v_f"] == 0.0)
    assert not any(coarse_grads[k].any() for k in ("proj_f_W", "proj_f_b", "cls_f_W", "cls_f_b"))
    _, g = ce_loss(trace.o_f, fine)
    fine_grads, nodes = backward(trace, params, cfg, d_o_f=g, return_nodes=True)
    assert np.all(nodes["v_c"] == 0.0)
    assert not any(fine_grads[k].any() for k in ("proj_c_W", "proj_c_b", "cls_c_W", "cls_c_b"))

    # with a pooling that has no shared attention path, the half-specific patch rows are fully isolated
    mcfg, _, mparams, mx, _, _ = tiny_problem(TINY_DIMS, seed, "bidirectional", "mean")
    mtrace = forward(mx, mparams, mcfg)
    _, g = ce_loss(mtrace.o_c, coarse)
    mg = backward(mtrace, mparams, mcfg, d_o_c=g)
    assert np.all(mg["patch_W"][s:] == 0.0) and np.all(mg["patch_b"][s:] == 0.0)
    _, g = ce_loss(mtrace.o_f, fine)
    mg = backward(mtrace, mparams, mcfg, d_o_f=g)
    assert np.all(mg["patch_W"][:s] == 0.0) and np.all(mg["patch_b"][:s] == 0.0)

    # gated gradient equals FD of the loss with the cross copies held constant
    _, seeds = total_loss(trace, coarse, fine, tax)
    gated = backward(trace, params, cfg, seeds.d_o_c, seeds.d_o_f, seeds.d_f_c, seeds.d_f_f)
    frozen = (trace.v_c.copy(), trace.v_f.copy())
    fd = finite_diff_grad(loss_function(cfg, tax, x, coarse, fine, LossConfig(), frozen_cross=frozen),
                          flatten_params(params, cfg))
    assert relative_error(flatten_params(gated, cfg), fd).max() < 1e-4

    # forward is bit-identical to plain concatenation
    plain_c = np.concatenate([trace.slide[:s], trace.slide[s:]])
    plain_f = np.concatenate([trace.slide[s:], trace.slide[:s]])
    _, _, o_c, o_f = project_and_classify(plain_c, plain_f, params, cfg)
    assert np.array_equal(o_c, trace.o_c) and np.array_equal(o_f, trace.o_f)


@acceptance(3, "loss identities (group CE, consistency, distance margin, uniform CE)")
def test_loss_identities(rng):
    one = balanced(14, 1)
    for _ in range(50):
        logits = rng.normal(scale=4, size=14)
        t = int(rng.integers(14))
        assert abs(gce_loss(logits, t, one)[0] - ce_loss(logits, t)[0]) <= 1e-12

    f_c, f_f = rng.normal(size=(4, 6)), rng.normal(size=(14, 6))
    f_f[2] = f_c[1]
    assert con_loss(f_c, f_f, np.eye(4)[1], np.eye(14)[2])[0] == 0.0

    tax = gastric()
    same = np.tile(rng.normal(size=6), (14, 1))
    for t in range(14):
        for alpha in (0.5, 1.0, 2.0):
            assert int_loss(same, t, tax, alpha)[0] == len(tax.complement_of(t)) * alpha

    for k in (2, 4, 14):
        assert abs(ce_loss(np.full(k, 1.7), 0)[0] - math.log(k)) <= 1e-12


@acceptance(4, "permuting patches changes no logit by more than 1e-10 (100 bags)")
def test_mil_invariance(rng):
    tax = gastric()
    cfg = ModelConfig(dim=64, n_coarse=tax.n_coarse, n_fine=tax.n_fine)
    params = init_params(cfg, 0)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=(int(rng.integers(1, 48)), 64))
        a = forward(x, params, cfg)
        b = forward(x[rng.permutation(len(x))], params, cfg)
        worst = max(worst, np.abs(a.o_c - b.o_c).max(), np.abs(a.o_f - b.o_f).max())
    print(f"max logit change {worst:.2e}")
    assert worst <= 1e-10


@pytest.mark.slow
@acceptance(5, "separable synthetic run: coarse >= 0.95, fine >= 0.85, consistency >= fine, < 10 min")
def test_functional_learning_run():
    tax = gastric()
    spec = DatasetSpec(taxonomy=tax, dim=64, slides_per_fine_class={"train": 20, "val": 5, "test": 5},
                       master_seed=7)
    bags = {"train": [], "val": [], "test": []}
    for split, bag in iter_bags(spec):
        bags[split].append(bag)
    cfg = ModelConfig(dim=64, n_coarse=tax.n_coarse, n_fine=tax.n_fine)
    start = time.perf_counter()
    result = train(bags["train"], bags["val"], tax, cfg, LossConfig(), TrainConfig())
    report = evaluate(result.params, cfg, bags["test"], tax)
    elapsed = time.perf_counter() - start
    print(f"coarse {report.acc_coarse:.4f} fine {report.acc_fine:.4f} "
          f"consistency {report.consistency_rate:.4f} in {elapsed:.0f}s")
    assert report.acc_coarse >= 0.95
    assert report.acc_fine >= 0.85
    assert report.consistency_rate >= report.acc_fine
    assert elapsed < 600


def reduced_config(path):
    """Bundled tiny config with 5 bags per fine class in each split and 5 epochs."""
    raw = json.loads(resources.files("hiclass_mil").joinpath("data/tiny.json").read_text())
    raw["dataset"]["slides_per_fine_class"] = {"train": 5, "val": 5, "test": 5}
    raw["train"]["epochs"] = 5
    path.write_text(json.dumps(raw))
    return path


@pytest.mark.slow
@acceptance(6, "default ablation plan: 13 well-formed rows, byte-identical rerun")
def test_ablation_grid(tmp_path):
    import csv

    from hiclass_mil.ablation import RESULT_COLUMNS

    cfg = reduced_config(tmp_path / "reduced.json")
    data = tmp_path / "data"
    assert main(["gen", "--config", str(cfg), "--out", str(data)]) == 0
    outputs = []
    for k in range(2):
        out = tmp_path / f"ablate{k}"
        assert main(["ablate", "--default-plan", "--config", str(cfg), "--data", str(data),
                     "--out", str(out)]) == 0
        outputs.append((out / "ablation_results.csv").read_bytes())
    rows = list(csv.DictReader(outputs[0].decode().splitlines()))
    assert len(rows) == 13
    assert tuple(rows[0]) == RESULT_COLUMNS
    assert all(r["status"] == "ok" for r in rows)
    for r in rows:
        for col in ("acc_coarse", "f1_coarse", "acc_fine", "f1_fine"):
            if r[col]:
                assert 0.0 <= float(r[col]) <= 1.0
    assert outputs[0] == outputs[1]


@pytest.mark.slow
@acceptance(7, "gen -> train -> eval twice gives byte-identical files")
def test_end_to_end_determinism(tmp_path):
    def pipeline(root):
        assert main(["gen", "--out", str(root / "data")]) == 0
        assert main(["train", "--data", str(root / "data"), "--out", str(root / "run")]) == 0
        assert main(["eval", "--checkpoint", str(root / "run" / "checkpoint.hckp"),
                     "--data", str(root / "data"), "--out", str(root / "eval")]) == 0
        return {p.relative_to(root).as_posix(): p.read_bytes()
                for p in sorted(root.rglob("*")) if p.is_file()}

    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    assert a.keys() == b.keys()
    assert {"run/checkpoint.hckp", "run/train_log.csv", "eval/report.json", "data/manifest.json"} <= a.keys()
    assert [k for k in a if a[k] != b[k]] == []


@acceptance(8, "bag and checkpoint write/read identity on 1000 random instances each")
def test_format_roundtrips(tmp_path, rng):
    for i in range(1000):
        n, d = int(rng.integers(1, 20)), int(rng.integers(1, 40))
        feats = rng.normal(scale=10.0 ** rng.integers(-3, 4), size=(n, d)).astype(np.float32)
        bag = Bag(f"s{i}", feats, int(rng.integers(0, 2**31)), int(rng.integers(0, 2**31)))
        path = tmp_path / f"s{i}.hmil"
        write_bag(bag, path)
        back = read_bag(path)
        assert back.slide_id == bag.slide_id
        assert (back.coarse_label, back.fine_label) == (bag.coarse_label, bag.fine_label)
        assert back.features.dtype == np.float32 and np.array_equal(back.features, feats)
        assert encode_bag(decode_bag(encode_bag(bag))) == encode_bag(bag)

    modes = ("none", "fine_to_coarse", "coarse_to_fine", "bidirectional")
    for i in range(1000):
        split = int(rng.integers(1, 4))
        cfg = ModelConfig(
            dim=int(rng.integers(1, 6)), n_coarse=int(rng.integers(1, 4)), n_fine=int(rng.integers(1, 6)),
            hidden=2 * split, split=split, proj=int(rng.integers(1, 4)), attn=int(rng.integers(1, 4)),
            integration=modes[i % 4], aggregator=("attention", "max", "mean")[i % 3],
        )
        params = {k: rng.normal(size=v.shape) * 10.0 ** rng.integers(-5, 5)
                  for k, v in init_params(cfg, i).items()}
        path = tmp_path / "ck.hckp"
        save_checkpoint(path, params, cfg)
        back, cfg2 = load_checkpoint(path)
        assert cfg2 == cfg
        assert back.keys() == params.keys()
        assert all(np.array_equal(back[k], params[k]) for k in params)
        assert encode_checkpoint(*decode_checkpoint(path.read_bytes())) == path.read_bytes()
