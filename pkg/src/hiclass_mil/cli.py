"""Command-line entry point: gen, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
Logs go to stderr; artifacts go to files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import ablation, gradcheck
from .config import ConfigError, bundled_tiny, load_config
from .datagen import dataset_digest, generate_dataset, load_dataset
from .evaluation import confusion_csv, evaluate
from .losses import LossConfig
from .model import load_checkpoint
from .trainer import train

log = logging.getLogger("hiclass_mil")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config(args):
    return load_config(args.config) if args.config else bundled_tiny()


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else cfg.output
    if out is None:
        raise UsageError("no output directory: pass --out or set 'output' in the config")
    spec = cfg.dataset_spec()
    manifest = generate_dataset(spec, out)
    log.info("wrote %d bags to %s", len(manifest), out)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    tc = cfg.train
    if args.epochs is not None:
        if args.epochs < 1:
            raise UsageError("--epochs must be >= 1")
        tc = dataclasses.replace(tc, epochs=args.epochs)
    if args.seed is not None:
        tc = dataclasses.replace(tc, seed=args.seed)
    out = Path(args.out) if args.out else cfg.output
    if out is None:
        raise UsageError("no output directory: pass --out or set 'output' in the config")
    data = load_dataset(args.data)
    model_config = cfg.model_config(data.dim, data.taxonomy)
    result = train(data.split("train"), data.split("val"), data.taxonomy, model_config,
                   cfg.loss, tc, out_dir=out)
    log.info("trained %d steps; checkpoint from epoch %d in %s", result.n_steps, result.selected_epoch, out)
    return 0


def cmd_eval(args) -> int:
    params, config = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    report = evaluate(params, config, data.split(args.split), data.taxonomy, restricted=args.restricted)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        (out / "confusion_coarse.csv").write_text(
            confusion_csv(report.confusion_coarse, data.taxonomy.coarse_names), encoding="utf-8")
        (out / "confusion_fine.csv").write_text(
            confusion_csv(report.confusion_fine, data.taxonomy.fine_names), encoding="utf-8")
        log.info("coarse acc %.4f, fine acc %.4f; report in %s", report.acc_coarse, report.acc_fine, out)
    else:
        sys.stdout.write(report.to_json())
    return 0


def cmd_ablate(args) -> int:
    if bool(args.plan) == bool(args.default_plan):
        raise UsageError("pass exactly one of --plan or --default-plan")
    cfg = _config(args)
    data = load_dataset(args.data)
    digest = dataset_digest(args.data)
    if args.plan:
        plan = ablation.AblationPlan.load(args.plan)
    else:
        plan = ablation.build_default_plan(cfg.train.seed if args.seed is None else args.seed, digest)
    if plan.dataset is not None and plan.dataset != digest:
        raise UsageError(f"plan expects dataset {plan.dataset}, --data has {digest}")
    tc = cfg.train
    if args.epochs is not None:
        tc = dataclasses.replace(tc, epochs=args.epochs)
    rows = ablation.run_plan(plan, data, cfg.model_config(data.dim, data.taxonomy), tc, alpha=cfg.loss.alpha)
    text = ablation.results_csv(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation_results.csv").write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0 if all(r["status"] == "ok" for r in rows) else 2


def cmd_gradcheck(args) -> int:
    try:
        dims = gradcheck.parse_dims(args.dims)
        gradcheck.tiny_problem(dims, 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    loss_config = LossConfig(alpha=args.alpha)
    failed = False
    checked, seed = 0, args.seed
    while checked < args.count:
        try:
            result = gradcheck.check_gradients(seed, dims, loss_config, args.integration,
                                               args.aggregator, tolerance=args.tol, corrupt=args.corrupt)
        except gradcheck.NearKink as exc:
            log.info("seed %d skipped: %s", seed, exc)
            seed += 1
            continue
        except KeyError as exc:
            raise UsageError(str(exc)) from exc
        for name, err in result.max_rel_error.items():
            status = "PASS" if err < args.tol else "FAIL"
            print(f"seed {seed} {name:10s} max_rel_err {err:.3e} {status}")
        failed |= not result.passed
        checked += 1
        seed += 1
    print("gradcheck:", "FAIL" if failed else "PASS")
    return 2 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hiclass-mil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", help="run config JSON (default: bundled tiny fixture)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out")
    p.add_argument("--restricted", action="store_true",
                   help="decode fine classes within the predicted coarse group")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation grid")
    p.add_argument("--plan")
    p.add_argument("--default-plan", action="store_true")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1, help="number of non-degenerate seeds to check")
    p.add_argument("--dims", help="e.g. D=8,H=8,S=4,P=4,A=4,NC=2,NF=4,NP=3")
    p.add_argument("--integration", default="bidirectional",
                   choices=("none", "fine_to_coarse", "coarse_to_fine", "bidirectional"))
    p.add_argument("--aggregator", default="attention", choices=("attention", "max", "mean"))
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", metavar="BLOCK", help="perturb one gradient block (negative control)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"hiclass-mil {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"hiclass-mil {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
