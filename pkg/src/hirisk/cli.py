"""Command line entry points.

Subcommands cover the whole workflow: generate the benchmark, train a
model, evaluate a checkpoint, run the ablation grid, profile the analytic
cost model, and spot-check gradients. Every training-adjacent command takes
an optional JSON config plus repeatable dotted overrides, e.g.

    hirisk train --set train.steps=500 --set model.ablation.no_em=true
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import costmodel, ops
from .autograd import Tensor
from .config import RunConfig, apply_override, load_config
from .gradcheck import finite_difference_check
from .metrics import export_csv, save_report
from .rng import named_rng
from .scenes import load_dataset
from .train import (
    GateError,
    Logger,
    TrainAbort,
    evaluate_model,
    format_grid,
    load_checkpoint,
    load_or_generate,
    run_ablation_grid,
    train_model,
)


def build_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"override '{item}' is not of the form key=value")
        key, value = item.split("=", 1)
        apply_override(cfg, key, value)
    return cfg


def add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; defaults apply when omitted")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted config override, repeatable")


# -- subcommands ---------------------------------------------------------------


def cmd_generate_data(args) -> int:
    cfg = build_cfg(args)
    log = Logger(echo=True)
    load_or_generate(cfg, data_dir=args.out, log=log)
    print(f"dataset ready at {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = build_cfg(args)
    run_dir = args.run_dir
    os.makedirs(run_dir, exist_ok=True)
    log = Logger(run_dir)
    try:
        train_ds, test_ds = load_or_generate(cfg, data_dir=args.data, log=log)
        result = train_model(cfg, train_ds, run_dir=run_dir, log=log)
        report = evaluate_model(result["model"], result["vocab"], test_ds,
                                batch_size=cfg.train.eval_batch)
    except GateError as err:
        log(f"gate failure: {err}")
        return 2
    except TrainAbort as err:
        log(f"aborted: {err.diagnostics}")
        return 3
    finally:
        log.close()
    save_report(report, os.path.join(run_dir, "metrics.json"))
    export_csv(report, os.path.join(run_dir, "metrics.csv"))
    with open(os.path.join(run_dir, "history.json"), "w", encoding="utf-8") as fh:
        json.dump(result["history"], fh)
    print(f"miou {report['miou']:.4f}  bleu4 {report['bleu4']:.4f}  "
          f"avg {report['avg']:.4f}  class acc {report['risk_class_acc']:.4f}")
    print(f"artifacts in {run_dir}")
    return 0


def cmd_evaluate(args) -> int:
    model, vocab, cfg, _ = load_checkpoint(args.checkpoint)
    test_ds = load_dataset(args.data, args.split)
    report = evaluate_model(model, vocab, test_ds, batch_size=cfg.train.eval_batch)
    if args.out:
        save_report(report, args.out)
        print(f"report written to {args.out}")
    print(f"miou {report['miou']:.4f}  bleu4 {report['bleu4']:.4f}  "
          f"avg {report['avg']:.4f}  class acc {report['risk_class_acc']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = build_cfg(args)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    rows = None
    if args.rows:
        from .train import GRID_ROWS

        wanted = args.rows.split(",")
        by_name = dict(GRID_ROWS)
        missing = [w for w in wanted if w not in by_name]
        if missing:
            raise SystemExit(f"unknown grid rows: {missing}; have {list(by_name)}")
        rows = [(w, by_name[w]) for w in wanted]
    log = Logger(args.run_dir)
    try:
        train_ds, test_ds = load_or_generate(cfg, data_dir=args.data, log=log)
        table = run_ablation_grid(cfg, seeds, train_ds, test_ds, rows=rows,
                                  run_dir=args.run_dir, log=log)
    except (GateError, TrainAbort) as err:
        log(f"ablation failed: {err}")
        return 3
    finally:
        log.close()
    print(format_grid(table))
    return 0


def cmd_profile_flops(args) -> int:
    grid = None
    if args.resolutions:
        grid = [int(r) for r in args.resolutions.split(",")]
    rows = costmodel.profile(grid)
    summary = costmodel.scaling_summary(rows)
    if args.out:
        costmodel.write_csv(rows, args.out)
        print(f"profile written to {args.out}")
    hdr = f"{'res':>5} {'baseline GF':>14} {'hilmd GF':>12} {'baseline GB':>13} {'hilmd GB':>10}"
    print(hdr)
    for r in rows:
        flag = "  OOM" if r["oom_flag"] else ""
        print(f"{r['resolution']:>5} {r['baseline_flops'] / 1e9:>14.1f} "
              f"{r['hilmd_flops'] / 1e9:>12.1f} {r['baseline_mem'] / 1e9:>13.2f} "
              f"{r['hilmd_mem'] / 1e9:>10.2f}{flag}")
    print(f"baseline flops ratio {summary['baseline_flops_ratio']:.1f}x, "
          f"dual-branch {summary['hilmd_flops_ratio']:.2f}x; "
          f"baseline first OOM at {summary['baseline_first_oom']}")
    return 0


def _gradcheck_cases(rng):
    def r(*shape):
        return Tensor(rng.normal(0.0, 1.0, size=shape), requires_grad=True)

    return [
        ("matmul", lambda a, b: (a @ b).sum(), [r(3, 4), r(4, 2)]),
        ("softmax", lambda a: (ops.softmax_rows(a) * ops.softmax_rows(a)).sum(), [r(3, 5)]),
        ("layernorm", lambda a, g, b: ops.layer_norm(a, g, b).sum(), [r(4, 6), r(6), r(6)]),
        ("gelu", lambda a: ops.gelu(a).sum(), [r(3, 4)]),
        ("conv2d", lambda x, k: ops.conv2d(x, k, padding=1).sum(), [r(1, 6, 6, 2), r(3, 3, 2, 3)]),
        ("cross_entropy", lambda a: ops.cross_entropy_logits(a, np.array([1, 3])), [r(2, 5)]),
        ("l1", lambda a: ops.l1_loss(a, np.zeros((2, 4))), [r(2, 4)]),
    ]


def cmd_gradcheck(args) -> int:
    rng = named_rng(args.seed, "cli/gradcheck")
    worst_all = 0.0
    for name, fn, inputs in _gradcheck_cases(rng):
        worst = finite_difference_check(fn, inputs, rel_tol=args.tol)
        worst_all = max(worst_all, worst)
        print(f"{name:<16} worst rel err {worst:.3e}")
    print(f"all kernels within {args.tol:g} (worst {worst_all:.3e})")
    return 0


# -- wiring --------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hirisk",
                                 description="dual-branch risk captioning and localization")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render and cache the benchmark")
    add_config_args(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("train", help="train a model and evaluate it")
    add_config_args(p)
    p.add_argument("--data", help="cached dataset directory (generated when missing)")
    p.add_argument("--run-dir", required=True, help="artifact directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the module ablation grid")
    add_config_args(p)
    p.add_argument("--data", help="cached dataset directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--rows", help="comma-separated subset of grid rows")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("profile-flops", help="analytic compute and memory profile")
    p.add_argument("--resolutions", help="comma-separated resolutions")
    p.add_argument("--out", help="write CSV here")
    p.set_defaults(fn=cmd_profile_flops)

    p = sub.add_parser("gradcheck", help="finite-difference spot check of the kernels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
