"""Command-line entry point: ``sedc <subcommand> ...``.

Configuration is merged as defaults < ``--config`` JSON file < flags.  The
environment variable ``SEDC_SEED`` overrides ``--seed``.  Outputs go under
``--out``.  Exit codes: 0 ok, 2 usage error, 1 runtime failure (a JSON error
record is printed to stderr).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import dataset as dsm
from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import GuidanceSpec
from .dynamics import SYSTEMS, make_system
from .numerics import ConfigError, make_rng
from .pipeline import ABLATION_VARIANTS, RunManifest, TrainConfig, control, gsf_round, run

# flag name -> (TrainConfig field, type, help)
TRAIN_FLAGS = {
    "variant": ("variant", str, "ablation variant"),
    "steps": ("steps", int, "initial training step budget"),
    "batch": ("batch_size", int, "training batch size"),
    "lr": ("lr", float, "Adam learning rate"),
    "k": ("K", int, "number of diffusion steps"),
    "schedule": ("schedule", str, "noise schedule kind (cosine|linear)"),
    "lambda": ("lam", float, "guidance strength"),
    "guidance-clip": ("guidance_clip", float, "per-sample guidance gradient norm cap"),
    "rounds": ("gsf_rounds", int, "number of GSF rounds"),
    "gsf-fraction": ("gsf_fraction", float, "generated trajectories per round as a fraction of the pool"),
    "val-fraction": ("val_fraction", float, "validation split fraction"),
    "eval-every": ("eval_every", int, "steps between validation evaluations"),
    "patience": ("patience", int, "early-stopping patience (evaluations)"),
    "finetune-steps": ("finetune_steps", int, "fine-tuning step cap per GSF round"),
    "finetune-lr": ("finetune_lr", float, "fine-tuning learning rate"),
    "base-width": ("base_width", int, "U-Net base channel width; unset means the state dimension, widths x{1,2,4}"),
    "invdyn-hidden": ("invdyn_hidden", int, "inverse-dynamics hidden width"),
    "seed": ("seed", int, "random seed (SEDC_SEED overrides)"),
}


def _add_train_flags(p, only=None):
    defaults = TrainConfig()
    p.add_argument("--config", type=Path, help="flat JSON file of training options")
    for flag, (fld, typ, text) in TRAIN_FLAGS.items():
        if only is not None and flag not in only:
            continue
        p.add_argument(f"--{flag}", dest=fld, type=typ, default=None,
                       help=f"{text} (default: {getattr(defaults, fld)})")


def _train_config(args) -> TrainConfig:
    cfg = {}
    if getattr(args, "config", None):
        cfg.update(json.loads(Path(args.config).read_text()))
    for _, (fld, _, _) in TRAIN_FLAGS.items():
        v = getattr(args, fld, None)
        if v is not None:
            cfg[fld] = v
    if "SEDC_SEED" in os.environ:
        cfg["seed"] = int(os.environ["SEDC_SEED"])
    return TrainConfig.from_dict(cfg)


def _floats(s: str) -> np.ndarray:
    return np.array([float(x) for x in s.split(",")])


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    kw = {}
    if args.n is not None:
        kw["N"] = args.n
    if args.gamma is not None:
        kw["gamma"] = args.gamma
    if args.order is not None:
        kw["order"] = args.order
    spec = make_system(args.system, **kw)
    seed = int(os.environ.get("SEDC_SEED", args.seed))
    full = dsm.generate(spec, args.count + args.test, seed=seed, method=args.method)
    train, test = dsm.split_test(full, args.test)
    out = Path(args.out)
    dsm.save(train, out / "train.sedc")
    dsm.save(test, out / "test.sedc")
    if args.csv:
        dsm.export_csv(train, out / "train.csv")
    print(json.dumps({"train": str(out / "train.sedc"), "test": str(out / "test.sedc"), "count": len(train)}))


def cmd_train(args):
    cfg = _train_config(args)
    data = dsm.load(args.data)
    cfg = replace(cfg, gsf_rounds=0) if args.no_gsf_rounds else cfg
    ctrl, manifest, pool = run(data, cfg)
    out = Path(args.out)
    save_checkpoint(ctrl, out, manifest.to_dict())
    _write_json(out / "run_manifest.json", manifest.to_dict())
    print(json.dumps({"checkpoint": str(out), "hash": manifest.checkpoint_hash}))


def cmd_gsf(args):
    ctrl, meta = load_checkpoint(args.ckpt)
    cfg = TrainConfig.from_dict({**meta.get("run", {}).get("config", {}), **_overrides(args)})
    pool = dsm.load(args.data)
    rng = make_rng(cfg.seed + 1000)
    manifest = RunManifest(cfg.to_dict(), pool.content_hash())
    reports = []
    for r in range(1, args.rounds + 1):
        pool, rep = gsf_round(ctrl, pool, cfg, r, rng, manifest)
        reports.append(rep)
    out = Path(args.out)
    save_checkpoint(ctrl, out, manifest.to_dict())
    dsm.save(pool, out / "pool.sedc")
    _write_json(out / "gsf_report.json", reports)
    print(json.dumps(reports[-1] if reports else {}))


def _overrides(args):
    d = {}
    for _, (fld, _, _) in TRAIN_FLAGS.items():
        v = getattr(args, fld, None)
        if v is not None:
            d[fld] = v
    return d


def cmd_control(args):
    ctrl, _ = load_checkpoint(args.ckpt)
    if args.task_file:
        task = json.loads(Path(args.task_file).read_text())
        y0, yf = np.asarray(task["y0"], float), np.asarray(task["yf"], float)
    elif args.y0 and args.yf:
        y0, yf = _floats(args.y0), _floats(args.yf)
    else:
        raise ConfigError("give --y0 and --yf, or --task-file")
    if y0.shape != (ctrl.spec.N,) or yf.shape != (ctrl.spec.N,):
        raise ConfigError(f"states must have {ctrl.spec.N} entries")
    seed = int(os.environ.get("SEDC_SEED", args.seed))
    u, pred, executed, metrics = control(ctrl, y0, yf, GuidanceSpec(args.lam), make_rng(seed))
    _write_json(Path(args.out) / "control.json",
                {"controls": u, "predicted": pred, "executed": executed, "metrics": metrics})
    print(json.dumps(metrics))


def cmd_eval(args):
    from .evaluation import CellResult, evaluate, write_results

    ctrl, meta = load_checkpoint(args.ckpt)
    tasks = dsm.load(args.tasks)
    seed = int(os.environ.get("SEDC_SEED", args.seed))
    m = evaluate(ctrl, tasks, GuidanceSpec(args.lam), seed=seed)
    variant = meta.get("run", {}).get("config", {}).get("variant", "full")
    cell = CellResult(ctrl.spec.system, variant, 1.0, 0.0, seed, m, meta)
    path = write_results(Path(args.out) / "results.csv", [cell])
    print(json.dumps({"results": str(path), "target_loss": m.target_loss, "energy": m.energy}))


def cmd_ablate(args):
    from .evaluation import run_ablation, summarize, write_results

    cfg = _train_config(args)
    train, test = dsm.load(args.data), dsm.load(args.tasks)
    seeds = [int(s) for s in args.seeds.split(",")]
    cells = run_ablation(args.variant or cfg.variant, train, test, args.fraction, seeds, cfg)
    out = Path(args.out)
    write_results(out / "results.csv", cells)
    _write_json(out / "summary.json", summarize(cells))
    print(json.dumps(summarize(cells)))


def cmd_noise_grid(args):
    from .evaluation import noise_grid, write_results

    cfg = _train_config(args)
    train, test = dsm.load(args.data), dsm.load(args.tasks)
    cells = noise_grid(train, test, [float(s) for s in args.sigmas.split(",")],
                       [int(s) for s in args.seeds.split(",")], cfg)
    write_results(Path(args.out) / "results.csv", cells)
    print(json.dumps([{"sigma": c.sigma, "seed": c.seed, "target_loss": c.metrics.target_loss} for c in cells]))


def cmd_mpc(args):
    from .evaluation import CellResult, write_results
    from .mpc import MPCConfig, mpc_baseline

    cfg = MPCConfig(horizon=args.horizon, iterations=args.iterations, candidates=args.candidates,
                    elite_fraction=args.elite_fraction, train_steps=args.train_steps,
                    energy_weight=args.energy_weight, seed=int(os.environ.get("SEDC_SEED", args.seed)))
    train, test = dsm.load(args.data), dsm.load(args.tasks)
    m = mpc_baseline(cfg, train, test)
    write_results(Path(args.out) / "results.csv", [CellResult(train.spec.system, "mpc", 1.0, 0.0, cfg.seed, m, {})])
    print(json.dumps({"target_loss": m.target_loss, "energy": m.energy, "seconds_per_task": m.seconds}))


def cmd_consistency(args):
    from .evaluation import consistency_report, write_rows

    ctrl, _ = load_checkpoint(args.ckpt)
    tasks = dsm.load(args.tasks)
    rows, per_task = consistency_report(ctrl, tasks, seed=int(os.environ.get("SEDC_SEED", args.seed)),
                                        guidance=GuidanceSpec(args.lam))
    write_rows(Path(args.out) / "consistency.csv", rows)
    print(json.dumps({"mean_abs_diff": float(np.mean([r["abs_diff"] for r in rows])),
                      "max_per_task": per_task.tolist()}))


def cmd_plot(args):
    from .plots import plot

    svg = plot(args.kind, args.input, args.out)
    print(json.dumps({"svg": str(svg)}))


# ---------------------------------------------------------------------------


GENERIC_HELP = {
    "system": "system id",
    "method": "integrator used for data generation",
    "seed": "random seed (SEDC_SEED overrides)",
    "out": "output directory; every artifact path is relative to it",
    "ckpt": "checkpoint directory",
    "data": "training dataset (.sedc)",
    "tasks": "test tasks (.sedc); only endpoints are used",
    "rounds": "number of GSF rounds",
    "seeds": "comma-separated training seeds",
    "sigmas": "comma-separated observation-noise levels",
    "horizon": "planning horizon cap (steps)",
    "iterations": "CEM refinement iterations",
    "candidates": "CEM candidates per iteration",
    "elite_fraction": "CEM elite fraction",
    "train_steps": "forward-model training steps",
    "energy_weight": "energy weight in the MPC objective",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sedc", description=__doc__.splitlines()[0])
    p.add_argument("--jobs", type=int, default=1, help="worker thread cap (default: 1)")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    g = sub.add_parser("gen-data", help="simulate a dataset", formatter_class=fmt)
    g.add_argument("--system", required=True, choices=SYSTEMS)
    g.add_argument("--n", type=int, default=None, help="state dimension (kuramoto, burgers1d)")
    g.add_argument("--gamma", type=float, default=None, help="kuramoto coupling strength")
    g.add_argument("--order", type=int, default=None, help="synthetic_poly order")
    g.add_argument("--count", type=int, default=2000, help="training trajectories")
    g.add_argument("--test", type=int, default=50, help="held-out test trajectories")
    g.add_argument("--method", default="rk4", choices=("rk4", "euler"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--csv", action="store_true", help="also export train.csv")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="initial training followed by GSF rounds", formatter_class=fmt)
    t.add_argument("--data", required=True)
    t.add_argument("--no-gsf-rounds", action="store_true", help="stop after initial training")
    t.add_argument("--out", required=True)
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("gsf", help="run GSF rounds on an existing checkpoint", formatter_class=fmt)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True, help="current training pool")
    s.add_argument("--rounds", type=int, default=1)
    s.add_argument("--out", required=True)
    _add_train_flags(s, only={"lambda", "gsf-fraction", "finetune-steps", "finetune-lr", "seed", "guidance-clip"})
    s.set_defaults(func=cmd_gsf)

    c = sub.add_parser("control", help="answer one control query", formatter_class=fmt)
    c.add_argument("--ckpt", required=True)
    c.add_argument("--y0", help="initial state, comma separated")
    c.add_argument("--yf", help="target state, comma separated")
    c.add_argument("--task-file", help='JSON file {"y0": [...], "yf": [...]}')
    c.add_argument("--lambda", dest="lam", type=float, default=0.01, help="guidance strength")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_control)

    e = sub.add_parser("eval", help="evaluate a checkpoint on test tasks", formatter_class=fmt)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--tasks", required=True)
    e.add_argument("--lambda", dest="lam", type=float, default=0.01, help="guidance strength")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate one ablation variant over seeds", formatter_class=fmt)
    a.add_argument("--data", required=True)
    a.add_argument("--tasks", required=True)
    a.add_argument("--fraction", type=float, default=1.0, help="nested data fraction")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--out", required=True)
    _add_train_flags(a)
    a.set_defaults(func=cmd_ablate)

    n = sub.add_parser("noise-grid", help="retrain on noisy data, test on clean tasks", formatter_class=fmt)
    n.add_argument("--data", required=True)
    n.add_argument("--tasks", required=True)
    n.add_argument("--sigmas", default="0,0.01,0.1")
    n.add_argument("--seeds", default="0,1,2")
    n.add_argument("--out", required=True)
    _add_train_flags(n)
    n.set_defaults(func=cmd_noise_grid)

    m = sub.add_parser("mpc", help="learned-model CEM MPC baseline", formatter_class=fmt)
    m.add_argument("--data", required=True)
    m.add_argument("--tasks", required=True)
    m.add_argument("--horizon", type=int, default=16)
    m.add_argument("--iterations", type=int, default=5)
    m.add_argument("--candidates", type=int, default=64)
    m.add_argument("--elite-fraction", type=float, default=0.1)
    m.add_argument("--train-steps", type=int, default=2000)
    m.add_argument("--energy-weight", type=float, default=1e-3)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mpc)

    k = sub.add_parser("consistency", help="sampled vs induced state report", formatter_class=fmt)
    k.add_argument("--ckpt", required=True)
    k.add_argument("--tasks", required=True)
    k.add_argument("--lambda", dest="lam", type=float, default=0.0, help="guidance strength")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_consistency)

    pl = sub.add_parser("plot", help="render an SVG figure from a results CSV", formatter_class=fmt)
    pl.add_argument("--kind", required=True, choices=("pareto", "efficiency", "gsf", "consistency"))
    pl.add_argument("--input", required=True, help="CSV produced by another subcommand")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    for parser in sub.choices.values():
        for action in parser._actions:
            if action.help is None:
                action.help = GENERIC_HELP.get(action.dest, action.dest.replace("_", " "))
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    torch.set_num_threads(max(1, args.jobs))
    try:
        args.func(args)
    except Exception as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command,
                  "trace": traceback.format_exc(limit=3)}
        print(json.dumps(record), file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
