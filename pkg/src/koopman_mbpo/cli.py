"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures print one JSON line ``{"error": ..., "type": ..., "exit": ...}``
on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, bench, koopman, mbpo
from .config import PRESETS, RunConfig, load_config, preset
from .cstr import ConfigurationError
from .data import TransitionDataset
from .diffcore import CheckpointError
from .diffcore.params import load_params, save_params
from .prices import PriceDataError

log = logging.getLogger("koopman_mbpo")


class UsageError(Exception):
    pass


def _fail(exc: BaseException, code: int) -> int:
    msg = str(exc).replace("\n", " ")
    print(json.dumps({"error": msg, "type": type(exc).__name__, "exit": code}), file=sys.stderr)
    return code


def _emit(doc) -> None:
    print(json.dumps(doc, indent=1))


# ---------------------------------------------------------------- commands

def _load_run_config(args) -> RunConfig:
    if args.config and args.preset:
        raise UsageError("give either --config or --preset, not both")
    cfg = load_config(args.config) if args.config else preset(args.preset or "desk")
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.variant is not None:
        over["variant"] = args.variant
    if args.out is not None:
        over["out_dir"] = args.out
    if args.prices is not None:
        over["prices"] = args.prices
    return RunConfig.from_dict({**cfg.to_dict(), **over}) if over else cfg


def cmd_train(args) -> int:
    try:
        cfg = _load_run_config(args)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    run_dir = Path(cfg.out_dir) / f"{cfg.variant}_seed{cfg.seed}"
    run = mbpo.restore(args.resume) if args.resume else None
    if run is not None and run.config.to_dict() != cfg.to_dict():
        raise CheckpointError("resume checkpoint was written with a different configuration")

    def after(r):
        every = r.config.eval.every
        if every and r.iteration % every == 0:
            m = bench.evaluate(r.policy, r.prices, r.config.eval.windows, r.config.eval.steps)
            row = {"iteration": r.iteration, "steps": r.steps, **m.summary()}
            with open(run_dir / "eval_history.jsonl", "a") as fh:
                fh.write(json.dumps(row) + "\n")
        print(json.dumps({"iteration": r.iteration, "steps": r.steps,
                          "theta_B": r.history[-1]["theta_B"]}), flush=True)

    run = mbpo.run_training(cfg, run_dir, after, args.iterations, run)
    out = {"run_dir": str(run_dir), "iterations": run.iteration, "steps": run.steps}
    if run.done and not args.no_eval:
        m = bench.evaluate(run.policy, run.prices, cfg.eval.windows, cfg.eval.steps)
        (run_dir / "eval.json").write_text(json.dumps(m.to_dict(), indent=1))
        m.to_csv(run_dir / "eval.csv")
        out["eval"] = m.summary()
    _emit(out)
    return 0


BASELINES = {"steady-state": lambda seed: bench.ConstantPolicy(),
             "zero-feed": lambda seed: bench.ConstantPolicy([1.0, 0.0]),
             "random": lambda seed: bench.RandomPolicy(seed)}


def cmd_evaluate(args) -> int:
    if (args.checkpoint is None) == (args.baseline is None):
        raise UsageError("give exactly one of --checkpoint or --baseline")
    if args.checkpoint is not None:
        run = bench.load_controller(args.checkpoint, args.variant)
        policy, prices, ev = run.policy, run.prices, run.config.eval
    else:
        cfg = preset("full") if args.prices is None else preset("full", prices=args.prices)
        policy, prices, ev = BASELINES[args.baseline](args.seed), mbpo.load_prices(cfg), cfg.eval
    m = bench.evaluate(policy, prices, args.windows or ev.windows, args.steps or ev.steps,
                       args.seed)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(m.to_dict(), indent=1))
        m.to_csv(out / "eval.csv")
    _emit(m.to_dict() if args.per_episode else m.summary())
    return 0


def cmd_sysid(args) -> int:
    ds = TransitionDataset.from_csv(args.data)
    train, val = ds.train(), ds.val()
    if len(val) == 0:
        val = train
    params = load_params(args.init) if args.init else koopman.init_koopman(args.seed)
    cfg = koopman.SiConfig(lr=args.lr, max_epochs=args.epochs, patience=args.patience)
    params, hist = koopman.train_si(params, train, val, cfg, seed=args.seed)
    if args.out:
        save_params(args.out, params)
    _emit({"epochs": hist.epochs, "best_epoch": hist.best_epoch,
           "initial_val": list(hist.initial_val),
           "final_val": list(koopman.si_losses(params, val.x, val.u, val.x_next)),
           "digest": params.digest()})
    return 0


def cmd_ensemble_eval(args) -> int:
    run = mbpo.restore(args.checkpoint)
    if run.ensemble is None:
        raise CheckpointError(f"variant {run.config.variant!r} has no model ensemble")
    ref = bench.reference_trajectory(args.steps, args.seed)
    mae = bench.closed_loop_mae(run.ensemble, ref)
    _emit({"steps": run.steps, "kind": run.ensemble.kind,
           "mae": [None if not np.isfinite(v) else float(v) for v in mae]})
    return 0


def cmd_export_metrics(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = bench.export_theta_b_history(args.run_dir, out / "theta_B.csv")
    runs = {}
    for d in args.run_dir:
        rows = bench.iteration_metrics(d)
        evals = Path(d) / "eval.json"
        runs[str(d)] = {"iterations": len(rows), "final": rows[-1] if rows else None,
                        "eval": json.loads(evals.read_text())["summary"] if evals.exists()
                        else None}
    (out / "metrics.json").write_text(json.dumps(runs, indent=1))
    _emit({"theta_rows": n, "runs": len(runs), "out": str(out)})
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="koopman-mbpo",
                                description="Train and evaluate Koopman MPC controllers "
                                            "with model-based policy optimization.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    t = sub.add_parser("train", help="run the MBPO loop and checkpoint every iteration")
    t.add_argument("--config", help="TOML or JSON run configuration")
    t.add_argument("--preset", choices=sorted(PRESETS),
                   help="built-in configuration when --config is absent (default: desk)")
    t.add_argument("--seed", type=int, help="run seed (overrides the config)")
    t.add_argument("--variant", choices=sorted(mbpo.VARIANTS), help="controller variant")
    t.add_argument("--out", help="output root; the run goes to OUT/<variant>_seed<seed>")
    t.add_argument("--prices", help="hourly price CSV (default: synthetic series)")
    t.add_argument("--iterations", type=int, help="stop after this many completed iterations")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--no-eval", action="store_true", help="skip the final test episodes")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="noise-free test episodes on held-out prices")
    e.add_argument("--checkpoint", help="checkpoint directory (checkpoints/iter_XXX)")
    e.add_argument("--baseline", choices=sorted(BASELINES), help="evaluate a fixed baseline")
    e.add_argument("--variant", choices=sorted(mbpo.VARIANTS),
                   help="fail unless the checkpoint holds this variant")
    e.add_argument("--windows", type=int, help="number of one-week test windows")
    e.add_argument("--steps", type=int, help="steps per test episode")
    e.add_argument("--seed", type=int, default=0, help="seed for initial storage levels")
    e.add_argument("--prices", help="hourly price CSV for baselines")
    e.add_argument("--out", help="directory for eval.json and eval.csv")
    e.add_argument("--per-episode", action="store_true", help="print per-episode metrics")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sysid", help="fit a Koopman model to a transitions CSV")
    s.add_argument("--data", required=True, help="transitions CSV (dataset.csv schema)")
    s.add_argument("--init", help="initial parameter file (.bin or .json)")
    s.add_argument("--epochs", type=int, default=5000, help="maximum epochs")
    s.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    s.add_argument("--patience", type=int, default=25, help="early-stopping patience")
    s.add_argument("--seed", type=int, default=0, help="seed for init and minibatches")
    s.add_argument("--out", help="where to write the fitted parameters")
    s.set_defaults(func=cmd_sysid)

    n = sub.add_parser("ensemble-eval", help="chained closed-loop prediction error per member")
    n.add_argument("--checkpoint", required=True, help="checkpoint directory")
    n.add_argument("--steps", type=int, default=168, help="prediction horizon")
    n.add_argument("--seed", type=int, default=0, help="seed of the reference trajectory")
    n.set_defaults(func=cmd_ensemble_eval)

    x = sub.add_parser("export-metrics", help="theta_B history CSV and metrics JSON")
    x.add_argument("--run-dir", required=True, nargs="+", help="one or more run directories")
    x.add_argument("--out", required=True, help="output directory")
    x.set_defaults(func=cmd_export_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(exc, 2)
    except (ConfigurationError, CheckpointError, PriceDataError, OSError, ValueError,
            FloatingPointError, RuntimeError) as exc:
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
