"""Controller variants, noise-free test episodes and exported metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import pinn
from .config import RunConfig
from .cstr import (ACTION_LB, ACTION_SS, ACTION_UB, F_SS, STATE_SS, ConfigurationError, CstrEnv,
                   EnvConfig, integrate_step, outsized_violation, scale_action, scale_state,
                   unscale_action)
from .diffcore import CheckpointError, Params
from .mbpo import RunState, new_run, restore, variant_spec
from .ocp import PolicyOutput
from .prices import PriceSeries

THETA_COLUMNS = ("theta_c_lb", "theta_c_ub", "theta_T_lb", "theta_T_ub", "theta_l_lb",
                 "theta_l_ub")


# ---------------------------------------------------------------- baselines

class ConstantPolicy:
    """Applies one fixed physical action; the steady-state default is the
    nominal-cost reference."""

    kind = "constant"

    def __init__(self, action=ACTION_SS):
        self.u = scale_action(np.asarray(action, dtype=np.float64))
        self.params = Params()

    def act(self, x, l, prices, rng=None, sigma=None, with_jacobian=False) -> PolicyOutput:
        return PolicyOutput(self.u, self.u, self.u, np.zeros(2), np.zeros(2))


class RandomPolicy:
    """Uniform over the scaled action box, the first-iteration sampler."""

    kind = "random"

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)
        self.params = Params()

    def act(self, x, l, prices, rng=None, sigma=None, with_jacobian=False) -> PolicyOutput:
        u = self.rng.uniform(-1.0, 1.0, 2)
        return PolicyOutput(u, u, u, np.zeros(2), np.zeros(2))


# --------------------------------------------------------------- evaluation

@dataclass
class EvalMetrics:
    reward: np.ndarray           # per-episode total reward
    violations: np.ndarray       # steps with any bound violated
    cost: np.ndarray             # sum of F * p over the episode
    nominal_cost: np.ndarray     # same prices at F_ss
    steps: np.ndarray
    terminated: np.ndarray       # runaway rule fired at some step

    @property
    def relative_cost(self) -> np.ndarray:
        return self.cost / self.nominal_cost

    def summary(self) -> dict:
        out = {}
        for name in ("reward", "violations", "relative_cost"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            out[name + "_mean"] = float(v.mean())
            out[name + "_std"] = float(v.std())
        out["episodes"] = len(self.reward)
        out["terminated"] = int(np.sum(self.terminated))
        return out

    def to_dict(self) -> dict:
        return {"episodes": {k: np.asarray(getattr(self, k)).tolist()
                             for k in ("reward", "violations", "cost", "nominal_cost", "steps",
                                       "terminated")}
                | {"relative_cost": self.relative_cost.tolist()},
                "summary": self.summary()}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "reward", "violations", "cost", "nominal_cost",
                        "relative_cost", "steps", "terminated"])
            for i in range(len(self.reward)):
                w.writerow([i, repr(float(self.reward[i])), int(self.violations[i]),
                            repr(float(self.cost[i])), repr(float(self.nominal_cost[i])),
                            repr(float(self.relative_cost[i])), int(self.steps[i]),
                            int(self.terminated[i])])


def eval_windows(prices: PriceSeries, n: int = 10, steps: int = 168, horizon: int = 10) -> list:
    """Start indices of the first ``n`` non-overlapping windows of the eval partition."""
    length = steps + horizon
    avail = len(prices.partition("eval")) // length
    if avail < n:
        raise ConfigurationError(f"eval partition holds {avail} test windows, {n} requested")
    return [i * length for i in range(n)]


def evaluate(policy, prices: PriceSeries, n_windows: int = 10, steps: int = 168,
             seed: int = 0) -> EvalMetrics:
    """Run ``policy`` without exploration noise on the fixed test windows.

    The initial storage level of window ``i`` is drawn from
    ``default_rng([seed, i])``, so every controller sees the same episodes.
    Episodes always run the full week; ``terminated`` records whether the
    training-time runaway rule would have ended them.
    """
    cfg = EnvConfig(max_steps=steps, outsized_limit=np.inf)
    series = prices.partition("eval")
    starts = eval_windows(prices, n_windows, steps, cfg.horizon)
    n = len(starts)
    rew, viol, cost, nom = np.zeros(n), np.zeros(n, dtype=int), np.zeros(n), np.zeros(n)
    done_steps, term = np.zeros(n, dtype=int), np.zeros(n, dtype=bool)
    for i, start in enumerate(starts):
        if hasattr(policy, "_guess"):
            policy._guess = None
        env = CstrEnv(series, cfg)
        storage = float(np.random.default_rng([seed, i]).uniform(*cfg.storage_init))
        obs = env.reset(start=start, storage=storage)
        for t in range(steps):
            u = policy.act(obs.x, obs.l, obs.prices, sigma=0.0).u
            action = np.clip(unscale_action(u), ACTION_LB, ACTION_UB)
            price = obs.prices[0]
            obs, r, _, _ = env.step(action)
            rew[i] += r.total
            viol[i] += r.r_con_bool > 0
            cost[i] += price * action[1]
            nom[i] += price * F_SS
            done_steps[i] = t + 1
            term[i] |= outsized_violation(obs.x)
    return EvalMetrics(rew, viol, cost, nom, done_steps, term)


def nominal_costs(prices: PriceSeries, n_windows: int = 10, steps: int = 168) -> np.ndarray:
    """Steady-state production cost per test window, straight from the price series."""
    series = prices.partition("eval")
    return np.array([F_SS * series[s:s + steps].sum()
                     for s in eval_windows(prices, n_windows, steps)])


# ----------------------------------------------------------------- variants

def make_variant(name: str, config: RunConfig | None = None) -> RunState:
    """Fresh run state wired for one of the five controller variants."""
    variant_spec(name)
    config = RunConfig() if config is None else config
    return new_run(replace(config, variant=name))


def load_controller(checkpoint, variant: str | None = None):
    """Restore a checkpoint; ``variant`` guards against evaluating the wrong run."""
    run = restore(checkpoint)
    if variant is not None and run.config.variant != variant:
        raise CheckpointError(f"checkpoint holds variant {run.config.variant!r}, "
                              f"not {variant!r}")
    return run


def evaluate_checkpoint(checkpoint, n_windows=None, steps=None, seed=0, variant=None):
    run = load_controller(checkpoint, variant)
    ev = run.config.eval
    return evaluate(run.policy, run.prices, n_windows or ev.windows, steps or ev.steps, seed)


# --------------------------------------------------------- theta_B history

def theta_b_history(run_dir) -> list:
    """Rows (seed, iteration, steps, six offsets), starting from the zero
    initialisation at iteration 0."""
    run_dir = Path(run_dir)
    cfg = json.loads((run_dir / "config.json").read_text())
    rows = [{"seed": cfg["seed"], "variant": cfg["variant"], "iteration": 0, "steps": 0,
             **{c: 0.0 for c in THETA_COLUMNS}}]
    path = run_dir / "iterations.csv"
    if path.exists():
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append({"seed": cfg["seed"], "variant": cfg["variant"],
                             "iteration": int(r["iteration"]), "steps": int(r["steps"]),
                             **{c: float(r[c]) for c in THETA_COLUMNS}})
    return rows


def export_theta_b_history(run_dirs, out_path) -> int:
    """Write the bound-offset trajectories of one or more runs; returns the row count."""
    if isinstance(run_dirs, (str, Path)):
        run_dirs = [run_dirs]
    rows = [r for d in run_dirs for r in theta_b_history(d)]
    with open(out_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("seed", "variant", "iteration", "steps", *THETA_COLUMNS))
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return len(rows)


def iteration_metrics(run_dir) -> list:
    with open(Path(run_dir) / "iterations.csv", newline="") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------- ensemble prediction

def reference_trajectory(steps: int = 168, seed: int = 0, hold: int = 4):
    """Plant trajectory from steady state under piecewise-constant random
    actions.  Returns (x0, controls, states), all scaled."""
    rng = np.random.default_rng(seed)
    levels = rng.uniform(-0.6, 0.6, size=(-(-steps // hold), 2))
    controls = np.repeat(levels, hold, axis=0)[:steps]
    x = STATE_SS.copy()
    states = np.zeros((steps, 2))
    for k, u in enumerate(controls):
        x = integrate_step(x, unscale_action(u))
        states[k] = scale_state(x)
    return scale_state(STATE_SS), controls, states


def closed_loop_mae(ensemble: pinn.Ensemble, reference) -> np.ndarray:
    """Mean absolute error of chained predictions per member; inf if a member blows up."""
    x0, controls, states = reference
    pred = pinn.closed_loop_predictions(ensemble, x0, controls)
    with np.errstate(invalid="ignore", over="ignore"):
        err = np.abs(pred - states).mean(axis=(1, 2))
    return np.where(np.isfinite(err), err, np.inf)

