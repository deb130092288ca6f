"""Outer Dyna loop: real-plant sampling, model fitting, policy optimization,
checkpointing.

A run keeps one :class:`numpy.random.Generator` for everything drawn at
the run level (environment resets, exploration noise, minibatch order).
Ensemble members own their generators.  Both are checkpointed, so a
restored run continues bit-for-bit.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import koopman, pinn
from .config import RunConfig, save_config
from .cstr import ConfigurationError, CstrEnv, EnvConfig, EpisodeLog, unscale_action
from .data import TransitionDataset
from .diffcore import Adam, CheckpointError, Params
from .diffcore.params import params_from_bytes, params_to_bytes
from .ocp import KoopmanPolicy
from .ppo import Features, MlpPolicy, PpoState, run_ppo
from .prices import PriceSeries, ingest_prices, synthetic_prices

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class VariantSpec:
    controller: str        # "koopman" | "mlp"
    ensemble: str          # "pinn" | "vanilla" | "none"
    policy_opt: bool


VARIANTS = {
    "main": VariantSpec("koopman", "pinn", True),
    "rl_bounds": VariantSpec("koopman", "vanilla", True),
    "si_koop": VariantSpec("koopman", "none", False),
    "pirl_mlp": VariantSpec("mlp", "pinn", True),
    "rl_mlp": VariantSpec("mlp", "vanilla", True),
}


def variant_spec(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigurationError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


def assign_split(episode: int, seed: int) -> str:
    """Episode 1 trains, episode 2 validates, later ones train with p = 0.75."""
    if episode == 1:
        return "train"
    if episode == 2:
        return "val"
    return "train" if np.random.default_rng([seed, episode]).random() < 0.75 else "val"


def cumulative(schedule) -> list:
    return np.cumsum(schedule).astype(int).tolist()


def load_prices(config: RunConfig) -> PriceSeries:
    if config.prices == "synthetic":
        return synthetic_prices(eval_start=config.eval_start)
    return ingest_prices(config.prices, config.eval_start)


# ---------------------------------------------------------------------- state

@dataclass
class RunState:
    config: RunConfig
    prices: PriceSeries
    rng: np.random.Generator
    policy: object
    kparams: Params | None = None
    ensemble: pinn.Ensemble | None = None
    ppo: PpoState | None = None
    dataset: TransitionDataset = field(default_factory=TransitionDataset)
    iteration: int = 0          # completed MBPO iterations
    steps: int = 0              # real-plant steps so far
    episodes: int = 0           # real-plant episodes started
    history: list = field(default_factory=list)
    last_ppo_history: list = field(default_factory=list)

    @property
    def spec(self) -> VariantSpec:
        return variant_spec(self.config.variant)

    @property
    def done(self) -> bool:
        return self.iteration >= len(self.config.schedule)

    def digests(self) -> dict:
        return {"koopman": None if self.kparams is None else self.kparams.digest(),
                "ensemble": None if self.ensemble is None else self.ensemble.digest(),
                "policy": self.policy.params.digest()}


def make_policy(spec: VariantSpec, config: RunConfig, kparams, features: Features, seed):
    if spec.controller == "koopman":
        return KoopmanPolicy(kparams, log_sigma=config.log_sigma, M=config.slack_penalty,
                             eps=config.control_reg)
    return MlpPolicy(features, seed, config.log_sigma)


def new_run(config: RunConfig) -> RunState:
    spec = variant_spec(config.variant)
    prices = load_prices(config)
    seeds = [int(s) for s in np.random.SeedSequence(config.seed).generate_state(5)]
    features = Features.from_prices(prices.partition("train"))
    kparams = koopman.init_koopman(seeds[0]) if spec.controller == "koopman" else None
    ensemble = None
    if spec.ensemble != "none":
        ensemble = pinn.make_ensemble(replace(config.ensemble, kind=spec.ensemble), seeds[1])
    policy = make_policy(spec, config, kparams, features, seeds[2])
    state = PpoState.fresh(seeds[3], features, config.ppo.lr) if spec.policy_opt else None
    return RunState(config, prices, np.random.default_rng(seeds[4]), policy,
                    kparams, ensemble, state)


# ------------------------------------------------------------------- sampling

def sample_data(run: RunState, budget: int) -> list:
    """Collect exactly ``budget`` real-plant steps; returns the episode logs.

    The first iteration acts uniformly at random.  Later iterations draw one
    exploration level per episode and sample around the current controller.
    Every call starts a fresh episode; a budget that runs out mid-episode
    keeps the partial transitions.
    """
    env = CstrEnv(run.prices.partition("train"), EnvConfig(), rng=run.rng)
    first = run.iteration == 0
    it = run.iteration + 1
    logs, taken = [], 0
    while taken < budget:
        obs = env.reset()
        run.episodes += 1
        ep = run.episodes
        is_val = assign_split(ep, run.config.seed) == "val"
        sigma = None if first else float(run.rng.uniform(0.0, run.config.sigma_max))
        if hasattr(run.policy, "_guess"):
            run.policy._guess = None
        ep_log = EpisodeLog()
        ep_log.meta = {"episode": ep, "iteration": it, "sigma": sigma,
                       "split": "val" if is_val else "train"}
        done = False
        while not done and taken < budget:
            if first:
                u = run.rng.uniform(-1.0, 1.0, 2)
            else:
                u = run.policy.act(obs.x, obs.l, obs.prices, run.rng, sigma=sigma).u
            x = obs.x
            price = obs.prices[0]
            obs, r, term, trunc = env.step(unscale_action(u))
            run.dataset.append(x, u, obs.x, ep, it, is_val)
            ep_log.record(env.state, unscale_action(u), price, r, term, trunc)
            taken += 1
            done = term or trunc
        logs.append(ep_log)
    run.steps += budget
    return logs


# ------------------------------------------------------------------ training

def _splits(ds: TransitionDataset):
    train, val = ds.train(), ds.val()
    if len(val) == 0:
        # the first iteration may not reach a validation episode yet
        val = train
    return train, val


def train_models(run: RunState) -> dict:
    """Step (2): ensemble (with random resets) and Koopman SI on all data so far."""
    train, val = _splits(run.dataset)
    out = {"resets": [], "ensemble_val_mse": None, "si_val": None, "si_epochs": 0}
    if run.ensemble is not None:
        if run.iteration > 0:
            out["resets"] = pinn.maybe_reset(run.ensemble, run.rng)
        for i, m in enumerate(run.ensemble.members):
            try:
                pinn.train_two_stage(m, train, val, run.ensemble.config)
            except pinn.TrainingDivergence as exc:
                log.warning("ensemble member %d failed (%s); re-initialized", i, exc)
                m.reinitialize()
        out["ensemble_val_mse"] = float(np.mean(
            [pinn._data_mse(m, val) for m in run.ensemble.members]))
    if run.kparams is not None:
        seed = int(run.rng.integers(2**31))
        run.kparams, hist = koopman.train_si(run.kparams, train, val, run.config.koopman, seed)
        run.policy.kparams = run.kparams
        out["si_val"] = float(hist.best_val[-1]) if hist.best_val else None
        out["si_epochs"] = hist.epochs
    return out


def optimize_policy(run: RunState) -> dict:
    """Step (3): PPO on the surrogate until the improvement rule stops it."""
    if not run.spec.policy_opt:
        return {"ppo_iterations": 0, "ppo_stopped_by_rule": False, "ppo_history": []}
    if hasattr(run.policy, "_guess"):
        run.policy._guess = None
    result = run_ppo(run.policy, run.ppo, run.ensemble, run.dataset.train_states(),
                     run.prices.partition("train"), run.config.ppo, run.rng)
    return {"ppo_iterations": result.iterations, "ppo_stopped_by_rule": bool(result.terminated_by_rule),
            "ppo_history": result.history}


class PhaseViolation(RuntimeError):
    """A parameter group changed outside the phase that owns it."""


def _check(before: dict, after: dict, frozen: tuple, phase: str):
    for k in frozen:
        if before[k] != after[k]:
            raise PhaseViolation(f"{k} parameters changed during {phase}")


def run_iteration(run: RunState) -> tuple[RunState, list]:
    """One MBPO iteration.  Returns the run and the new episode logs."""
    if run.done:
        raise ConfigurationError("schedule exhausted")
    t0 = time.perf_counter()
    budget = int(run.config.schedule[run.iteration])
    logs = sample_data(run, budget)
    t1 = time.perf_counter()
    d0 = run.digests()
    models = train_models(run)
    d1 = run.digests()
    _check(d0, d1, ("policy",), "model fitting")
    t2 = time.perf_counter()
    pol = optimize_policy(run)
    d2 = run.digests()
    _check(d1, d2, ("koopman", "ensemble"), "policy optimization")
    t3 = time.perf_counter()
    run.iteration += 1
    row = {"iteration": run.iteration, "budget": budget, "steps": run.steps,
           "episodes": run.episodes, "n_train": int((~run.dataset.is_val).sum()),
           "n_val": int(run.dataset.is_val.sum()),
           "theta_B": _theta(run).tolist(), "log_sigma": run.policy.log_sigma.tolist(),
           "resets": models["resets"], "ensemble_val_mse": models["ensemble_val_mse"],
           "si_val": models["si_val"], "si_epochs": models["si_epochs"],
           "ppo_iterations": pol["ppo_iterations"],
           "ppo_stopped_by_rule": pol["ppo_stopped_by_rule"],
           "t_sample": t1 - t0, "t_models": t2 - t1, "t_policy": t3 - t2}
    run.history.append(row)
    run.last_ppo_history = pol["ppo_history"]
    log.info("iteration %d: %d steps, %d PPO iterations", run.iteration, run.steps,
             pol["ppo_iterations"])
    return run, logs


def _theta(run: RunState) -> np.ndarray:
    if isinstance(run.policy, KoopmanPolicy):
        return run.policy.theta.copy()
    return np.zeros(6)


# ----------------------------------------------------------------- checkpoint

def _bundle(run: RunState) -> Params:
    out = Params()
    for k, v in run.policy.params.items():
        out["policy/" + k] = v
    if run.kparams is not None:
        for k, v in run.kparams.items():
            out["koopman/" + k] = v
    if run.ppo is not None:
        for k, v in run.ppo.critic.items():
            out["critic/" + k] = v
    if run.ensemble is not None:
        for i, m in enumerate(run.ensemble.members):
            for k, v in m.params.items():
                out[f"member{i}/{k}"] = v
            out[f"member{i}/.colloc"] = m.colloc
            out[f"member{i}/.init"] = m.init
    return out


def _unbundle(bundle: Params, prefix: str) -> Params:
    n = len(prefix)
    return Params({k[n:]: v for k, v in bundle.items() if k.startswith(prefix)})


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def checkpoint(run: RunState, directory) -> Path:
    """Write ``run.json``, ``params.bin`` and ``dataset.csv`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": run.config.to_dict(),
        "iteration": run.iteration, "steps": run.steps, "episodes": run.episodes,
        "schedule_done": [int(b) for b in run.config.schedule[:run.iteration]],
        "history": run.history,
        "rng": _rng_state(run.rng),
        "policy_kind": run.policy.kind,
        "features": None if run.ppo is None else vars(run.ppo.features),
        "mlp_features": vars(run.policy.features) if run.policy.kind == "mlp" else None,
        "opt_pi": None if run.ppo is None else run.ppo.opt_pi.state_dict(),
        "opt_vf": None if run.ppo is None else run.ppo.opt_vf.state_dict(),
        "members": None if run.ensemble is None else [
            {"kind": m.kind, "weights": list(m.weights), "resets": m.resets,
             "rng": _rng_state(m.rng)} for m in run.ensemble.members],
        "ensemble_config": None if run.ensemble is None else vars(run.ensemble.config),
        "digests": run.digests(),
    }
    (directory / "params.bin").write_bytes(params_to_bytes(_bundle(run)))
    run.dataset.to_csv(directory / "dataset.csv")
    (directory / "run.json").write_text(json.dumps(doc))
    return directory


def restore(directory) -> RunState:
    directory = Path(directory)
    try:
        doc = json.loads((directory / "run.json").read_text())
        bundle = params_from_bytes((directory / "params.bin").read_bytes())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {directory}: {exc}") from exc
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')} is not supported "
                              f"(expected {CHECKPOINT_VERSION})")
    config = RunConfig.from_dict(doc["config"])
    spec = variant_spec(config.variant)
    if spec.controller != doc["policy_kind"]:
        raise CheckpointError("checkpoint policy does not match its variant")
    prices = load_prices(config)
    kparams = _unbundle(bundle, "koopman/") if spec.controller == "koopman" else None
    pparams = _unbundle(bundle, "policy/")
    if spec.controller == "koopman":
        policy = make_policy(spec, config, kparams, None, None)
    else:
        policy = MlpPolicy(Features(**doc["mlp_features"]), 0, config.log_sigma)
    policy.params = pparams
    ensemble = None
    if doc["members"] is not None:
        ecfg = pinn.EnsembleConfig(**doc["ensemble_config"])
        members = []
        for i, md in enumerate(doc["members"]):
            p = _unbundle(bundle, f"member{i}/")
            colloc, init = p.pop(".colloc"), p.pop(".init")
            members.append(pinn.Member(md["kind"], p, colloc, init, _rng_from(md["rng"]),
                                       tuple(md["weights"]), md["resets"]))
        ensemble = pinn.Ensemble(members, ecfg)
    state = None
    if doc["features"] is not None:
        state = PpoState(_unbundle(bundle, "critic/"), Features(**doc["features"]),
                         Adam.from_state(doc["opt_pi"]), Adam.from_state(doc["opt_vf"]))
    run = RunState(config, prices, _rng_from(doc["rng"]), policy, kparams, ensemble, state,
                   TransitionDataset.from_csv(directory / "dataset.csv"),
                   doc["iteration"], doc["steps"], doc["episodes"], doc["history"])
    if run.digests() != doc["digests"]:
        raise CheckpointError("restored parameters do not match the stored digests")
    return run


# ---------------------------------------------------------------- run driver

ITERATION_COLUMNS = ("iteration", "budget", "steps", "episodes", "n_train", "n_val",
                     "theta_c_lb", "theta_c_ub", "theta_T_lb", "theta_T_ub", "theta_l_lb",
                     "theta_l_ub", "ensemble_val_mse", "si_val", "si_epochs", "ppo_iterations",
                     "ppo_stopped_by_rule", "t_sample", "t_models", "t_policy")
PPO_COLUMNS = ("mbpo_iteration", "iteration", "policy_loss", "value_loss", "clip_fraction",
               "approx_kl", "grad_norm", "skipped", "mean_reward", "solver_failures",
               "improvement_ratio", "validation_reward")


def _append_csv(path: Path, columns, rows):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        if new:
            w.writeheader()
        for row in rows:
            w.writerow(row)


def _iteration_row(row: dict) -> dict:
    out = dict(row)
    for name, v in zip(ITERATION_COLUMNS[6:12], row["theta_B"]):
        out[name] = v
    return out


def write_iteration(run: RunState, run_dir: Path, logs: list) -> Path:
    """Persist one finished iteration: metrics rows, episode logs, checkpoint."""
    run_dir = Path(run_dir)
    _append_csv(run_dir / "iterations.csv", ITERATION_COLUMNS, [_iteration_row(run.history[-1])])
    ppo_rows = [{"mbpo_iteration": run.iteration, **r}
                for r in run.last_ppo_history]
    if ppo_rows:
        _append_csv(run_dir / "ppo.csv", PPO_COLUMNS, ppo_rows)
    ep_dir = run_dir / "episodes"
    ep_dir.mkdir(exist_ok=True)
    for lg in logs:
        m = lg.meta
        lg.to_csv(ep_dir / f"it{m['iteration']:03d}_ep{m['episode']:04d}_{m['split']}.csv")
    return checkpoint(run, run_dir / "checkpoints" / f"iter_{run.iteration:03d}")


def run_training(config: RunConfig, run_dir=None, on_iteration=None,
                 stop_after: int | None = None, run: RunState | None = None) -> RunState:
    """Run (or resume) the full schedule, checkpointing after every iteration.

    ``on_iteration(run)`` is called after each checkpoint.  ``stop_after``
    ends the call after that many completed iterations.
    """
    run = new_run(config) if run is None else run
    run_dir = Path(run_dir if run_dir is not None else config.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(run_dir / "config.json", run.config)
    while not run.done and (stop_after is None or run.iteration < stop_after):
        run, logs = run_iteration(run)
        write_iteration(run, run_dir, logs)
        if on_iteration is not None:
            on_iteration(run)
    return run


def latest_checkpoint(run_dir) -> Path:
    cps = sorted((Path(run_dir) / "checkpoints").glob("iter_*"))
    if not cps:
        raise CheckpointError(f"no checkpoints under {run_dir}")
    return cps[-1]

