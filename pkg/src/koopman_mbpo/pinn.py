"""Physics-informed ensemble of one-hour flow-map networks.

A PINN member maps (tau, c0, T0, rho, F) to (c(tau), T(tau), r(tau)) where
states and controls are scaled, tau is in hours and the reaction rate is
``R = r / V`` in physical units.  The rate has no measurements; it only
enters the residual of the mass and energy balances with the reaction term
replaced by R.  A vanilla member drops tau and R and maps (x_t, u_t) to
x_{t+1} directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .cstr import ACTION_LB, ACTION_UB, STATE_LB, STATE_UB, CstrParams, ConfigurationError
from .data import Split
from .diffcore import (LBFGS, Adam, EarlyStopping, Params, Tape, ad, backward,
                       input_derivative, layer_nodes, layer_shapes, xavier_normal)

PINN_SIZES = (5, 32, 32, 3)
VANILLA_SIZES = (4, 32, 32, 2)
N_LAYERS = 3
STATE_HALF = 0.5 * (STATE_UB - STATE_LB)
ACTION_HALF = 0.5 * (ACTION_UB - ACTION_LB)


class TrainingDivergence(FloatingPointError):
    pass


# ------------------------------------------------------------------ sampling

def lhs_sample(count: int, lb, ub, seed) -> np.ndarray:
    """Latin-hypercube sample of ``count`` points in the box [lb, ub].

    Dimensions with lb == ub are held constant.
    """
    lb = np.asarray(lb, dtype=np.float64)
    ub = np.asarray(ub, dtype=np.float64)
    if count < 1 or lb.shape != ub.shape or np.any(ub < lb):
        raise ConfigurationError("invalid LHS request")
    unit = qmc.LatinHypercube(d=len(lb), seed=np.random.default_rng(seed)).random(count)
    return lb + unit * (ub - lb)


def collocation_set(count: int, seed) -> np.ndarray:
    """Rows (tau, c0, T0, rho, F): tau in [0, 1] h, the rest scaled in [-1, 1]."""
    return lhs_sample(count, [0, -1, -1, -1, -1], [1, 1, 1, 1, 1], seed)


def init_set(count: int, seed) -> np.ndarray:
    """Rows (c0, T0, rho, F) scaled; the targets are (c0, T0)."""
    return lhs_sample(count, [-1] * 4, [1] * 4, seed)


# ----------------------------------------------------------------- networks

def _mlp_np(params, X):
    h = X
    for i in range(N_LAYERS):
        h = h @ params[f"W{i}"] + params[f"b{i}"]
        if i < N_LAYERS - 1:
            h = np.tanh(h)
    return h


def pinn_forward(params, tau, x, u) -> np.ndarray:
    """Network outputs for broadcastable tau (hours), scaled x and u."""
    x = np.atleast_2d(x)
    u = np.atleast_2d(u)
    n = max(len(x), len(u))
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64).reshape(-1, 1), (n, 1))
    X = np.hstack([tau, np.broadcast_to(x, (n, 2)), np.broadcast_to(u, (n, 2))])
    return _mlp_np(params, X)


def _net(n: dict, tau_node, rest):
    return ad.mlp(ad.concat([tau_node, rest], axis=-1), layer_nodes(n, "", N_LAYERS))


def physics_residual(out, d_out, inputs, plant: CstrParams = CstrParams()):
    """Residuals of both balances in physical units.

    ``out``/``d_out`` are network outputs and their tau-derivatives (nodes or
    arrays); ``inputs`` is the (N, 5) input array.
    """
    c = STATE_LB[0] + (out[:, 0:1] + 1.0) * STATE_HALF[0]
    T = STATE_LB[1] + (out[:, 1:2] + 1.0) * STATE_HALF[1]
    dc = d_out[:, 0:1] * STATE_HALF[0]
    dT = d_out[:, 1:2] * STATE_HALF[1]
    R = out[:, 2:3] * (1.0 / plant.V)
    rho = (ACTION_LB[0] + (inputs[:, 3:4] + 1.0) * ACTION_HALF[0]) / plant.V
    F = ACTION_LB[1] + (inputs[:, 4:5] + 1.0) * ACTION_HALF[1]
    res_c = dc - ((1.0 - c) * rho - R)
    res_T = dT - ((plant.T_f - T) * rho + R - (F * plant.alpha_c) * (T - plant.T_c))
    return res_c, res_T


def _pinn_terms(n: dict, tape: Tape, data: Split, colloc, init, plant):
    """(MSE_physics, MSE_data, MSE_init) as tape nodes."""
    terms = []
    tau = tape.var(colloc[:, :1])
    out = _net(n, tau, tape.const(colloc[:, 1:]))
    (d_out,) = input_derivative([out], tau)
    res_c, res_T = physics_residual(out, d_out, colloc, plant)
    terms.append(0.5 * (ad.mean(ad.square(res_c)) + ad.mean(ad.square(res_T))))
    if len(data):
        out_d = _net(n, tape.const(np.ones((len(data), 1))), tape.const(np.hstack([data.x, data.u])))
        terms.append(ad.mean(ad.square(out_d[:, 0:2] - data.x_next)))
    else:
        terms.append(tape.const(0.0))
    out_i = _net(n, tape.const(np.zeros((len(init), 1))), tape.const(init))
    terms.append(ad.mean(ad.square(out_i[:, 0:2] - init[:, 0:2])))
    return terms


def pinn_losses(params, data: Split, colloc, init, weights=(1.0, 1.0),
                plant: CstrParams = CstrParams()) -> tuple:
    """(MSE_total, MSE_data, MSE_physics, MSE_init)."""
    tape = Tape()
    n = {k: tape.const(v) for k, v in params.items()}
    phys, dat, ini = (float(t.value) for t in _pinn_terms(n, tape, data, colloc, init, plant))
    return phys + weights[0] * dat + weights[1] * ini, dat, phys, ini


def _vanilla_term(n: dict, tape: Tape, data: Split):
    out = ad.mlp(tape.const(np.hstack([data.x, data.u])), layer_nodes(n, "", N_LAYERS))
    return ad.mean(ad.square(out - data.x_next))


def vanilla_loss(params, data: Split) -> float:
    tape = Tape()
    n = {k: tape.const(v) for k, v in params.items()}
    return float(_vanilla_term(n, tape, data).value)


# ------------------------------------------------------------------ weights

def inverse_dirichlet_update(weights, grad_stds, ema: float = 0.9) -> tuple:
    """New (lambda_data, lambda_init) from gradient standard deviations.

    ``grad_stds`` is (physics, data, init).  Each candidate is the largest
    std over all terms divided by that term's std; the physics weight stays 1.
    A zero std leaves its weight unchanged.
    """
    stds = np.asarray(grad_stds, dtype=np.float64)
    top = np.max(stds)
    out = []
    for w, s in zip(weights, stds[1:]):
        if s > 0 and np.isfinite(s) and np.isfinite(top):
            out.append(ema * w + (1.0 - ema) * top / s)
        else:
            out.append(w)
    return tuple(float(v) for v in out)


# ------------------------------------------------------------------- members

@dataclass(frozen=True)
class EnsembleConfig:
    n_members: int = 10
    kind: str = "pinn"
    adam_epochs: int = 1000
    lr: float = 1e-3
    batch_size: int = 64
    lbfgs_epochs: int = 300
    patience: int = 25
    ema: float = 0.9
    n_colloc: int = 2000
    n_init: int = 100
    reset_prob: float = 1.0 / 3.0

    def __post_init__(self):
        if self.kind not in ("pinn", "vanilla"):
            raise ConfigurationError(f"unknown ensemble kind {self.kind!r}")
        if self.n_members < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("ensemble sizes and learning rate must be positive")
        if not 0.0 <= self.reset_prob <= 1.0 or not 0.0 <= self.ema <= 1.0:
            raise ConfigurationError("reset probability and EMA factor must lie in [0, 1]")


@dataclass
class Member:
    kind: str
    params: Params
    colloc: np.ndarray
    init: np.ndarray
    rng: np.random.Generator
    weights: tuple = (1.0, 1.0)
    resets: int = 0

    def reinitialize(self):
        sizes = PINN_SIZES if self.kind == "pinn" else VANILLA_SIZES
        self.params = xavier_normal(layer_shapes("", sizes), self.rng)
        self.weights = (1.0, 1.0)
        self.resets += 1


def make_member(kind: str, seed, config: EnsembleConfig = EnsembleConfig()) -> Member:
    rng = np.random.default_rng(seed)
    sizes = PINN_SIZES if kind == "pinn" else VANILLA_SIZES
    params = xavier_normal(layer_shapes("", sizes), rng)
    if kind == "pinn":
        colloc = collocation_set(config.n_colloc, rng)
        init = init_set(config.n_init, rng)
    else:
        colloc, init = np.zeros((0, 5)), np.zeros((0, 4))
    return Member(kind, params, colloc, init, rng)


def predict_step(member: Member, x, u) -> np.ndarray:
    """Scaled state one hour ahead; accepts single rows or batches."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if member.kind == "pinn":
        out = pinn_forward(member.params, 1.0, x, u)[:, :2]
    else:
        out = _mlp_np(member.params, np.hstack([np.atleast_2d(x), np.atleast_2d(u)]))
    return out[0] if x.ndim == 1 else out


# ------------------------------------------------------------------ training

@dataclass
class TrainHistory:
    adam_loss: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    lbfgs_train: list = field(default_factory=list)
    lbfgs_val: list = field(default_factory=list)
    initial_val_data: float = float("nan")
    best_val: float = float("nan")
    diverged: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("adam_loss", "weights", "lbfgs_train", "lbfgs_val",
                                              "initial_val_data", "best_val", "diverged")}


def _grads_pinn(member: Member, data: Split, colloc, init, plant):
    tape = Tape()
    n = tape.vars(member.params)
    leaves = list(n.values())
    terms = _pinn_terms(n, tape, data, colloc, init, plant)
    return [float(t.value) for t in terms], [backward(t, leaves) for t in terms]


def _total_and_grad(member: Member, data: Split, colloc, init, weights, plant):
    tape = Tape()
    n = tape.vars(member.params)
    if member.kind == "pinn":
        phys, dat, ini = _pinn_terms(n, tape, data, colloc, init, plant)
        total = phys + weights[0] * dat + weights[1] * ini
    else:
        total = _vanilla_term(n, tape, data)
    return float(total.value), backward(total, list(n.values()))


def _flat(grads) -> np.ndarray:
    return np.concatenate([np.ravel(g) for g in grads])


def _val_loss(member: Member, val: Split, plant) -> float:
    if member.kind == "pinn":
        return pinn_losses(member.params, val, member.colloc, member.init, member.weights, plant)[0]
    return vanilla_loss(member.params, val)


def _stage_one(member: Member, train: Split, config: EnsembleConfig, plant, history):
    opt = Adam(lr=config.lr)
    n_batches = int(np.ceil(len(train) / config.batch_size))
    for _ in range(config.adam_epochs):
        perm = member.rng.permutation(len(train))
        batches = np.array_split(perm, n_batches)
        c_parts = np.array_split(member.rng.permutation(len(member.colloc)), n_batches)
        i_parts = np.array_split(member.rng.permutation(len(member.init)), n_batches)
        total = 0.0
        for b, (idx, ci, ii) in enumerate(zip(batches, c_parts, i_parts)):
            batch = Split(train.x[idx], train.u[idx], train.x_next[idx])
            if member.kind == "pinn" and b == 0:
                vals, per_term = _grads_pinn(member, batch, member.colloc[ci], member.init[ii], plant)
                stds = [float(np.std(_flat(g))) for g in per_term]
                member.weights = inverse_dirichlet_update(member.weights, stds, config.ema)
                lam = (1.0,) + member.weights
                loss = sum(l * v for l, v in zip(lam, vals))
                grads = [sum(l * g[j] for l, g in zip(lam, per_term)) for j in range(len(per_term[0]))]
            else:
                loss, grads = _total_and_grad(member, batch, member.colloc[ci], member.init[ii],
                                              member.weights, plant)
            if not np.isfinite(loss):
                raise TrainingDivergence("non-finite loss in Adam stage")
            opt.step(member.params, grads)
            total += loss
        history.adam_loss.append(total / n_batches)
        history.weights.append(member.weights)


def _stage_two(member: Member, train: Split, val: Split, config: EnsembleConfig, plant, history):
    weights = member.weights
    template = member.params

    def fun(vec):
        member.params = template.with_flat(vec)
        loss, grads = _total_and_grad(member, train, member.colloc, member.init, weights, plant)
        return loss, _flat(grads)

    opt = LBFGS()
    stop = EarlyStopping(config.patience)
    x = template.flat()
    best_vec, best = x.copy(), _val_loss(member, val, plant)
    stop.update(best)
    for _ in range(config.lbfgs_epochs):
        res = opt.step(x, fun)
        if not np.isfinite(res.loss):
            raise TrainingDivergence("non-finite loss in L-BFGS stage")
        x = res.x
        member.params = template.with_flat(x)
        v = _val_loss(member, val, plant)
        history.lbfgs_train.append(res.loss)
        history.lbfgs_val.append(v)
        if stop.update(v):
            best_vec, best = x.copy(), v
        if res.stalled or stop.should_stop:
            break
    member.params = template.with_flat(best_vec)
    member.weights = weights
    history.best_val = best


def train_two_stage(member: Member, train: Split, val: Split,
                    config: EnsembleConfig = EnsembleConfig(),
                    plant: CstrParams = CstrParams()) -> TrainHistory:
    """Adam with dynamic loss weights, then full-batch L-BFGS with the weights frozen.

    The member is updated in place.  A non-finite loss re-initializes the
    member once; a second divergence raises :class:`TrainingDivergence`.
    """
    train.require("training")
    val.require("validation")
    history = TrainHistory()
    for attempt in range(2):
        start = member.params.copy()
        history.initial_val_data = _data_mse(member, val)
        try:
            _stage_one(member, train, config, plant, history)
            _stage_two(member, train, val, config, plant, history)
            if not member.params.all_finite():
                raise TrainingDivergence("non-finite parameters after training")
            return history
        except (TrainingDivergence, FloatingPointError):
            history.diverged += 1
            member.params = start
            if attempt == 1:
                raise TrainingDivergence("member diverged twice") from None
            member.reinitialize()
    return history


def _data_mse(member: Member, data: Split) -> float:
    pred = predict_step(member, data.x, data.u)
    return float(np.mean((pred - data.x_next) ** 2))


# ------------------------------------------------------------------ ensemble

@dataclass
class Ensemble:
    members: list
    config: EnsembleConfig

    @property
    def kind(self) -> str:
        return self.config.kind

    def __len__(self):
        return len(self.members)

    def digest(self) -> str:
        return ":".join(m.params.digest()[:16] for m in self.members)


def make_ensemble(config: EnsembleConfig = EnsembleConfig(), seed=0) -> Ensemble:
    seeds = np.random.SeedSequence(seed).spawn(config.n_members)
    return Ensemble([make_member(config.kind, s, config) for s in seeds], config)


def maybe_reset(ensemble: Ensemble, rng, prob: float | None = None) -> list:
    """Re-initialize each member independently with probability ``prob``.

    Collocation and initial-state sets are kept.  Returns reset indices.
    """
    prob = ensemble.config.reset_prob if prob is None else prob
    hits = []
    for i, m in enumerate(ensemble.members):
        if rng.random() < prob:
            m.reinitialize()
            hits.append(i)
    return hits


def train_ensemble(ensemble: Ensemble, train: Split, val: Split,
                   plant: CstrParams = CstrParams()) -> list:
    return [train_two_stage(m, train, val, ensemble.config, plant) for m in ensemble.members]


def closed_loop_predictions(ensemble: Ensemble, x0, controls) -> np.ndarray:
    """Chain one-step predictions per member: shape (members, steps, 2)."""
    controls = np.asarray(controls, dtype=np.float64)
    out = np.zeros((len(ensemble), len(controls), 2))
    for i, m in enumerate(ensemble.members):
        x = np.asarray(x0, dtype=np.float64)
        for k, u in enumerate(controls):
            with np.errstate(over="ignore", invalid="ignore"):
                x = predict_step(m, x, u)
            out[i, k] = x
    return out
