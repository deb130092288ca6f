"""Mechanistic CSTR demand-response environment.

States are the dimensionless concentration ``c`` and temperature ``T``; the
controls are the production rate ``rho`` [1/h] and coolant flow ``F`` [1/h].
A product storage ``l`` (hours of nominal production, box [0, 6]) decouples
production from a constant demand.  Learned models and controllers work in
scaled units where each variable's lower/upper bound maps to -1/+1; the
storage level is never scaled.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np


class DomainError(ValueError):
    pass


class IntegrationError(FloatingPointError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class CstrParams:
    V: float = 20.0
    k: float = 300.0
    N: float = 5.0
    T_f: float = 0.3947
    alpha_c: float = 1.95e-4
    T_c: float = 0.3816

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"CSTR parameter {f.name} must be positive")


STATE_LB = np.array([0.1231, 0.6])
STATE_UB = np.array([0.1504, 0.8])
STATE_SS = np.array([0.1367, 0.7293])
ACTION_LB = np.array([0.8, 0.0])
ACTION_UB = np.array([1.2, 700.0])
ACTION_SS = np.array([1.0, 390.0])
RHO_SS = 1.0
F_SS = 390.0
STORAGE_MIN = 0.0
STORAGE_MAX = 6.0
DT = 1.0


def scale(v, lb, ub):
    return 2.0 * (np.asarray(v, dtype=np.float64) - lb) / (ub - lb) - 1.0


def unscale(s, lb, ub):
    return lb + (np.asarray(s, dtype=np.float64) + 1.0) * 0.5 * (ub - lb)


def scale_state(x):
    return scale(x, STATE_LB, STATE_UB)


def unscale_state(s):
    return unscale(s, STATE_LB, STATE_UB)


def scale_action(u):
    return scale(u, ACTION_LB, ACTION_UB)


def unscale_action(s):
    return unscale(s, ACTION_LB, ACTION_UB)


def derivatives(state, action, params: CstrParams = CstrParams()):
    """Right-hand side (dc/dt, dT/dt) in physical units; broadcasts over rows."""
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    c, T = state[..., 0], state[..., 1]
    rho, F = action[..., 0], action[..., 1]
    if np.any(T <= 0):
        raise DomainError("temperature must be positive")
    rate = c * params.k * np.exp(-params.N / T)
    dc = (1.0 - c) * rho / params.V - rate
    dT = (params.T_f - T) * rho / params.V + rate - F * params.alpha_c * (T - params.T_c)
    return np.stack([dc, dT], axis=-1)


def _rk4_scalar(c, T, rho, F, h, substeps, p: CstrParams):
    # single-trajectory path in plain floats; same scheme as the array path
    def f(c, T):
        if T <= 0:
            raise DomainError("temperature must be positive")
        rate = c * p.k * math.exp(-p.N / T)
        return ((1.0 - c) * rho / p.V - rate,
                (p.T_f - T) * rho / p.V + rate - F * p.alpha_c * (T - p.T_c))

    for _ in range(substeps):
        a1, b1 = f(c, T)
        a2, b2 = f(c + 0.5 * h * a1, T + 0.5 * h * b1)
        a3, b3 = f(c + 0.5 * h * a2, T + 0.5 * h * b2)
        a4, b4 = f(c + h * a3, T + h * b3)
        c = c + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        T = T + (h / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
    return c, T


def integrate_step(state, action, dt: float = DT, substeps: int = 20,
                   params: CstrParams = CstrParams()):
    """Classical RK4 over one control interval with the action held constant."""
    x = np.asarray(state, dtype=np.float64)
    u = np.asarray(action, dtype=np.float64)
    h = dt / substeps
    if x.shape == (2,) and u.shape == (2,):
        x = np.array(_rk4_scalar(float(x[0]), float(x[1]), float(u[0]), float(u[1]),
                                 h, substeps, params))
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"non-finite state after integration from {state} under {action}")
        return x
    for _ in range(substeps):
        k1 = derivatives(x, u, params)
        k2 = derivatives(x + 0.5 * h * k1, u, params)
        k3 = derivatives(x + 0.5 * h * k2, u, params)
        k4 = derivatives(x + h * k3, u, params)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x)):
        raise IntegrationError(f"non-finite state after integration from {state} under {action}")
    return x


# ------------------------------------------------------------------- rewards

@dataclass(frozen=True)
class RewardBreakdown:
    r_cost: float
    r_con_rel: float
    r_con_bool: float
    total: float
    alpha: float = 5e-6

    def reassemble(self) -> float:
        return self.alpha * self.r_cost - self.r_con_rel - self.r_con_bool + 1.0


def violations(x_scaled, l):
    """Per-variable bound violations: scaled c, scaled T, storage in hours."""
    x_scaled = np.asarray(x_scaled, dtype=np.float64)
    vx = np.maximum(0.0, np.maximum(x_scaled - 1.0, -1.0 - x_scaled))
    vl = max(0.0, l - STORAGE_MAX, STORAGE_MIN - l)
    return np.array([vx[..., 0], vx[..., 1], vl], dtype=np.float64)


def outsized_violation(x_scaled, limit: float = 2.0) -> bool:
    """True when c or T sits farther than ``limit`` beyond a violated bound."""
    v = violations(x_scaled, 0.5 * (STORAGE_MIN + STORAGE_MAX))
    return bool(np.any(v[:2] > limit))


def reward(prev_action, prev_price: float, x_next, l_next: float,
           alpha: float = 5e-6, penalty: float = 1.0, bool_penalty: float = 0.1,
           dt: float = DT) -> RewardBreakdown:
    """Reward for arriving at (x_next, l_next) after applying ``prev_action``.

    ``prev_action`` is physical (rho, F); ``x_next`` is the *physical* state.
    """
    F = float(np.asarray(prev_action)[1])
    r_cost = (F_SS - F) * float(prev_price) * dt
    v = violations(scale_state(x_next), l_next)
    r_rel = penalty * float(np.sum(v * v))
    r_bool = bool_penalty if np.any(v > 0) else 0.0
    total = alpha * r_cost - r_rel - r_bool + 1.0
    return RewardBreakdown(r_cost, r_rel, r_bool, total, alpha)


# --------------------------------------------------------------- environment

@dataclass(frozen=True)
class EnvConfig:
    max_steps: int = 167
    horizon: int = 10
    alpha: float = 5e-6
    penalty: float = 1.0
    bool_penalty: float = 0.1
    outsized_limit: float = 2.0
    substeps: int = 20
    storage_init: tuple = (1.0, 2.0)
    params: CstrParams = field(default_factory=CstrParams)

    @property
    def window(self) -> int:
        return self.max_steps + self.horizon


@dataclass(frozen=True)
class Observation:
    """Controller input: scaled state, storage level, price forecast."""
    x: np.ndarray
    l: float
    prices: np.ndarray


@dataclass
class EnvState:
    x: np.ndarray          # physical (c, T)
    l: float
    step: int
    prices: np.ndarray     # full episode window, length max_steps + horizon
    l0: float
    done: bool = False

    def observe(self, horizon: int = 10) -> Observation:
        return Observation(scale_state(self.x), float(self.l),
                           self.prices[self.step:self.step + horizon].copy())


def env_reset(config: EnvConfig, prices, rng, start: int | None = None,
              storage: float | None = None) -> EnvState:
    """Steady-state start, uniform storage level, random contiguous price window."""
    prices = np.asarray(prices, dtype=np.float64)
    need = config.window
    if len(prices) < need:
        raise ConfigurationError(f"price series has {len(prices)} hours, episode needs {need}")
    if start is None:
        start = int(rng.integers(0, len(prices) - need + 1))
    if storage is None:
        storage = float(rng.uniform(*config.storage_init))
    window = prices[start:start + need].copy()
    return EnvState(STATE_SS.copy(), storage, 0, window, storage)


def env_step(state: EnvState, action, config: EnvConfig):
    """Advance one hour.  Returns (new_state, RewardBreakdown, terminated, truncated)."""
    if state.done:
        raise RuntimeError("episode already finished; call env_reset")
    u = np.clip(np.asarray(action, dtype=np.float64), ACTION_LB, ACTION_UB)
    x_next = integrate_step(state.x, u, DT, config.substeps, config.params)
    l_next = state.l + (u[0] - RHO_SS) * DT
    price = state.prices[state.step]
    r = reward(u, price, x_next, l_next, config.alpha, config.penalty, config.bool_penalty)
    step = state.step + 1
    terminated = outsized_violation(scale_state(x_next), config.outsized_limit)
    truncated = (not terminated) and step >= config.max_steps
    new = EnvState(x_next, l_next, step, state.prices, state.l0, terminated or truncated)
    return new, r, terminated, truncated


class CstrEnv:
    """Stateful wrapper around :func:`env_reset` / :func:`env_step`."""

    def __init__(self, prices, config: EnvConfig = EnvConfig(), rng=None):
        self.config = config
        self.prices = np.asarray(prices, dtype=np.float64)
        self.rng = np.random.default_rng(rng)
        self.state: EnvState | None = None

    def reset(self, start=None, storage=None) -> Observation:
        self.state = env_reset(self.config, self.prices, self.rng, start, storage)
        return self.state.observe(self.config.horizon)

    def step(self, action):
        prev = self.state
        self.state, r, term, trunc = env_step(prev, action, self.config)
        return self.state.observe(self.config.horizon), r, term, trunc


# -------------------------------------------------------------- episode logs

LOG_COLUMNS = ("step", "c", "T", "l", "rho", "F", "p", "r_cost", "r_con_rel", "r_con_bool",
               "reward", "viol_c", "viol_T", "viol_l", "terminated", "truncated")


class EpisodeLog:
    """Rows of one episode; row ``t`` holds the state reached at step ``t``
    and the action/price applied over the preceding hour."""

    def __init__(self):
        self.rows: list[dict] = []
        self.meta: dict = {}

    def record(self, state: EnvState, action, price, r: RewardBreakdown, terminated, truncated):
        u = np.clip(np.asarray(action, dtype=np.float64), ACTION_LB, ACTION_UB)
        v = violations(scale_state(state.x), state.l)
        self.rows.append({
            "step": state.step, "c": state.x[0], "T": state.x[1], "l": state.l,
            "rho": u[0], "F": u[1], "p": float(price),
            "r_cost": r.r_cost, "r_con_rel": r.r_con_rel, "r_con_bool": r.r_con_bool,
            "reward": r.total, "viol_c": int(v[0] > 0), "viol_T": int(v[1] > 0),
            "viol_l": int(v[2] > 0), "terminated": int(terminated), "truncated": int(truncated),
        })

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
