"""PPO inside the learned surrogate: branched critic, MLP policy, GAE and
the improvement-ratio stopping rule.

Policies share one duck-typed interface: ``params`` (trainable blocks),
``act(x, l, prices, rng, sigma, with_jacobian)`` returning an
:class:`~koopman_mbpo.ocp.PolicyOutput`, and ``kind``.  Log-probabilities
for a batch come from :func:`batch_log_prob`, which dispatches on ``kind``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import pinn
from .cstr import (DT, RHO_SS, ConfigurationError, EnvConfig, Observation, outsized_violation,
                   reward, unscale_action, unscale_state)
from .diffcore import (Adam, NonFiniteError, Params, Tape, ad, backward, clip_grad_norm,
                       layer_shapes, uniform_fan_in)
from .ocp import PolicyOutput, sample_action

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
_BRANCHES = (("x_", (2, 24, 24)), ("l_", (1, 8, 8)), ("p_", (2, 8, 8)), ("h_", (10, 24, 24)))
_HEAD = (64, 64, 64)


# ------------------------------------------------------------------ features

@dataclass(frozen=True)
class Features:
    """Maps observations to the four branch inputs.

    Prices are standardized with training-partition statistics; storage is
    mapped from [0, 6] h to [-1, 1].
    """
    price_mean: float = 0.0
    price_std: float = 1.0

    @classmethod
    def from_prices(cls, prices) -> "Features":
        prices = np.asarray(prices, dtype=np.float64)
        return cls(float(prices.mean()), float(max(prices.std(), 1e-8)))

    def __call__(self, x, l, prices) -> list:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        l = np.asarray(l, dtype=np.float64).reshape(-1, 1)
        p = (np.atleast_2d(np.asarray(prices, dtype=np.float64)) - self.price_mean) / self.price_std
        spread = p.max(axis=1) - p.min(axis=1)
        return [x, (l - 3.0) / 3.0, np.stack([p[:, 0], spread], axis=1), p]


def trunk_shapes(n_out: int) -> dict:
    shapes = {}
    for prefix, sizes in _BRANCHES:
        shapes.update(layer_shapes(prefix, sizes))
    shapes.update(layer_shapes("head_", _HEAD + (n_out,)))
    return shapes


def _trunk(p, feats, tanh, concat):
    outs = []
    for (prefix, sizes), h in zip(_BRANCHES, feats):
        for i in range(len(sizes) - 1):
            h = tanh(h @ p[f"{prefix}W{i}"] + p[f"{prefix}b{i}"])
        outs.append(h)
    h = concat(outs)
    for i in range(len(_HEAD)):
        h = h @ p[f"head_W{i}"] + p[f"head_b{i}"]
        if i < len(_HEAD) - 1:
            h = tanh(h)
    return h


def _np_concat(xs):
    return np.concatenate(xs, axis=-1)


def _ad_concat(xs):
    return ad.concat(xs, axis=-1)


def init_critic(seed) -> Params:
    return uniform_fan_in(trunk_shapes(1), seed)


def critic_value(params: Params, feats) -> np.ndarray:
    return _trunk(params, feats, np.tanh, _np_concat)[:, 0]


# -------------------------------------------------------------------- policy

class MlpPolicy:
    """Gaussian policy whose mean is the branched trunk with a 2-wide head."""

    kind = "mlp"

    def __init__(self, features: Features, seed=0, log_sigma=np.log(0.05)):
        self.features = features
        self.params = uniform_fan_in(trunk_shapes(2), seed)
        # small output layer so the initial mean sits near the box centre
        self.params["head_W2"] *= 0.01
        self.params["head_b2"] *= 0.0
        self.params["log_sigma"] = np.broadcast_to(log_sigma, (2,))

    @property
    def log_sigma(self) -> np.ndarray:
        return self.params["log_sigma"]

    def mean(self, x, l, prices) -> np.ndarray:
        return _trunk(self.params, self.features(x, l, prices), np.tanh, _np_concat)

    def act(self, x, l, prices, rng=None, sigma=None, with_jacobian=False) -> PolicyOutput:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        mean = self.mean(x, l, prices)[0]
        sigma = np.exp(self.log_sigma) if sigma is None else sigma
        u, raw, logp, sig = sample_action(mean, sigma, rng)
        return PolicyOutput(mean, u, raw, logp, sig)


def _gaussian_terms(a, mean, log_sigma):
    z = (a - mean) * np.exp(-log_sigma)
    return z, np.sum(-0.5 * z * z - log_sigma - 0.5 * LOG_2PI, axis=1)


def batch_log_prob(policy, batch: "RolloutBuffer", idx):
    """Summed log-density of the stored raw actions under the current policy.

    Returns ``(logp, vjp)`` where ``vjp(g)`` gives the gradient of
    ``sum(g * logp)`` for every block of ``policy.params`` (in order).
    """
    a = batch.u_raw[idx]
    if policy.kind == "mlp":
        tape = Tape()
        nodes = {k: tape.var(v) for k, v in policy.params.items()}
        feats = [tape.const(f) for f in policy.features(batch.x[idx], batch.l[idx], batch.p[idx])]
        mean = _trunk(nodes, feats, ad.tanh, _ad_concat)
        ls = nodes["log_sigma"]
        z = (tape.const(a) - mean) * ad.exp(ad.neg(ls))
        logp = ad.sum_(-0.5 * z * z - ls - 0.5 * LOG_2PI, axis=1)

        def vjp(g):
            out = ad.sum_(logp * tape.const(np.asarray(g, dtype=np.float64)))
            return backward(out, list(nodes.values()))
        return logp.value.copy(), vjp

    means = np.zeros((len(idx), 2))
    jacs = np.zeros((len(idx), 2, 6))
    for n, i in enumerate(idx):
        u, J, piece = policy.mean_and_jacobian(batch.x[i], batch.l[i], batch.p[i], batch.pieces[i])
        batch.pieces[i] = piece
        means[n], jacs[n] = u, J
    ls = policy.log_sigma
    z, logp = _gaussian_terms(a, means, ls)
    sigma = np.exp(ls)

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)[:, None]
        d_mean = g * z / sigma
        return [np.einsum("ni,nij->j", d_mean, jacs), np.sum(g * (z * z - 1.0), axis=0)]
    return logp, vjp


# ---------------------------------------------------------- surrogate env

class SurrogateEnv:
    """Short episodes on the learned ensemble.

    Each step advances with one member: a fixed one when ``member`` is
    given, otherwise one drawn uniformly per step.  Rewards use the plant's
    known reward function; storage is integrated exactly.
    """

    def __init__(self, ensemble, states, prices, config: EnvConfig = EnvConfig(),
                 max_steps: int = 8, rng=None, member: int | None = None):
        self.ensemble = ensemble
        self.states = np.asarray(states, dtype=np.float64).reshape(-1, 2)
        self.prices = np.asarray(prices, dtype=np.float64)
        self.config = config
        self.max_steps = max_steps
        self.rng = np.random.default_rng(rng)
        self.member = member
        self.last_member = -1
        if len(self.prices) < max_steps + config.horizon:
            raise ConfigurationError("price series too short for surrogate episodes")
        self.x = self.l = self.window = None
        self.t = 0

    def reset(self, seed=None) -> Observation:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        if len(self.states) == 0:
            raise ConfigurationError("surrogate reset needs a non-empty training-state pool")
        self.x = self.states[self.rng.integers(len(self.states))].copy()
        self.l = float(self.rng.uniform(*self.config.storage_init))
        need = self.max_steps + self.config.horizon
        start = int(self.rng.integers(0, len(self.prices) - need + 1))
        self.window = self.prices[start:start + need]
        self.t = 0
        return self._observe()

    def _observe(self) -> Observation:
        return Observation(self.x.copy(), self.l, self.window[self.t:self.t + self.config.horizon].copy())

    def step(self, u):
        u = np.clip(np.asarray(u, dtype=np.float64), -1.0, 1.0)
        k = self.member if self.member is not None else int(self.rng.integers(len(self.ensemble)))
        self.last_member = k
        with np.errstate(all="ignore"):
            x_next = pinn.predict_step(self.ensemble.members[k], self.x, u)
        if not np.all(np.isfinite(x_next)):
            x_next = np.nan_to_num(x_next, nan=10.0, posinf=10.0, neginf=-10.0)
        action = unscale_action(u)
        l_next = self.l + (action[0] - RHO_SS) * DT
        cfg = self.config
        r = reward(action, self.window[self.t], unscale_state(x_next), l_next,
                   cfg.alpha, cfg.penalty, cfg.bool_penalty)
        self.x, self.l = x_next, l_next
        self.t += 1
        terminated = outsized_violation(x_next, cfg.outsized_limit)
        truncated = (not terminated) and self.t >= self.max_steps
        return self._observe(), r.total, terminated, truncated


# -------------------------------------------------------------------- buffer

@dataclass
class RolloutBuffer:
    x: np.ndarray
    l: np.ndarray
    p: np.ndarray
    u_raw: np.ndarray
    logp: np.ndarray
    reward: np.ndarray
    value: np.ndarray
    next_value: np.ndarray
    terminated: np.ndarray
    end: np.ndarray          # episode (or buffer) ends after this step
    pieces: list = field(default_factory=list)
    failures: int = 0

    def __len__(self):
        return len(self.reward)


def compute_gae(rewards, values, next_values, terminated, ends, gamma: float = 0.99,
                lam: float = 0.95, normalize: bool = False):
    """Generalized advantage estimates and returns.

    A terminated step does not bootstrap; a truncated step (or the last step
    of the buffer) bootstraps from the value of the observation it reached.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        if ends[t]:
            running = 0.0
        delta = rewards[t] + gamma * (0.0 if terminated[t] else next_values[t]) - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    returns = adv + np.asarray(values, dtype=np.float64)
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


def collect_rollouts(env: SurrogateEnv, policy, critic: Params, features: Features,
                     n_steps: int, rng) -> RolloutBuffer:
    cols = {k: [] for k in ("x", "l", "p", "u_raw", "logp", "reward", "terminated", "end",
                            "nx", "nl", "np")}
    pieces, failures = [], 0
    obs = env.reset(seed=int(rng.integers(2**63)))
    for t in range(n_steps):
        out = policy.act(obs.x, obs.l, obs.prices, rng, with_jacobian=policy.kind == "koopman")
        failures += int(out.failed)
        nxt, r, term, trunc = env.step(out.u)
        end = term or trunc or t == n_steps - 1
        for k, v in (("x", obs.x), ("l", obs.l), ("p", obs.prices), ("u_raw", out.u_raw),
                     ("logp", float(np.sum(out.logp))), ("reward", r), ("terminated", term),
                     ("end", end), ("nx", nxt.x), ("nl", nxt.l), ("np", nxt.prices)):
            cols[k].append(v)
        pieces.append(out.piece)
        obs = env.reset(seed=int(rng.integers(2**63))) if (term or trunc) else nxt
    a = {k: np.array(v) for k, v in cols.items()}
    value = critic_value(critic, features(a["x"], a["l"], a["p"]))
    next_value = critic_value(critic, features(a["nx"], a["nl"], a["np"]))
    return RolloutBuffer(a["x"], a["l"], a["p"], a["u_raw"], a["logp"], a["reward"], value,
                         next_value, a["terminated"].astype(bool), a["end"].astype(bool),
                         pieces, failures)


# -------------------------------------------------------------------- update

@dataclass
class PpoConfig:
    n_steps: int = 2048
    batch_size: int = 256
    n_epochs: int = 10
    lr: float = 1e-3
    max_grad_norm: float = 0.5
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    vf_coef: float = 0.5
    normalize_advantage: bool = True
    rollout_len: int = 8
    check_every: int = 5
    window: int = 25
    ratio_threshold: float = 0.7
    n_val_envs: int = 10
    val_episodes: int = 5
    max_iterations: int = 200

    @classmethod
    def from_dict(cls, d: dict) -> "PpoConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown PPO settings: {sorted(unknown)}")
        return cls(**d)


def clipped_surrogate(ratio, adv, clip: float):
    """Per-sample clipped objective and its derivative with respect to the ratio."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    plain = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    obj = np.minimum(plain, clipped)
    d_ratio = np.where(plain <= clipped, adv, 0.0)
    return obj, d_ratio


@dataclass
class PpoState:
    """Critic, its input scaling and optimizer moments; persists across
    policy-optimization phases."""
    critic: Params
    features: Features
    opt_pi: Adam
    opt_vf: Adam

    @classmethod
    def fresh(cls, seed, features: Features, lr: float = 1e-3) -> "PpoState":
        return cls(init_critic(seed), features, Adam(lr), Adam(lr))


def _value_loss_and_grad(critic: Params, feats, returns, coef: float):
    tape = Tape()
    nodes = {k: tape.var(v) for k, v in critic.items()}
    v = _trunk(nodes, [tape.const(f) for f in feats], ad.tanh, _ad_concat)
    err = v - tape.const(returns[:, None])
    loss = coef * ad.mean(err * err)
    return float(loss.value), backward(loss, list(nodes.values()))


def ppo_update(policy, state: PpoState, buf: RolloutBuffer, config: PpoConfig, rng) -> dict:
    """Clipped-surrogate policy step plus value regression, one minibatch at a time."""
    adv_all, returns_all = compute_gae(buf.reward, buf.value, buf.next_value, buf.terminated,
                                       buf.end, config.gamma, config.gae_lambda)
    n = len(buf)
    stats = {"policy_loss": [], "value_loss": [], "clip_fraction": [], "approx_kl": [],
             "grad_norm": [], "skipped": 0}
    n_pi = len(policy.params)
    for _ in range(config.n_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            adv = adv_all[idx]
            if config.normalize_advantage and len(idx) > 1:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            logp, vjp = batch_log_prob(policy, buf, idx)
            with np.errstate(over="ignore", invalid="ignore"):
                ratio = np.exp(logp - buf.logp[idx])
            obj, d_ratio = clipped_surrogate(ratio, adv, config.clip)
            pl = -float(np.mean(obj))
            feats = state.features(buf.x[idx], buf.l[idx], buf.p[idx])
            try:
                if not np.isfinite(pl):
                    raise NonFiniteError(f"policy loss {pl}")
                vl, g_vf = _value_loss_and_grad(state.critic, feats, returns_all[idx],
                                                config.vf_coef)
                g_pi = vjp(-d_ratio * ratio / len(idx))
            except NonFiniteError as exc:
                stats["skipped"] += 1
                log.warning("skipping PPO minibatch: %s", exc)
                continue
            grads, norm = clip_grad_norm(list(g_pi) + list(g_vf), config.max_grad_norm)
            if not all(np.all(np.isfinite(g)) for g in grads):
                stats["skipped"] += 1
                continue
            state.opt_pi.step(policy.params, grads[:n_pi])
            state.opt_vf.step(state.critic, grads[n_pi:])
            stats["policy_loss"].append(pl)
            stats["value_loss"].append(vl)
            stats["clip_fraction"].append(float(np.mean(np.abs(ratio - 1.0) > config.clip)))
            stats["approx_kl"].append(float(np.mean((ratio - 1.0) - np.log(ratio))))
            stats["grad_norm"].append(norm)
    out = {k: (float(np.mean(v)) if v else float("nan")) if isinstance(v, list) else v
           for k, v in stats.items()}
    out["mean_reward"] = float(np.mean(buf.reward))
    out["solver_failures"] = buf.failures
    return out


# ------------------------------------------------------------ stopping rule

class ImprovementTracker:
    """Share of validation environments whose best average reward was
    renewed within the last ``window`` PPO iterations."""

    def __init__(self, n_envs: int = 10, window: int = 25, threshold: float = 0.7):
        self.best = np.full(n_envs, -np.inf)
        self.last = np.full(n_envs, -np.inf)
        self.window = window
        self.threshold = threshold

    def update(self, iteration: int, scores) -> tuple[float, bool]:
        scores = np.asarray(scores, dtype=np.float64)
        better = scores > self.best
        self.best = np.where(better, scores, self.best)
        self.last = np.where(better, iteration, self.last)
        ratio = float(np.mean(iteration - self.last < self.window))
        return ratio, ratio < self.threshold


def validation_scores(policy, envs: list, episodes: int, seed: int) -> np.ndarray:
    """Mean noise-free episode return per validation environment."""
    scores = np.zeros(len(envs))
    for i, env in enumerate(envs):
        rng = np.random.default_rng([seed, i])
        total = 0.0
        for _ in range(episodes):
            obs = env.reset(seed=int(rng.integers(2**63)))
            done = False
            while not done:
                out = policy.act(obs.x, obs.l, obs.prices, sigma=0.0)
                obs, r, term, trunc = env.step(out.u)
                total += r
                done = term or trunc
        scores[i] = total / episodes
    return scores


@dataclass
class PpoResult:
    iterations: int
    terminated_by_rule: bool
    history: list


def run_ppo(policy, state: PpoState, ensemble, train_states, train_prices, config: PpoConfig,
            rng, env_config: EnvConfig = EnvConfig(), on_iteration=None) -> PpoResult:
    """PPO iterations on the surrogate until the improvement ratio drops below
    the threshold (checked every ``check_every`` iterations) or the cap."""
    env = SurrogateEnv(ensemble, train_states, train_prices, env_config, config.rollout_len, rng)
    val_envs = [SurrogateEnv(ensemble, train_states, train_prices, env_config, config.rollout_len,
                             member=i % len(ensemble)) for i in range(config.n_val_envs)]
    val_seed = int(rng.integers(2**31))
    tracker = ImprovementTracker(config.n_val_envs, config.window, config.ratio_threshold)
    history, stop = [], False
    it = 0
    for it in range(1, config.max_iterations + 1):
        buf = collect_rollouts(env, policy, state.critic, state.features, config.n_steps, rng)
        stats = ppo_update(policy, state, buf, config, rng)
        stats["iteration"] = it
        if it % config.check_every == 0:
            scores = validation_scores(policy, val_envs, config.val_episodes, val_seed)
            stats["improvement_ratio"], stop = tracker.update(it, scores)
            stats["validation_reward"] = float(np.mean(scores))
        history.append(stats)
        if on_iteration is not None:
            on_iteration(stats)
        if stop:
            break
    return PpoResult(it, stop, history)
