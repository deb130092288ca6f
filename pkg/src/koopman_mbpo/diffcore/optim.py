"""Adam, L-BFGS and small training utilities."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .params import Params
from .tape import ContractError


class Adam:
    """Adam with bias correction.  Moments are kept per parameter block."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: Params, grads) -> Params:
        """Update ``params`` in place and return it."""
        if isinstance(grads, dict):
            grads = [grads[k] for k in params]
        grads = list(grads)
        if len(grads) != len(params):
            raise ContractError(f"{len(grads)} gradients for {len(params)} parameter blocks")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for (name, p), g in zip(params.items(), grads):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            else:
                v = self.v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params

    def state_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "t": self.t,
                "m": {k: v.tolist() for k, v in self.m.items()},
                "v": {k: v.tolist() for k, v in self.v.items()}}

    @classmethod
    def from_state(cls, doc: dict) -> "Adam":
        opt = cls(doc["lr"], doc["beta1"], doc["beta2"], doc["eps"])
        opt.t = doc["t"]
        opt.m = {k: np.asarray(v) for k, v in doc["m"].items()}
        opt.v = {k: np.asarray(v) for k, v in doc["v"].items()}
        return opt


@dataclass
class LbfgsResult:
    x: np.ndarray
    loss: float
    stalled: bool
    evaluations: int


class LBFGS:
    """Limited-memory BFGS on flat vectors with an Armijo backtracking search.

    ``fun(x)`` must return ``(loss, gradient)``.  Curvature pairs are stored
    only when s.y is positive, so the implied inverse Hessian stays positive
    definite.
    """

    def __init__(self, history=10, c1=1e-4, shrink=0.5, max_trials=30, grad_tol=1e-14):
        self.history = history
        self.c1 = c1
        self.shrink = shrink
        self.max_trials = max_trials
        self.grad_tol = grad_tol
        self.pairs: deque = deque(maxlen=history)
        self._x = None
        self._f = None
        self._g = None

    def reset(self):
        self.pairs.clear()
        self._x = self._f = self._g = None

    def direction(self, g: np.ndarray) -> np.ndarray:
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if self.pairs:
            s, y, _ = self.pairs[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return -q

    def step(self, x, fun: Callable) -> LbfgsResult:
        x = np.asarray(x, dtype=np.float64)
        evals = 0
        if self._x is None or not np.array_equal(self._x, x):
            f, g = fun(x)
            evals += 1
            self._x, self._f, self._g = x.copy(), float(f), np.asarray(g, dtype=np.float64)
        f, g = self._f, self._g
        if np.max(np.abs(g), initial=0.0) <= self.grad_tol:
            return LbfgsResult(x.copy(), f, False, evals)
        d = self.direction(g)
        slope = g @ d
        if not np.isfinite(slope) or slope >= 0:
            self.pairs.clear()
            d = -g
            slope = g @ d
        alpha = 1.0 if self.pairs else min(1.0, 1.0 / np.linalg.norm(g))
        for _ in range(self.max_trials):
            xn = x + alpha * d
            fn, gn = fun(xn)
            evals += 1
            fn = float(fn)
            if np.isfinite(fn) and fn <= f + self.c1 * alpha * slope:
                gn = np.asarray(gn, dtype=np.float64)
                s, y = xn - x, gn - g
                sy = s @ y
                if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
                    self.pairs.append((s, y, 1.0 / sy))
                self._x, self._f, self._g = xn.copy(), fn, gn
                return LbfgsResult(xn, fn, False, evals)
            alpha *= self.shrink
        return LbfgsResult(x.copy(), f, True, evals)


def clip_grad_norm(grads: list, max_norm: float):
    """Rescale a list of arrays so their joint 2-norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


class EarlyStopping:
    """Patience rule: stop once ``patience`` epochs pass without a new minimum."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.epoch = -1

    def update(self, value: float) -> bool:
        """Record one epoch's metric; return True if it is a new minimum."""
        self.epoch += 1
        if value < self.best:
            self.best = float(value)
            self.best_epoch = self.epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self.epoch - self.best_epoch >= self.patience
