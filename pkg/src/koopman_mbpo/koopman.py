"""Koopman surrogate: tanh encoder lifting (c, T) to 8 latent states,
linear latent dynamics ``z+ = A z + B u`` and a linear decoder ``x = C z``.

All inputs and outputs are in scaled units.  Batches are row-major, so the
latent update is written ``Z A^T + U B^T``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cstr import ConfigurationError
from .data import Split, minibatches
from .diffcore import Adam, EarlyStopping, Params, Tape, ad, backward, clip_grad_norm
from .diffcore.params import layer_shapes

ENCODER_SIZES = (2, 4, 6, 8)
LATENT = 8
N_ENC = len(ENCODER_SIZES) - 1


def koopman_shapes() -> dict:
    shapes = layer_shapes("enc", ENCODER_SIZES)
    shapes.update(A=(LATENT, LATENT), B=(LATENT, 2), C=(2, LATENT))
    return shapes


def init_koopman(seed) -> Params:
    """Uniform(+-1/sqrt(fan_in)) everywhere; A, B, C are stored as (out, in)."""
    rng = np.random.default_rng(seed)
    p = Params()
    for name, shape in koopman_shapes().items():
        if name.startswith("encW"):
            fan_in = shape[0]
        elif name.startswith("encb"):
            fan_in = ENCODER_SIZES[int(name[4:])]
        else:
            fan_in = shape[1]
        bound = 1.0 / np.sqrt(fan_in)
        p[name] = rng.uniform(-bound, bound, size=shape)
    return p


def _encode(n: dict, x):
    h = x
    for i in range(N_ENC):
        h = h @ n[f"encW{i}"] + n[f"encb{i}"]
        if i < N_ENC - 1:
            h = ad.tanh(h) if isinstance(h, ad.Node) else np.tanh(h)
    return h


def _advance(n: dict, z, u):
    return z @ n["A"].T + u @ n["B"].T


def _decode(n: dict, z):
    return z @ n["C"].T


def encode(params: Params, x) -> np.ndarray:
    """Lift scaled state(s) to latent space."""
    return _encode(params, np.asarray(x, dtype=np.float64))


def decode(params: Params, z) -> np.ndarray:
    return _decode(params, np.asarray(z, dtype=np.float64))


def advance(params: Params, z, u) -> np.ndarray:
    return _advance(params, np.asarray(z, dtype=np.float64), np.asarray(u, dtype=np.float64))


def predict(params: Params, x, u) -> np.ndarray:
    """One-step prediction ``C (A psi(x) + B u)``; same path as the L_pred term."""
    return decode(params, advance(params, encode(params, x), u))


def rollout(params: Params, x0, controls) -> np.ndarray:
    """Multi-step prediction: encode once, then iterate the latent linear map."""
    z = encode(params, x0)
    out = []
    for u in np.asarray(controls, dtype=np.float64):
        z = advance(params, z, u)
        out.append(decode(params, z))
    return np.array(out)


def _latent_terms(n: dict, z, z_next_true, x, u, xn):
    z_next = _advance(n, z, u)
    l_ae = ad.mean(ad.sum_(ad.square(_decode(n, z) - x), axis=-1))
    l_lat = ad.mean(ad.sum_(ad.square(z_next - z_next_true), axis=-1))
    l_pred = ad.mean(ad.sum_(ad.square(_decode(n, z_next) - xn), axis=-1))
    return l_ae, l_lat, l_pred


def _loss_nodes(n: dict, x, u, xn):
    return _latent_terms(n, _encode(n, x), _encode(n, xn), x, u, xn)


def si_losses(params: Params, x, u, x_next) -> tuple:
    """(L_AE, L_latent, L_pred), each the batch mean of a squared 2-norm."""
    tape = Tape()
    n = {k: tape.const(v) for k, v in params.items()}
    terms = _loss_nodes(n, tape.const(x), tape.const(u), tape.const(x_next))
    return tuple(float(t.value) for t in terms)


def latent_losses(params: Params, z, z_next, x, u, x_next) -> tuple:
    """The three SI terms for given latent codes instead of encoder outputs."""
    tape = Tape()
    n = {k: tape.const(v) for k, v in params.items()}
    terms = _latent_terms(n, *(tape.const(a) for a in (z, z_next, x, u, x_next)))
    return tuple(float(t.value) for t in terms)


def si_loss_and_grad(params: Params, x, u, x_next):
    tape = Tape()
    n = tape.vars(params)
    terms = _loss_nodes(n, tape.const(x), tape.const(u), tape.const(x_next))
    total = terms[0] + terms[1] + terms[2]
    grads = backward(total, list(n.values()))
    return float(total.value), grads


@dataclass(frozen=True)
class SiConfig:
    lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 5000
    patience: int = 25
    weight_decay: float = 0.0
    grad_clip: float | None = None

    def __post_init__(self):
        if not (self.lr > 0 and self.batch_size > 0 and self.max_epochs > 0 and self.patience > 0):
            raise ConfigurationError("SI settings must be positive")


@dataclass
class SiHistory:
    initial_val: tuple
    train_loss: list = field(default_factory=list)
    val_terms: list = field(default_factory=list)
    best_val: list = field(default_factory=list)
    best_epoch: int = -1

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return {"initial_val": list(self.initial_val), "train_loss": self.train_loss,
                "val_terms": [list(t) for t in self.val_terms], "best_val": self.best_val,
                "best_epoch": self.best_epoch}


def train_si(params: Params, train: Split, val: Split, config: SiConfig = SiConfig(),
             seed=0) -> tuple[Params, SiHistory]:
    """Adam on L_AE + L_latent + L_pred with early stopping on the validation sum.

    Returns the parameters of the best validation epoch (the input parameters
    if no epoch improves on them).
    """
    train.require("training")
    val.require("validation")
    rng = np.random.default_rng(seed)
    params = params.copy()
    opt = Adam(lr=config.lr)
    stop = EarlyStopping(config.patience)
    init = si_losses(params, val.x, val.u, val.x_next)
    history = SiHistory(init)
    best, best_val = params.copy(), sum(init)
    for epoch in range(config.max_epochs):
        total = 0.0
        for idx in minibatches(len(train), config.batch_size, rng):
            loss, grads = si_loss_and_grad(params, train.x[idx], train.u[idx], train.x_next[idx])
            if config.weight_decay:
                grads = [g + config.weight_decay * p for g, p in zip(grads, params.values())]
            if config.grad_clip:
                grads, _ = clip_grad_norm(grads, config.grad_clip)
            opt.step(params, grads)
            total += loss * len(idx)
        terms = si_losses(params, val.x, val.u, val.x_next)
        history.train_loss.append(total / len(train))
        history.val_terms.append(terms)
        if stop.update(sum(terms)) and sum(terms) < best_val:
            best, best_val = params.copy(), sum(terms)
            history.best_epoch = epoch
        history.best_val.append(best_val)
        if stop.should_stop:
            break
    return best, history
