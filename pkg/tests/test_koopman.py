import numpy as np
import pytest

from koopman_mbpo import koopman as km
from koopman_mbpo.cstr import ConfigurationError
from koopman_mbpo.data import Split
from koopman_mbpo.diffcore import Tape, ad, backward


def test_shapes_and_init():
    p = km.init_koopman(0)
    assert p["A"].shape == (8, 8) and p["B"].shape == (8, 2) and p["C"].shape == (2, 8)
    assert [p[f"encW{i}"].shape for i in range(3)] == [(2, 4), (4, 6), (6, 8)]
    assert np.all(np.abs(p["B"]) <= 1 / np.sqrt(2)) and np.all(np.abs(p["A"]) <= 1 / np.sqrt(8))
    assert p.digest() == km.init_koopman(0).digest()


def test_encode_finite_and_deterministic():
    p = km.init_koopman(1)
    x = np.random.default_rng(0).uniform(-3, 3, (20, 2))
    z = km.encode(p, x)
    assert z.shape == (20, 8) and np.all(np.isfinite(z))
    assert np.array_equal(z, km.encode(p, x))


def test_encode_gradient_matches_finite_differences():
    p = km.init_koopman(2)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (5, 2))
    w = rng.normal(size=(5, 8))
    tape = Tape()
    xv = tape.var(x0)
    n = {k: tape.const(v) for k, v in p.items()}
    out = ad.sum_(km._encode(n, xv) * w)
    (g,) = backward(out, [xv])
    h = 1e-6
    fd = np.zeros_like(x0)
    for idx in np.ndindex(*x0.shape):
        e = np.zeros_like(x0)
        e[idx] = h
        fd[idx] = (np.sum(km.encode(p, x0 + e) * w) - np.sum(km.encode(p, x0 - e) * w)) / (2 * h)
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8)) < 1e-4


def _linear_system(seed=0, n=50):
    rng = np.random.default_rng(seed)
    p = km.init_koopman(seed)
    A = 0.5 * rng.normal(size=(8, 8)) / np.sqrt(8)
    B = rng.normal(size=(8, 2))
    p["A"], p["B"] = A, B
    p["C"] = np.hstack([np.eye(2), np.zeros((2, 6))])
    z = np.hstack([rng.normal(size=(n, 2)), np.zeros((n, 6))])
    z[:, 2:] = rng.normal(size=(n, 6))
    u = rng.uniform(-1, 1, (n, 2))
    zn = z @ A.T + u @ B.T
    return p, z, zn, z[:, :2], u, zn[:, :2]


def test_losses_vanish_on_exact_linear_system():
    p, z, zn, x, u, xn = _linear_system()
    terms = km.latent_losses(p, z, zn, x, u, xn)
    assert max(terms) < 1e-10


def test_reconstruction_loss_zero_with_identity_padding():
    p, z, zn, x, u, xn = _linear_system(1)
    assert km.latent_losses(p, z, zn, x, u, xn)[0] == 0.0


def test_random_params_give_positive_losses(transitions_500):
    tr = transitions_500.train()
    terms = km.si_losses(km.init_koopman(3), tr.x, tr.u, tr.x_next)
    assert all(t > 0 for t in terms)


def test_loss_matches_numpy_formula(transitions_500):
    tr = transitions_500.train()
    p = km.init_koopman(4)
    z = km.encode(p, tr.x)
    zn = z @ p["A"].T + tr.u @ p["B"].T
    expect = (np.mean(np.sum((z @ p["C"].T - tr.x) ** 2, 1)),
              np.mean(np.sum((zn - km.encode(p, tr.x_next)) ** 2, 1)),
              np.mean(np.sum((zn @ p["C"].T - tr.x_next) ** 2, 1)))
    assert np.allclose(km.si_losses(p, tr.x, tr.u, tr.x_next), expect, rtol=1e-12)


def test_prediction_shares_the_loss_code_path(transitions_500):
    tr = transitions_500.train()
    p = km.init_koopman(5)
    tape = Tape()
    n = {k: tape.const(v) for k, v in p.items()}
    node = km._decode(n, km._advance(n, km._encode(n, tape.const(tr.x)), tape.const(tr.u)))
    assert np.array_equal(node.value, km.predict(p, tr.x, tr.u))


def test_rollout_encodes_only_once():
    p = km.init_koopman(6)
    x0 = np.array([0.1, -0.2])
    us = np.random.default_rng(0).uniform(-1, 1, (9, 2))
    calls = []
    orig = km._encode

    def counting(n, x):
        calls.append(1)
        return orig(n, x)

    km._encode = counting
    try:
        out = km.rollout(p, x0, us)
    finally:
        km._encode = orig
    assert len(calls) == 1
    z = km.encode(p, x0)
    for k in range(9):
        z = p["A"] @ z + p["B"] @ us[k]
        assert np.allclose(out[k], p["C"] @ z, atol=1e-14)


def test_training_is_deterministic_and_monotone(transitions_500):
    tr, va = transitions_500.train(), transitions_500.val()
    cfg = km.SiConfig(max_epochs=40)
    p1, h1 = km.train_si(km.init_koopman(0), tr, va, cfg, seed=7)
    p2, h2 = km.train_si(km.init_koopman(0), tr, va, cfg, seed=7)
    assert h1.train_loss == h2.train_loss and p1.digest() == p2.digest()
    assert np.all(np.diff(h1.best_val) <= 0)
    assert h1.best_val[-1] < sum(h1.initial_val)
    assert sum(km.si_losses(p1, va.x, va.u, va.x_next)) == pytest.approx(h1.best_val[-1])


def test_training_stops_on_patience(transitions_500, monkeypatch):
    tr, va = transitions_500.train(), transitions_500.val()
    monkeypatch.setattr(km, "si_losses", lambda *a: (1.0, 1.0, 1.0))
    _, h = km.train_si(km.init_koopman(0), tr, va, km.SiConfig(max_epochs=500, patience=3))
    # epoch 0 sets the best, then three flat epochs exhaust the patience
    assert h.epochs == 4


def test_empty_partition_is_configuration_error(transitions_500):
    empty = Split(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ConfigurationError):
        km.train_si(km.init_koopman(0), transitions_500.train(), empty)
    with pytest.raises(ConfigurationError):
        km.SiConfig(lr=0)
