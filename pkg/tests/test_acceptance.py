"""Exit criteria.  Each test checks one criterion at its stated tolerance;
the terminal summary prints one PASS/FAIL/SKIPPED line per criterion.

Criteria 7, 9 and 10 train models for tens of minutes.  Criterion 8 needs
many CPU hours and only runs with ``KMBPO_FULL=1``.
"""
import os
import time

import numpy as np
import pytest

from koopman_mbpo import bench, cstr, koopman, mbpo, ocp, pinn
from koopman_mbpo.config import DESK_SCHEDULE, FULL_SCHEDULE, preset
from koopman_mbpo.data import Split
from koopman_mbpo.diffcore import (LBFGS, Params, Tape, ad, backward, input_derivative,
                                   layer_nodes, layer_shapes, xavier_normal)
from koopman_mbpo.qp import brute_force_qp, max_kkt_residual, solve_qp

from conftest import random_transitions
from test_qp import random_qp

pytestmark = pytest.mark.acceptance


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))))


# ------------------------------------------------------------------ 1


def _mlp_loss(params, X, tau, n_layers):
    t = Tape()
    n = t.vars(params)
    tv = t.var(tau)
    out = ad.mlp(ad.concat([tv, t.const(X)], axis=-1), layer_nodes(n, "", n_layers))
    return t, n, tv, out


@pytest.mark.criterion(1, "diff-core gradients vs finite differences")
def test_criterion_1_gradient_oracle(record_property):
    t0 = time.perf_counter()
    worst_grad = worst_deriv = 0.0
    h = 1e-6
    for seed in range(6):
        rng = np.random.default_rng(seed)
        sizes = (3,) + tuple(int(k) for k in rng.integers(3, 9, size=1 + seed % 2)) + (2,)
        params = xavier_normal(layer_shapes("", sizes), seed)
        n_layers = len(sizes) - 1
        X = rng.uniform(-1, 1, size=(5, 2))
        tau = rng.uniform(0, 1, size=(5, 1))
        w = rng.normal(size=(5, 2))

        def loss(p):
            return float(np.sum(_mlp_loss(p, X, tau, n_layers)[3].value * w))

        _, n, _, out = _mlp_loss(params, X, tau, n_layers)
        grads = backward(ad.sum_(ad.mul(out, w)), list(n.values()))
        for (name, p), g in zip(params.items(), grads):
            fd = np.zeros_like(p)
            for i in np.ndindex(p.shape):
                q_plus, q_minus = params.copy(), params.copy()
                q_plus[name] = p.copy()
                q_plus[name][i] += h
                q_minus[name] = p.copy()
                q_minus[name][i] -= h
                fd[i] = (loss(q_plus) - loss(q_minus)) / (2 * h)
            worst_grad = max(worst_grad, rel_err(g, fd))
        _, _, tv, out = _mlp_loss(params, X, tau, n_layers)
        (d,) = input_derivative([out], tv)
        fd = (_mlp_loss(params, X, tau + h, n_layers)[3].value
              - _mlp_loss(params, X, tau - h, n_layers)[3].value) / (2 * h)
        worst_deriv = max(worst_deriv, rel_err(d.value, fd))
    elapsed = time.perf_counter() - t0
    record_property("max_rel_err_backward", f"{worst_grad:.2e}")
    record_property("max_rel_err_input_derivative", f"{worst_deriv:.2e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert worst_grad < 1e-4 and worst_deriv < 1e-4
    assert elapsed < 10


# ------------------------------------------------------------------ 2

@pytest.mark.criterion(2, "QP solver vs brute-force oracle on 200 random QPs")
def test_criterion_2_qp_correctness(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_obj = worst_kkt = 0.0
    for _ in range(200):
        qp = random_qp(rng)
        sol = solve_qp(qp)
        f, _ = brute_force_qp(qp)
        assert sol.status == "optimal"
        worst_obj = max(worst_obj, abs(sol.objective - f) / max(1.0, abs(f)))
        worst_kkt = max(worst_kkt, max_kkt_residual(qp, sol))
    elapsed = time.perf_counter() - t0
    record_property("max_objective_gap", f"{worst_obj:.2e}")
    record_property("max_kkt", f"{worst_kkt:.2e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert worst_obj <= 1e-6 and worst_kkt <= 1e-8 and elapsed < 60


# ------------------------------------------------------------------ 3

@pytest.mark.criterion(3, "d u*/d theta_B vs finite differences on 50 OCP instances")
def test_criterion_3_differentiable_layer(trained_koopman, record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    h = 1e-5
    worst, checked, excluded = 0.0, 0, 0
    for _ in range(50):
        x, l0 = rng.uniform(-1.2, 1.2, 2), rng.uniform(0, 6)
        prices, theta = rng.uniform(10, 70, 10), rng.normal(0, 0.2, 6)
        inst = ocp.OcpInstance.from_state(trained_koopman, x, l0, prices, theta)
        qp, sol = ocp.solve_instance(inst)
        J, degenerate = ocp.grad_theta_B(qp, sol)
        fd = np.zeros((2, 6))
        kink = False
        for j in range(6):
            e = np.zeros(6)
            e[j] = h
            _, a = ocp.solve_instance(ocp.OcpInstance.from_state(trained_koopman, x, l0, prices,
                                                                 theta + e))
            _, b = ocp.solve_instance(ocp.OcpInstance.from_state(trained_koopman, x, l0, prices,
                                                                 theta - e))
            kink |= not (np.array_equal(a.raw.active, sol.raw.active)
                         and np.array_equal(b.raw.active, sol.raw.active))
            fd[:, j] = (a.u_star - b.u_star) / (2 * h)
        if kink or degenerate:
            # the solution map is not differentiable here
            excluded += 1
            continue
        checked += 1
        big = np.maximum(np.abs(J), np.abs(fd)) > 1e-5
        if big.any():
            worst = max(worst, float(np.max(np.abs(J - fd)[big] / np.maximum(np.abs(J), np.abs(fd))[big])))
    elapsed = time.perf_counter() - t0
    record_property("checked", checked)
    record_property("excluded_kinks", excluded)
    record_property("max_rel_err", f"{worst:.2e}")
    record_property("seconds", f"{elapsed:.0f}")
    assert checked >= 40
    assert worst < 1e-3 and elapsed < 300


# ------------------------------------------------------------------ 4

@pytest.mark.criterion(4, "plant steady state and RK4 step doubling")
def test_criterion_4_plant_fidelity(record_property):
    t0 = time.perf_counter()
    res = np.abs(cstr.derivatives(cstr.STATE_SS, cstr.ACTION_SS))
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        x = cstr.unscale_state(rng.uniform(-1, 1, 2))
        u = cstr.unscale_action(rng.uniform(-1, 1, 2))
        coarse = cstr.integrate_step(x, u, substeps=20)
        fine = cstr.integrate_step(x, u, substeps=40)
        worst = max(worst, float(np.max(np.abs(coarse - fine))))
    elapsed = time.perf_counter() - t0
    record_property("ss_residual", f"{res.max():.2e}")
    record_property("step_doubling", f"{worst:.2e}")
    assert np.all(res < 2e-4) and worst < 1e-8 and elapsed < 1.0


# ------------------------------------------------------------------ 5

def _true_flow(n_traj, n_tau, seed):
    """Dense plant trajectories over one hour as PINN rows and targets."""
    rng = np.random.default_rng(seed)
    starts = pinn.lhs_sample(n_traj, [-1] * 4, [1] * 4, rng)
    p = cstr.CstrParams()
    X, Y = [], []
    taus = np.linspace(0.0, 1.0, n_tau)
    for row in starts:
        x0, u = row[:2], row[2:]
        action = cstr.unscale_action(u)
        x = cstr.unscale_state(x0)
        prev = 0.0
        for tau in taus:
            if tau > prev:
                x = cstr.integrate_step(x, action, tau - prev, substeps=4)
            prev = tau
            rate = p.V * x[0] * p.k * np.exp(-p.N / x[1])
            X.append([tau, *x0, *u])
            Y.append([*cstr.scale_state(x), rate])
    return np.array(X), np.array(Y)


@pytest.mark.criterion(5, "PINN residual autodiff vs FD; supervised net satisfies physics")
def test_criterion_5_pinn_residual(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        params = xavier_normal(layer_shapes("", pinn.PINN_SIZES), seed)
        X = pinn.collocation_set(200, seed)
        X[:, 0] = np.clip(X[:, 0], 1e-3, 1 - 1e-3)
        tape = Tape()
        n = {k: tape.const(v) for k, v in params.items()}
        tau = tape.var(X[:, :1])
        out = pinn._net(n, tau, tape.const(X[:, 1:]))
        (d_out,) = input_derivative([out], tau)
        auto = np.hstack([r.value for r in pinn.physics_residual(out, d_out, X)])
        h = 1e-5
        fd_d = (pinn.pinn_forward(params, X[:, 0] + h, X[:, 1:3], X[:, 3:])
                - pinn.pinn_forward(params, X[:, 0] - h, X[:, 1:3], X[:, 3:])) / (2 * h)
        fd = np.hstack(pinn.physics_residual(out.value, fd_d, X))
        worst = max(worst, float(np.max(np.abs(auto - fd))))

    # supervise a fresh network on dense true trajectories, then score physics only
    X, Y = _true_flow(300, 11, 5)
    params = xavier_normal(layer_shapes("", pinn.PINN_SIZES), 0)

    def fun(vec):
        p = params.with_flat(vec)
        t = Tape()
        nodes = t.vars(p)
        out = ad.mlp(t.const(X), layer_nodes(nodes, "", pinn.N_LAYERS))
        loss = ad.mean(ad.square(out - Y))
        grads = backward(loss, list(nodes.values()))
        return float(loss.value), np.concatenate([g.ravel() for g in grads])

    opt, vec = LBFGS(), params.flat()
    for _ in range(3000):
        res = opt.step(vec, fun)
        vec = res.x
        if res.stalled:
            break
    fitted = params.with_flat(vec)
    empty = Split(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)))
    _, _, phys, _ = pinn.pinn_losses(fitted, empty, pinn.collocation_set(2000, 99),
                                     pinn.init_set(10, 0))
    elapsed = time.perf_counter() - t0
    record_property("max_abs_residual_gap", f"{worst:.2e}")
    record_property("supervised_fit_mse", f"{res.loss:.2e}")
    record_property("mse_physics", f"{phys:.2e}")
    record_property("seconds", f"{elapsed:.0f}")
    assert worst < 1e-3
    assert phys < 1e-4 and elapsed < 300


# ------------------------------------------------------------------ 6

@pytest.mark.criterion(6, "Koopman SI and PINN ensemble fit 500 random transitions")
def test_criterion_6_si_convergence(transitions_500, record_property):
    t0 = time.perf_counter()
    train, val = transitions_500.train(), transitions_500.val()
    params, hist = koopman.train_si(koopman.init_koopman(6), train, val, koopman.SiConfig(),
                                    seed=6)
    initial = sum(hist.initial_val)
    final = sum(koopman.si_losses(params, val.x, val.u, val.x_next))
    ens = pinn.make_ensemble(pinn.EnsembleConfig(n_members=3, adam_epochs=300, lbfgs_epochs=100,
                                                 n_colloc=1000, n_init=50), 6)
    pinn.train_ensemble(ens, train, val)
    held = random_transitions(300, 106).train()
    rmse = [float(np.sqrt(np.mean((pinn.predict_step(m, held.x, held.u) - held.x_next) ** 2)))
            for m in ens.members]
    elapsed = time.perf_counter() - t0
    record_property("koopman_val_ratio", f"{final / initial:.2e}")
    record_property("si_epochs", hist.epochs)
    record_property("ensemble_rmse", "/".join(f"{v:.4f}" for v in rmse))
    record_property("seconds", f"{elapsed:.0f}")
    assert final <= 0.1 * initial
    assert max(rmse) < 0.05 and elapsed < 900


# ---------------------------------------------------------------- 7, 9

EXTENDED = DESK_SCHEDULE + [200, 200, 200]     # 400 steps, then on to 1000


@pytest.fixture(scope="module")
def desk_study(tmp_path_factory):
    """Two seeds of the main variant and of SI_Koop at desk scale.

    The main runs continue past 400 steps to 1000; their first eleven
    iterations are exactly a 400-step desk run, evaluated at that point.
    """
    root = tmp_path_factory.mktemp("desk")
    out = {"main": [], "si_koop": [], "theta_1000": [], "seconds": 0.0}
    t0 = time.perf_counter()
    for seed in (0, 1):
        cfg = preset("desk", variant="main", seed=seed, schedule=EXTENDED)
        run = mbpo.run_training(cfg, root / f"main{seed}", stop_after=len(DESK_SCHEDULE))
        assert run.steps == 400
        out["main"].append(bench.evaluate(run.policy, run.prices, 3, 168))
        run = mbpo.run_training(cfg, root / f"main{seed}", run=run)
        assert run.steps == 1000
        out["theta_1000"].append(run.policy.theta.copy())
        si = mbpo.run_training(preset("desk", variant="si_koop", seed=seed), root / f"si{seed}")
        out["si_koop"].append(bench.evaluate(si.policy, si.prices, 3, 168))
    out["seconds"] = time.perf_counter() - t0
    return out


def _agg(metrics):
    return (float(np.mean([m.relative_cost.mean() for m in metrics])),
            float(np.mean([m.violations.mean() for m in metrics])))


@pytest.mark.slow
@pytest.mark.criterion(7, "desk-scale main variant beats SI_Koop (400 steps, 2 seeds)")
def test_criterion_7_desk_end_to_end(desk_study, record_property):
    cost, viol = _agg(desk_study["main"])
    si_cost, si_viol = _agg(desk_study["si_koop"])
    record_property("main_cost", f"{cost:.4f}")
    record_property("main_viol_per_week", f"{viol:.2f}")
    record_property("si_cost", f"{si_cost:.4f}")
    record_property("si_viol_per_week", f"{si_viol:.2f}")
    record_property("per_seed_main", "/".join(f"{m.relative_cost.mean():.4f}:{m.violations.mean():.1f}"
                                              for m in desk_study["main"]))
    record_property("per_seed_si", "/".join(f"{m.relative_cost.mean():.4f}:{m.violations.mean():.1f}"
                                            for m in desk_study["si_koop"]))
    record_property("minutes_incl_extension", f"{desk_study['seconds'] / 60:.0f}")
    assert cost <= 0.97 and viol <= 5
    assert cost < si_cost and viol < si_viol


@pytest.mark.slow
@pytest.mark.criterion(9, "c lower-bound offset tightens after 1000 steps")
def test_criterion_9_bound_adaptation_sign(desk_study, record_property):
    thetas = np.array(desk_study["theta_1000"])
    record_property("theta_c_lb_per_seed", "/".join(f"{t[0]:+.4f}" for t in thetas))
    assert thetas[:, 0].mean() > 0


# ------------------------------------------------------------------ 8

@pytest.mark.slow
@pytest.mark.criterion(8, "full-fidelity reproduction (nightly)")
def test_criterion_8_full_fidelity(tmp_path, record_property):
    if os.environ.get("KMBPO_FULL") != "1":
        pytest.skip("needs many CPU hours; set KMBPO_FULL=1 to run")
    schedule = FULL_SCHEDULE[:17]               # 750 real steps
    costs = {}
    for variant in ("main", "pirl_mlp"):
        costs[variant] = []
        for seed in range(3):
            run = mbpo.run_training(preset("full", variant=variant, seed=seed, schedule=schedule),
                                    tmp_path / f"{variant}{seed}")
            costs[variant].append(float(bench.evaluate(run.policy, run.prices).relative_cost.mean()))
    record_property("main", costs["main"])
    record_property("pirl_mlp", costs["pirl_mlp"])
    assert all(0.90 <= c <= 0.94 for c in costs["main"])
    assert np.mean(costs["main"]) < np.mean(costs["pirl_mlp"])


# ------------------------------------------------------------------ 10

@pytest.mark.slow
@pytest.mark.criterion(10, "2500-step ensemble predicts a week closed-loop better than 20-step")
def test_criterion_10_ensemble_divergence(record_property):
    data = random_transitions(2500, 10)
    cfg = pinn.EnsembleConfig(n_members=3, adam_epochs=300, lbfgs_epochs=100, n_colloc=1000,
                              n_init=50)
    small = Split(data.x[:20], data.u[:20], data.x_next[:20])
    few = pinn.make_ensemble(cfg, 10)
    pinn.train_ensemble(few, small, small)
    many = pinn.make_ensemble(cfg, 10)
    pinn.train_ensemble(many, data.train(), data.val())
    ref = bench.reference_trajectory(168, seed=0)
    mae_few = bench.closed_loop_mae(few, ref)
    mae_many = bench.closed_loop_mae(many, ref)
    record_property("mae_20", "/".join(f"{v:.4f}" for v in mae_few))
    record_property("mae_2500", "/".join(f"{v:.4f}" for v in mae_many))
    assert np.all(mae_many < mae_few)
