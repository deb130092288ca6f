import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koopman_mbpo import ocp, pinn, ppo
from koopman_mbpo.cstr import ConfigurationError, STATE_SS, scale_state
from koopman_mbpo.diffcore import clip_grad_norm
from koopman_mbpo.prices import synthetic_prices

PRICES = synthetic_prices().partition("train")
FEATURES = ppo.Features.from_prices(PRICES)
X_SS = scale_state(STATE_SS)


@pytest.fixture
def still_plant(monkeypatch):
    """Members that keep the state where it is."""
    monkeypatch.setattr(pinn, "predict_step", lambda m, x, u: np.array(x, dtype=float))


def _ensemble(n, kind="vanilla"):
    return pinn.make_ensemble(pinn.EnsembleConfig(n_members=n, kind=kind, n_colloc=5, n_init=5), 0)


# ------------------------------------------------------------ surrogate env

def test_reset_from_single_state_pool(still_plant):
    env = ppo.SurrogateEnv(_ensemble(1), [[0.2, -0.3]], PRICES, rng=0)
    for s in range(20):
        obs = env.reset(seed=s)
        assert np.array_equal(obs.x, [0.2, -0.3])
        assert obs.prices.shape == (10,)
        assert 1.0 <= obs.l <= 2.0


def test_reset_frequency_over_two_states():
    env = ppo.SurrogateEnv(_ensemble(1), [[0.0, 0.0], [0.5, 0.5]], PRICES, rng=1)
    hits = sum(env.reset().x[0] == 0.0 for _ in range(10000))
    assert abs(hits / 10000 - 0.5) <= 0.03


def test_empty_pool_is_a_configuration_error():
    env = ppo.SurrogateEnv(_ensemble(1), np.zeros((0, 2)), PRICES, rng=0)
    with pytest.raises(ConfigurationError):
        env.reset()


def test_truncation_after_eight_steps(still_plant):
    env = ppo.SurrogateEnv(_ensemble(2), [X_SS], PRICES, rng=0)
    env.reset()
    flags = [env.step([0.0, 0.0])[2:] for _ in range(8)]
    assert all(f == (False, False) for f in flags[:-1])
    assert flags[-1] == (False, True)


def test_outsized_prediction_terminates(monkeypatch):
    monkeypatch.setattr(pinn, "predict_step", lambda m, x, u: np.array([3.5, 0.0]))
    env = ppo.SurrogateEnv(_ensemble(1), [X_SS], PRICES, rng=0)
    env.reset()
    _, r, term, trunc = env.step([0.0, 0.0])
    assert term and not trunc and r < 0


def test_single_member_is_deterministic():
    ens = _ensemble(1)
    runs = []
    for _ in range(2):
        env = ppo.SurrogateEnv(ens, [X_SS], PRICES, rng=4)
        env.reset(seed=3)
        runs.append([env.step([0.3, -0.2])[0].x for _ in range(3)])
    assert np.array_equal(runs[0], runs[1])


def test_member_selection_is_uniform(still_plant):
    env = ppo.SurrogateEnv(_ensemble(10), [X_SS], PRICES, rng=0)
    counts = np.zeros(10)
    env.reset()
    for _ in range(100_000):
        _, _, term, trunc = env.step([0.0, 0.0])
        counts[env.last_member] += 1
        if term or trunc:
            env.reset()
    assert np.all(np.abs(counts / 100_000 - 0.1) <= 0.02)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rollouts_never_exceed_eight_steps(seed):
    ens = _ensemble(2)
    env = ppo.SurrogateEnv(ens, [X_SS, [0.5, -0.5]], PRICES, rng=seed)
    pol = ppo.MlpPolicy(FEATURES, seed=seed % 7, log_sigma=np.log(0.5))
    buf = ppo.collect_rollouts(env, pol, ppo.init_critic(0), FEATURES, 60, np.random.default_rng(seed))
    length = 0
    for end in buf.end:
        length += 1
        assert length <= 8
        if end:
            length = 0


# ------------------------------------------------------------------- GAE

def test_gae_single_transition():
    adv, ret = ppo.compute_gae([2.5], [0.0], [0.0], [True], [True], gamma=1.0, lam=1.0)
    assert adv[0] == 2.5 and ret[0] == 2.5


def test_gae_two_step_hand_unrolled():
    r, v = [1.0, 2.0], [0.5, 0.3]
    adv, ret = ppo.compute_gae(r, v, [0.3, 0.0], [False, True], [False, True], 0.99, 0.95)
    d1 = 1.0 + 0.99 * 0.3 - 0.5
    d0 = 2.0 - 0.3
    assert adv[1] == pytest.approx(d0, abs=1e-12)
    assert adv[0] == pytest.approx(d1 + 0.99 * 0.95 * d0, abs=1e-12)
    assert ret == pytest.approx(adv + np.array(v), abs=1e-12)


def test_truncated_step_bootstraps():
    adv, _ = ppo.compute_gae([1.0], [0.5], [2.0], [False], [True], gamma=0.99, lam=0.95)
    assert adv[0] == pytest.approx(1.0 + 0.99 * 2.0 - 0.5)
    adv, _ = ppo.compute_gae([1.0], [0.5], [2.0], [True], [True], gamma=0.99, lam=0.95)
    assert adv[0] == pytest.approx(0.5)


def test_gae_respects_episode_boundaries():
    adv, _ = ppo.compute_gae([1.0, 1.0], [0.0, 0.0], [0.0, 0.0], [True, True], [True, True])
    assert np.array_equal(adv, [1.0, 1.0])


def test_gae_optional_normalization():
    rng = np.random.default_rng(0)
    n = 50
    adv, _ = ppo.compute_gae(rng.normal(size=n), rng.normal(size=n), rng.normal(size=n),
                             np.zeros(n, bool), rng.random(n) < 0.2, normalize=True)
    assert abs(adv.mean()) < 1e-12 and adv.std() == pytest.approx(1.0, abs=1e-6)


# ---------------------------------------------------------------- update

def test_clipped_branch_has_zero_ratio_gradient():
    _, d = ppo.clipped_surrogate(1.5, 1.0, 0.2)
    assert d == 0.0
    _, d = ppo.clipped_surrogate(1.1, 1.0, 0.2)
    assert d == 1.0
    obj, d = ppo.clipped_surrogate(0.5, -2.0, 0.2)
    assert obj == pytest.approx(-1.6) and d == 0.0
    _, d = ppo.clipped_surrogate(0.5, 2.0, 0.2)
    assert d == 2.0


def test_gradient_norm_clipping():
    grads, norm = clip_grad_norm([np.array([3.0]), np.array([4.0])], 0.5)
    assert norm == pytest.approx(5.0)
    assert np.sqrt(sum(float(g @ g) for g in grads)) == pytest.approx(0.5)


def _buffer(pol, n=32, seed=0, zero_advantage=False):
    env = ppo.SurrogateEnv(_ensemble(2), [X_SS, [0.3, 0.1]], PRICES, rng=seed)
    buf = ppo.collect_rollouts(env, pol, ppo.init_critic(1), FEATURES, n, np.random.default_rng(seed))
    if zero_advantage:
        buf.terminated[:] = True
        buf.end[:] = True
        buf.value = buf.reward.copy()
    return buf


@pytest.mark.parametrize("kind", ["mlp", "koopman"])
def test_zero_advantages_leave_policy_unchanged(kind, trained_koopman):
    pol = ppo.MlpPolicy(FEATURES, 0) if kind == "mlp" else ocp.KoopmanPolicy(trained_koopman)
    buf = _buffer(pol, zero_advantage=True)
    before = pol.params.digest()
    state = ppo.PpoState.fresh(0, FEATURES)
    critic_before = state.critic.digest()
    ppo.ppo_update(pol, state, buf, ppo.PpoConfig(batch_size=8, n_epochs=2), np.random.default_rng(0))
    assert pol.params.digest() == before
    assert state.critic.digest() != critic_before


def test_update_never_touches_models(trained_koopman):
    ens = _ensemble(2)
    kdig, edig = trained_koopman.digest(), ens.digest()
    pol = ocp.KoopmanPolicy(trained_koopman)
    env = ppo.SurrogateEnv(ens, [X_SS], PRICES, rng=0)
    state = ppo.PpoState.fresh(0, FEATURES)
    rng = np.random.default_rng(0)
    buf = ppo.collect_rollouts(env, pol, state.critic, FEATURES, 48, rng)
    before = pol.params.digest()
    stats = ppo.ppo_update(pol, state, buf, ppo.PpoConfig(batch_size=16, n_epochs=2), rng)
    assert pol.params.digest() != before
    assert trained_koopman.digest() == kdig and ens.digest() == edig
    assert stats["skipped"] == 0 and np.isfinite(stats["policy_loss"])


def test_non_finite_loss_skips_update():
    pol = ppo.MlpPolicy(FEATURES, 0)
    buf = _buffer(pol)
    buf.reward[3] = np.nan
    before = pol.params.digest()
    state = ppo.PpoState.fresh(0, FEATURES)
    stats = ppo.ppo_update(pol, state, buf, ppo.PpoConfig(batch_size=32, n_epochs=1),
                           np.random.default_rng(0))
    assert stats["skipped"] == 1 and pol.params.digest() == before


def test_mlp_log_prob_gradient_matches_finite_differences():
    pol = ppo.MlpPolicy(FEATURES, 3, log_sigma=np.log(0.3))
    pol.params["head_W2"] *= 50.0
    buf = _buffer(pol, n=12)
    idx = np.arange(12)
    g = np.random.default_rng(1).normal(size=12)
    _, vjp = ppo.batch_log_prob(pol, buf, idx)
    grads = dict(zip(pol.params, vjp(g)))
    rng = np.random.default_rng(2)
    for name in ("head_W2", "x_W0", "h_b1", "log_sigma"):
        p = pol.params[name]
        for _ in range(3):
            j = tuple(rng.integers(s) for s in p.shape)
            old = p[j]
            p[j] = old + 1e-6
            up = float(g @ ppo.batch_log_prob(pol, buf, idx)[0])
            p[j] = old - 1e-6
            down = float(g @ ppo.batch_log_prob(pol, buf, idx)[0])
            p[j] = old
            assert grads[name][j] == pytest.approx((up - down) / 2e-6, rel=1e-5, abs=1e-7)


def test_koopman_log_prob_gradient_matches_finite_differences(trained_koopman):
    pol = ocp.KoopmanPolicy(trained_koopman, log_sigma=np.log(0.2))
    buf = _buffer(pol, n=24, seed=3)
    idx = np.arange(24)
    g = np.random.default_rng(1).normal(size=24)
    logp, vjp = ppo.batch_log_prob(pol, buf, idx)
    assert logp == pytest.approx(buf.logp, abs=1e-9)
    d_theta, d_ls = vjp(g)
    h = 1e-6
    for j in range(6):
        pol.params["theta_B"][j] += h
        up = float(g @ ppo.batch_log_prob(pol, buf, idx)[0])
        pol.params["theta_B"][j] -= 2 * h
        down = float(g @ ppo.batch_log_prob(pol, buf, idx)[0])
        pol.params["theta_B"][j] += h
        assert d_theta[j] == pytest.approx((up - down) / (2 * h), rel=1e-3, abs=1e-5)
    pol.params["log_sigma"][0] += h
    up = float(g @ ppo.batch_log_prob(pol, buf, idx)[0])
    pol.params["log_sigma"][0] -= h
    assert d_ls[0] == pytest.approx((up - float(g @ logp)) / h, rel=1e-4)


# ---------------------------------------------------------------- critic

def test_critic_horizon_shuffle():
    rng = np.random.default_rng(0)
    critic = ppo.init_critic(0)
    p = rng.uniform(10, 80, 10)
    q = p.copy()
    q[[2, 7]] = q[[7, 2]]
    fp, fq = FEATURES(X_SS, 2.0, p), FEATURES(X_SS, 2.0, q)
    assert np.array_equal(fp[2], fq[2])
    branch = lambda f: np.tanh(np.tanh(f @ critic["h_W0"] + critic["h_b0"]) @ critic["h_W1"] + critic["h_b1"])
    assert not np.allclose(branch(fp[3]), branch(fq[3]))
    assert ppo.critic_value(critic, fp).shape == (1,)


def test_critic_and_policy_shapes():
    shapes = ppo.trunk_shapes(1)
    assert shapes["x_W0"] == (2, 24) and shapes["l_W1"] == (8, 8)
    assert shapes["p_W0"] == (2, 8) and shapes["h_W1"] == (24, 24)
    assert shapes["head_W0"] == (64, 64) and shapes["head_W2"] == (64, 1)
    pol = ppo.MlpPolicy(FEATURES)
    assert pol.params["head_W2"].shape == (64, 2)
    out = pol.act(X_SS, 2.0, PRICES[:10], rng=0, sigma=0.0)
    assert np.array_equal(out.u, np.clip(out.u_star, -1, 1))


# --------------------------------------------------------- stopping rule

def test_improvement_ratio_boundary():
    tr = ppo.ImprovementTracker(10, window=25)
    ratio, stop = tr.update(5, np.zeros(10))
    assert ratio == 1.0 and not stop
    ratio, stop = tr.update(30, np.r_[np.ones(7), np.zeros(3)])
    assert ratio == 0.7 and not stop
    tr = ppo.ImprovementTracker(10, window=25)
    tr.update(5, np.zeros(10))
    ratio, stop = tr.update(30, np.r_[np.ones(6), np.zeros(4)])
    assert ratio == 0.6 and stop


def test_run_ppo_stops_by_rule(monkeypatch):
    monkeypatch.setattr(ppo, "validation_scores", lambda *a: np.zeros(10))
    cfg = ppo.PpoConfig(n_steps=8, batch_size=8, n_epochs=1, max_iterations=100)
    pol = ppo.MlpPolicy(FEATURES)
    res = ppo.run_ppo(pol, ppo.PpoState.fresh(0, FEATURES), _ensemble(1), [X_SS], PRICES, cfg,
                      np.random.default_rng(0))
    assert res.terminated_by_rule and res.iterations == 30
    assert [h.get("improvement_ratio") for h in res.history if "improvement_ratio" in h] == \
        [1.0, 1.0, 1.0, 1.0, 1.0, 0.0]


def test_run_ppo_respects_cap():
    cfg = ppo.PpoConfig(n_steps=8, batch_size=8, n_epochs=1, max_iterations=3, n_val_envs=2,
                        val_episodes=1)
    res = ppo.run_ppo(ppo.MlpPolicy(FEATURES), ppo.PpoState.fresh(0, FEATURES), _ensemble(1),
                      [X_SS], PRICES, cfg, np.random.default_rng(0))
    assert res.iterations == 3 and not res.terminated_by_rule


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigurationError):
        ppo.PpoConfig.from_dict({"n_step": 3})
