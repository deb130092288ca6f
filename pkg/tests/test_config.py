import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopman_mbpo.config import (DESK_SCHEDULE, FULL_SCHEDULE, RunConfig, load_config, preset,
                                 save_config)
from koopman_mbpo.cstr import ConfigurationError
from koopman_mbpo.mbpo import cumulative


def test_full_schedule_thresholds():
    assert FULL_SCHEDULE == [20] * 10 + [50] * 6 + [250] * 8
    cum = cumulative(FULL_SCHEDULE)
    assert cum[9] == 200 and cum[15] == 500 and cum[-1] == 2500
    assert all(b > a for a, b in zip(cum, cum[1:]))
    assert RunConfig().total_steps == 2500


def test_desk_preset_is_scaled_down():
    cfg = preset("desk")
    assert cfg.schedule == DESK_SCHEDULE and cfg.total_steps == 400
    assert cfg.ensemble.n_members == 3


def test_defaults_carry_paper_hyperparameters():
    cfg = RunConfig()
    assert cfg.sigma_max == 0.1 and cfg.log_sigma == pytest.approx(np.log(0.05))
    assert cfg.ensemble.n_members == 10 and cfg.ensemble.reset_prob == pytest.approx(1 / 3)
    assert (cfg.ppo.clip, cfg.ppo.gamma, cfg.ppo.gae_lambda) == (0.2, 0.99, 0.95)
    assert (cfg.ppo.rollout_len, cfg.ppo.ratio_threshold) == (8, 0.7)
    assert cfg.koopman.lr == 1e-4 and cfg.eval.windows == 10 and cfg.eval.steps == 168


def test_toml_and_json_load(tmp_path):
    (tmp_path / "a.toml").write_text('preset = "smoke"\nseed = 4\n[ppo]\nclip = 0.1\n')
    cfg = load_config(tmp_path / "a.toml")
    assert cfg.seed == 4 and cfg.ppo.clip == 0.1 and cfg.schedule == [20, 20]
    save_config(tmp_path / "b.json", cfg)
    assert load_config(tmp_path / "b.json") == cfg


@pytest.mark.parametrize("text", ["bogus = 1\n", "[ppo]\nbogus = 1\n", 'variant = "nope"\n',
                                  "schedule = []\n", 'preset = "huge"\n', "seed = [\n"])
def test_bad_configs_are_rejected(tmp_path, text):
    (tmp_path / "c.toml").write_text(text)
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "c.toml")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "absent.toml")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), schedule=st.lists(st.integers(1, 300), min_size=1, max_size=8),
       variant=st.sampled_from(["main", "rl_bounds", "si_koop", "pirl_mlp", "rl_mlp"]))
def test_config_round_trips_through_json(seed, schedule, variant):
    cfg = RunConfig(variant=variant, seed=seed, schedule=schedule)
    back = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg and back.total_steps == sum(schedule)
