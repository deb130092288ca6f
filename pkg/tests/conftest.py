import numpy as np
import pytest

from koopman_mbpo import cstr
from koopman_mbpo.data import TransitionDataset
from koopman_mbpo.prices import synthetic_prices


def random_transitions(n, seed, val_every=4):
    """Uniform-random scaled actions on the real plant; every ``val_every``-th
    episode goes to validation."""
    rng = np.random.default_rng(seed)
    env = cstr.CstrEnv(synthetic_prices().partition("train"), rng=seed)
    env.reset()
    ds, ep = TransitionDataset(), 0
    while len(ds) < n:
        u = rng.uniform(-1, 1, 2)
        x = cstr.scale_state(env.state.x)
        _, _, term, trunc = env.step(cstr.unscale_action(u))
        ds.append(x, u, cstr.scale_state(env.state.x), ep, 1, ep % val_every == 1)
        if term or trunc:
            ep += 1
            env.reset()
    return ds


@pytest.fixture(scope="session")
def transitions_500():
    return random_transitions(500, 0)


@pytest.fixture(scope="session")
def trained_koopman(transitions_500):
    from koopman_mbpo import koopman

    params, _ = koopman.train_si(koopman.init_koopman(0), transitions_500.train(),
                                 transitions_500.val(), koopman.SiConfig(max_epochs=800), seed=0)
    return params


# ---------------------------------------------------------------- acceptance

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if report.skipped:
            status = "SKIPPED"
            detail = str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else detail
        else:
            status = "PASS" if report.passed else "FAIL"
        _CRITERIA[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2} {status:<7} {title}"
                                    + (f" | {detail}" if detail else ""))
