import numpy as np
import pytest

from patchmix.config import load_config
from patchmix.core import Rng
from patchmix.datasets import ScmConfig, generate_scm


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def tiny_cfg(tmp_path):
    """A run small enough for a few seconds of training."""
    cfg = load_config(None, [
        "epochs=2", "epochs_stage2=1", "episodes_per_epoch=3", "queries=4",
        "eval_episodes=20", "eval_queries=4", "n_train=300", "n_test=150",
        "iv_per_class=20", "iv_repeats=3", "hidden=16", "feat_dim=8",
        "scm=grid=4,image_size=16", "grid=4", f"out_dir={tmp_path / 'run'}",
    ])
    return cfg.validate()


@pytest.fixture(scope="session")
def small_scm():
    cfg = ScmConfig(grid=4, image_size=16)
    return generate_scm(cfg, 400, 200, Rng(5))


def assert_close(a, b, tol):
    assert np.max(np.abs(np.asarray(a, float) - np.asarray(b, float))) < tol


# acceptance verdicts, one line per criterion, printed after the run
VERDICTS: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


@pytest.fixture
def criterion(request):
    """Detail dict for one acceptance criterion; the verdict follows the test outcome."""
    number = request.node.get_closest_marker("criterion").args[0]
    detail = {}
    yield detail
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    text = ", ".join(f"{k}={v}" for k, v in detail.items())
    VERDICTS[number] = ("PASS" if ok else "FAIL", text)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        verdict, text = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {verdict}  {text}")
