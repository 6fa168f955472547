import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from crossbuild import tensor as T
from crossbuild.data import WindowBatch
from crossbuild.model import TFTConfig

settings.register_profile(
    "crossbuild", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("crossbuild")

REL_TOL = 1e-4
ABS_FLOOR = 1e-7


def numeric_grad(fn, tensor, h=1e-5):
    """Central differences of the scalar ``fn()`` with respect to ``tensor``."""
    grad = np.zeros_like(tensor.data)
    base = tensor.data
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        plus[idx] += h
        tensor.data = plus
        f_plus = float(fn().data)
        minus = base.copy()
        minus[idx] -= h
        tensor.data = minus
        f_minus = float(fn().data)
        grad[idx] = (f_plus - f_minus) / (2 * h)
    tensor.data = base
    return grad


def assert_grads_match(fn, tensors, h=1e-5):
    """Compare tape gradients of ``fn()`` against central differences."""
    for t in tensors:
        t.grad = None
    with T.Tape() as tape:
        loss = fn()
    tape.backward(loss)
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        with T.no_tape():
            numeric = numeric_grad(fn, t, h)
        diff = np.abs(analytic - numeric)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        bad = (diff > ABS_FLOOR) & (diff > REL_TOL * scale)
        assert not bad.any(), (
            f"{t.name}: max rel err {np.max(diff / np.maximum(scale, ABS_FLOOR)):.3g}"
        )


def param(rng, *shape, name=None, scale=0.5):
    return T.Tensor(rng.normal(0.0, scale, shape), requires_grad=True, name=name)


def tiny_config(**overrides):
    base = dict(
        hidden_size=8,
        attention_heads=2,
        dropout_rate=0.1,
        lookback=12,
        horizon=4,
        n_unknown_channels=3,
        n_known_channels=2,
        n_static=2,
    )
    base.update(overrides)
    return TFTConfig(**base)


def random_batch(config, n=5, seed=0):
    rng = np.random.default_rng(seed)
    L, H = config.lookback, config.horizon
    static = np.zeros((n, config.n_static))
    static[:, 0] = 1.0
    return WindowBatch(
        rng.random((n, L, config.n_unknown_channels)),
        rng.random((n, L, config.n_known_channels)),
        rng.random((n, H, config.n_known_channels)),
        static,
        rng.random((n, H)),
        np.ones((n, H), dtype=bool),
        np.arange(n),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ---------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n, title = marker.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"[{'PASS' if e['ok'] else 'FAIL'}] {n:2d}. {e['title']}" + (f" ({detail})" if detail else ""))
