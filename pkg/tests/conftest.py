import numpy as np
import pytest

from gdnstream import attention, hybrid, numerics


@pytest.fixture
def rng():
    return numerics.make_rng(1234)


def random_layer(seed, d=8, heads=2, granularity="headwise", scale=1.0):
    """Hybrid layer with every trainable part randomised."""
    r = numerics.make_rng(seed)
    proj = attention.ProjectionSet.random(d, heads, r, scale=scale)
    return hybrid.make_layer(proj, granularity, r)


def unit_keys(rng, L, H, D):
    k = rng.standard_normal((L, H, D))
    return k / np.linalg.norm(k, axis=-1, keepdims=True)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[num])
