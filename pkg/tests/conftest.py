"""Shared fixtures: tiny hand-written cases and random-state helpers."""

import numpy as np
import pytest

from gridflow.grid import load_case, parse_case

TWO_BUS = """\
case two_bus base_mva 100.0
bus
bus 1 slack pmin -5.0 pmax 5.0 qmin -5.0 qmax 5.0 vmin 0.9 vmax 1.1 pload 0.0 qload 0.0 vset 1.0 gsh 0.0 bsh 0.0
bus 2 pq pmin -1.0 pmax 0.0 qmin -0.5 qmax 0.0 vmin 0.9 vmax 1.1 pload 0.5 qload 0.2 vset 1.0 gsh 0.0 bsh 0.0
branch
branch 1 2 r 0.01 x 0.1 smax 2.0
"""

THREE_BUS_SHUNT = """\
case three_bus base_mva 100.0
bus
bus 1 slack pmin -5.0 pmax 5.0 qmin -5.0 qmax 5.0 vmin 0.9 vmax 1.1 pload 0.0 qload 0.0 vset 1.02 gsh 0.0 bsh 0.0
bus 2 pv pmin -1.0 pmax 2.0 qmin -1.0 qmax 1.0 vmin 0.9 vmax 1.1 pload 0.2 qload 0.1 vset 1.01 gsh 0.01 bsh 0.05
bus 3 pq pmin -1.0 pmax 0.0 qmin -0.5 qmax 0.0 vmin 0.9 vmax 1.1 pload 0.8 qload 0.3 vset 1.0 gsh 0.02 bsh -0.03
branch
branch 1 2 r 0.02 x 0.08 smax 1.5
branch 2 3 r 0.01 x 0.05 smax 1.0
branch 1 3 r 0.03 x 0.12 smax 0.8
"""


@pytest.fixture(scope="session")
def two_bus():
    return parse_case(TWO_BUS)


@pytest.fixture(scope="session")
def three_bus():
    return parse_case(THREE_BUS_SHUNT)


@pytest.fixture(scope="session")
def case5():
    return load_case("case5")


def random_state(case, rng, spread=0.3):
    """A generic (infeasible) state near the operating region."""
    b = case.n_bus
    p = rng.normal(0.0, 1.0, b)
    q = rng.normal(0.0, 0.5, b)
    v = rng.uniform(1.0 - spread / 3, 1.0 + spread / 3, b)
    th = rng.uniform(-spread, spread, b)
    return np.concatenate([p, q, v, th])


def central_diff(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)
