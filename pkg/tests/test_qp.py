import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reservex.errors import SolverFailure
from reservex.qp import project


def enumerate_projection(c, A, b, G, h):
    """Exact projection by trying every active set (fine for a handful of rows)."""
    best, arg = np.inf, None
    m = G.shape[0]
    for k in range(m + 1):
        for act in itertools.combinations(range(m), k):
            E = np.vstack([A] + [G[list(act)]]) if act else A
            f = np.concatenate([b, h[list(act)]]) if act else b
            # min ||x - c||^2 s.t. E x = f  ->  x = c - E^T (E E^T)^+ (E c - f)
            x = c - E.T @ np.linalg.pinv(E @ E.T) @ (E @ c - f)
            if np.max(np.abs(E @ x - f)) > 1e-8 or np.min(G @ x - h) < -1e-8:
                continue
            d = float(np.sum((x - c) ** 2))
            if d < best - 1e-12:
                best, arg = d, x
    return arg


def simplex_case(n, total, lows, c):
    A = np.ones((1, n))
    b = np.array([total])
    G = np.eye(n)
    h = np.array(lows, float)
    return np.asarray(c, float), A, b, G, h


def test_projection_onto_simplex_known():
    c, A, b, G, h = simplex_case(3, 1.0, [0, 0, 0], [0.8, 0.6, -0.5])
    x = project(c, A, b, G, h, [1 / 3] * 3)
    assert x == pytest.approx([0.6, 0.4, 0.0], abs=1e-10)


def test_interior_target_returned_unchanged():
    c, A, b, G, h = simplex_case(3, 1.0, [0, 0, 0], [0.2, 0.3, 0.5])
    assert project(c, A, b, G, h, [1 / 3] * 3) == pytest.approx(c)


def test_two_area_closed_form():
    # efficiency line b1 + b2 = v: the projection shifts both by half the gap
    v, c = 10.0, np.array([7.0, 1.0])
    x = project(c, np.ones((1, 2)), [v], np.zeros((0, 2)), [], [5.0, 5.0])
    gap = (v - c.sum()) / 2
    assert x == pytest.approx(c + gap)


def test_infeasible_start_rejected():
    c, A, b, G, h = simplex_case(2, 1.0, [0, 0], [0.5, 0.5])
    with pytest.raises(SolverFailure):
        project(c, A, b, G, h, [2.0, -1.0])


@st.composite
def polytopes(draw):
    n = draw(st.integers(2, 4))
    m = draw(st.integers(1, 5))
    rng = np.random.default_rng(draw(st.integers(0, 2**31)))
    x0 = rng.uniform(0, 2, n)
    G = rng.integers(0, 2, size=(m, n)).astype(float)
    G = np.vstack([G, np.eye(n)])
    slack = rng.uniform(0, 1, m + n) * rng.integers(0, 2, m + n)
    h = G @ x0 - slack
    A = np.ones((1, n))
    b = A @ x0
    c = rng.uniform(-3, 5, n)
    return c, A, b, G, h, x0


@settings(max_examples=150, deadline=None)
@given(polytopes())
def test_matches_enumeration(case):
    c, A, b, G, h, x0 = case
    x = project(c, A, b, G, h, x0)
    ref = enumerate_projection(c, A, b, G, h)
    assert np.max(np.abs(A @ x - b)) <= 1e-8
    assert np.min(G @ x - h) >= -1e-8
    assert np.sum((x - c) ** 2) == pytest.approx(np.sum((ref - c) ** 2), rel=1e-7, abs=1e-8)
    # strictly convex objective: the minimizer itself is unique
    assert x == pytest.approx(ref, abs=1e-5)
