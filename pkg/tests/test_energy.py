import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize

from helpers import KINDS, norm, random_energy
from mmspec.energy import (
    Constraint,
    as_quadratic,
    default_lq,
    default_quadratic,
    descending_slope,
    energy_from_dict,
    energy_to_dict,
    eval_energy,
    laplacian,
    lq_energy,
    n_components,
    quadratic_energy,
)
from mmspec.errors import OutsideDomain, SpaceMismatch, ValidationError
from mmspec.space import L2Function, make_cycle, make_path, make_space


@pytest.fixture
def two_point():
    X = make_space("ab", [0.0, 1.0], "ambient", [0.5, 0.5])
    return quadratic_energy(X, [(0, 1, 1.0)])


def three_path_inf():
    X = make_space("abc", [0.0, 1.0, 2.0], "ambient", [1 / 3, 1 / 3, 1 / 3])
    pairs = [(0, 1, 1.0), (1, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0)]
    return lq_energy(X, math.inf, pairs)


def test_two_point_energy(two_point):
    assert eval_energy(two_point, [1, -1]) == 4.0
    assert eval_energy(two_point, [2, -2]) == 16.0
    assert eval_energy(two_point, [3, 3]) == 0.0


def test_two_point_laplacian(two_point):
    assert np.allclose(laplacian(two_point, [1, -1]).values, [4, -4], atol=1e-14)
    assert np.allclose(laplacian(two_point, [2, 2]).values, 0, atol=1e-14)


def test_two_point_slope(two_point):
    assert descending_slope(two_point, [1, -1]) == pytest.approx(4.0, abs=1e-12)
    assert descending_slope(two_point, [0.3, 0.3]) == pytest.approx(0.0, abs=1e-14)


def test_inf_path_distinct_differences():
    # hand computation: unique maximizers give xi = (-1, -3, 4)
    E = three_path_inf()
    u = np.array([0.0, 1.0, 3.0])
    xi = laplacian(E, u).values
    assert np.allclose(xi, [-1, -3, 4], atol=1e-10)
    assert E.space.measure @ (xi * u) == pytest.approx(eval_energy(E, u), abs=1e-10)


def test_inf_path_tie_matches_projection_oracle():
    # a tie at the middle point: the subdifferential is a segment
    E = three_path_inf()
    u = np.array([0.0, 1.0, 2.0])
    m = E.space.measure
    a, b, c = np.eye(3)

    def g(lam):
        return ((b - a) + (c - b) + lam * (b - a) + (1 - lam) * (c - b)) / 3

    res = minimize(lambda t: g(t[0]) @ (g(t[0]) / m), [0.2], bounds=[(0, 1)], method="L-BFGS-B", tol=1e-14)
    oracle = g(res.x[0]) / m
    assert np.allclose(oracle, [-1.5, 0, 1.5], atol=1e-6)
    xi = laplacian(E, u).values
    assert np.allclose(xi, [-1.5, 0, 1.5], atol=1e-10)
    assert m @ (xi * u) == pytest.approx(eval_energy(E, u), abs=1e-10)


def test_space_mismatch(two_point):
    other = make_cycle(2)
    with pytest.raises(SpaceMismatch):
        eval_energy(two_point, L2Function(other, [1, 0]))


@pytest.mark.parametrize("n", [3, 4, 8, 16])
def test_cycle_spectrum_closed_form(n):
    E = default_quadratic(make_cycle(n))
    lam = np.sort(E.eigh()[0])
    j = np.arange(n)
    expect = np.sort(2 * n * n * (1 - np.cos(2 * np.pi * j / n)))
    assert np.allclose(lam, expect, rtol=1e-12, atol=1e-9)


def test_c4_spectrum():
    lam = np.sort(default_quadratic(make_cycle(4)).eigh()[0])
    assert np.allclose(lam, [0, 32, 32, 64], atol=1e-10)


def test_default_lq_q2_is_default_quadratic(rng):
    C = make_cycle(9)
    Q, L = default_quadratic(C), default_lq(C, 2.0)
    U = rng.standard_normal((9, 20))
    assert np.allclose(Q.energy(U), L.energy(U), rtol=1e-12)


def test_energy_json_roundtrip(rng):
    for E in (default_quadratic(make_cycle(5)), default_lq(make_path(4), math.inf), default_lq(make_path(4), 1.5)):
        R = energy_from_dict(E.space, energy_to_dict(E))
        U = rng.standard_normal((E.space.n, 5))
        assert np.allclose(R.energy(U), E.energy(U), rtol=1e-14)


def test_energy_json_undirected_lq():
    X = make_path(3)
    E = energy_from_dict(X, {"kind": "lq", "q": "inf", "edges": [[X.ids[0], X.ids[1], 1.0], [X.ids[1], X.ids[2], 1.0]]})
    assert len(E.w) == 4


@pytest.mark.parametrize(
    "data",
    [{"kind": "quadratic"}, {"kind": "cubic", "edges": []}, {"kind": "quadratic", "edges": [["zz", "p0", 1]]}],
)
def test_energy_json_errors(data):
    with pytest.raises(ValidationError):
        energy_from_dict(make_path(3), data)


def test_components():
    X = make_path(4)
    E = quadratic_energy(X, [(0, 1, 1.0), (2, 3, 1.0)])
    assert n_components(E) == 2
    assert n_components(default_quadratic(X)) == 1


def test_as_quadratic(rng):
    E = default_lq(make_cycle(6), 2.0)
    U = rng.standard_normal((6, 4))
    assert np.allclose(as_quadratic(E).energy(U), E.energy(U), rtol=1e-12)


def test_constrained_slope_outside_domain(two_point):
    with pytest.raises(OutsideDomain):
        descending_slope(two_point, [2, -2], Constraint(1.0, 6.0, ball=1.0, cap=5.0))


# -- properties over random energies -------------------------------------------

CASES = st.tuples(st.integers(0, 2**31 - 1), st.integers(3, 12), st.sampled_from(KINDS))


def _setup(case):
    seed, n, kind = case
    rng = np.random.default_rng(seed)
    return rng, random_energy(rng, n, kind)


@given(CASES, st.floats(-5, 5))
def test_even_homogeneous(case, alpha):
    rng, E = _setup(case)
    u = rng.standard_normal(E.space.n)
    ch = eval_energy(E, u)
    assert eval_energy(E, -u) == pytest.approx(ch, rel=1e-12, abs=1e-14)
    assert eval_energy(E, alpha * u) == pytest.approx(alpha**2 * ch, rel=1e-10, abs=1e-12)
    assert eval_energy(E, u + 3.7) == pytest.approx(ch, rel=1e-9, abs=1e-12)
    assert eval_energy(E, np.full(E.space.n, 2.5)) == 0.0


@given(CASES)
def test_convex(case):
    rng, E = _setup(case)
    u, v = rng.standard_normal((2, E.space.n))
    assert eval_energy(E, 0.5 * (u + v)) <= 0.5 * (eval_energy(E, u) + eval_energy(E, v)) + 1e-12


@given(CASES)
def test_euler_identity(case):
    rng, E = _setup(case)
    u = rng.standard_normal(E.space.n)
    xi = laplacian(E, u).values
    ch = eval_energy(E, u)
    assert abs(E.space.measure @ (xi * u) - ch) <= 1e-9 * (1 + ch)


@given(CASES)
def test_subgradient_inequality(case):
    rng, E = _setup(case)
    u = rng.standard_normal(E.space.n)
    xi = laplacian(E, u).values
    m = E.space.measure
    for v in rng.standard_normal((10, E.space.n)):
        assert 0.5 * eval_energy(E, v) >= 0.5 * eval_energy(E, u) + m @ (xi * (v - u)) - 1e-9


@given(CASES)
def test_euler_identity_at_ties(case):
    # integer data produce many equal differences, the nonsmooth case
    rng, E = _setup(case)
    u = rng.integers(-2, 3, E.space.n).astype(float)
    xi = laplacian(E, u).values
    ch = eval_energy(E, u)
    assert abs(E.space.measure @ (xi * u) - ch) <= 1e-9 * (1 + ch)


@given(st.integers(0, 2**31 - 1), st.integers(3, 12))
def test_q2_matches_quadratic(seed, n):
    rng = np.random.default_rng(seed)
    E = random_energy(rng, n, 2.0)
    Q = as_quadratic(E)
    u = rng.standard_normal(n)
    assert eval_energy(Q, u) == pytest.approx(eval_energy(E, u), rel=1e-12, abs=1e-14)
    assert np.allclose(laplacian(Q, u).values, laplacian(E, u).values, rtol=1e-9, atol=1e-9)


@given(CASES)
def test_zero_energy_means_constant(case):
    rng, E = _setup(case)
    u = np.full(E.space.n, 1.3)
    u[rng.integers(E.space.n)] += 1e-3
    assert eval_energy(E, u) > 0
    c = np.full(E.space.n, -0.7)
    assert eval_energy(E, c) == 0
    assert np.ptp(c) <= 1e-9 * norm(E, c)


@pytest.mark.parametrize("kind", KINDS)
def test_slope_supremum_form(kind):
    rng = np.random.default_rng(7)
    E = random_energy(rng, 6, kind)
    u = rng.standard_normal(6)
    s = descending_slope(E, u)
    half = 0.5 * eval_energy(E, u)
    W = u[:, None] + rng.standard_normal((6, 10_000)) * rng.uniform(1e-4, 1.0, 10_000)
    ratios = np.maximum(half - 0.5 * E.energy(W), 0) / np.sqrt(E.space.measure @ (W - u[:, None]) ** 2)
    assert ratios.max() <= s + 1e-6
    xi = laplacian(E, u).values
    step = 1e-7
    along = (half - 0.5 * eval_energy(E, u - step * xi)) / (step * norm(E, xi))
    assert along == pytest.approx(s, rel=1e-4)
