import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from helpers import random_space
from mmspec.errors import DimensionMismatch, EmptySet, SpaceMismatch
from mmspec.space import L2Function, make_cycle, make_space, pad_coords
from mmspec.transport import (
    Isometry,
    apply_isometry,
    check_l2_convergence,
    cost_matrix,
    hausdorff_distance,
    make_panel,
    plan_to_map,
    solve_ot,
    transport_pair,
)


@pytest.fixture
def three_two():
    A = make_space("abc", [0.0, 0.5, 1.0], "ambient", [1 / 3, 1 / 3, 1 / 3])
    B = make_space("xy", [0.0, 1.0], "ambient", [0.5, 0.5])
    return A, B


def inner(S, f, g):
    return float(S.measure @ (f * g))


# -- optimal plans ------------------------------------------------------------


def test_identity_plan():
    X = make_cycle(6)
    p = solve_ot(X, X)
    np.testing.assert_allclose(p.plan, np.diag(X.measure), atol=1e-12)
    assert p.cost == pytest.approx(0.0, abs=1e-14)


def test_offset_pair_cost():
    A = make_space("ab", [[0.0, 0.0], [1.0, 0.0]], "ambient", [0.5, 0.5])
    B = make_space("ab", [[0.0, 0.1], [1.0, 0.1]], "ambient", [0.5, 0.5])
    p = solve_ot(A, B)
    np.testing.assert_allclose(p.plan, np.diag([0.5, 0.5]), atol=1e-12)
    assert p.cost == pytest.approx(0.01, rel=1e-10)
    # brute force over both matchings
    C = cost_matrix(A, B)
    assert p.cost == pytest.approx(min(0.5 * (C[0, 0] + C[1, 1]), 0.5 * (C[0, 1] + C[1, 0])), rel=1e-10)


def test_three_to_two_plan(three_two):
    A, B = three_two
    p = solve_ot(A, B)
    np.testing.assert_allclose(p.plan, [[1 / 3, 0], [1 / 6, 1 / 6], [0, 1 / 3]], atol=1e-12)
    assert p.marginal_error() <= 1e-12
    assert p.dual_residual <= 1e-9


def test_dimension_mismatch(three_two):
    A, _ = three_two
    with pytest.raises(DimensionMismatch):
        solve_ot(A, make_cycle(4))


def test_truncated_cost_bounded():
    A = make_space("a", [0.0], "ambient", [1.0])
    B = make_space("b", [10.0], "ambient", [1.0])
    assert solve_ot(A, B).cost == 1.0


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(1, 7), st.integers(1, 7))
def test_plan_against_lp_oracle(seed, n, k):
    rng = np.random.default_rng(seed)
    A, B = random_space(rng, n), random_space(rng, k)
    p = solve_ot(A, B)
    assert p.marginal_error() <= 1e-10
    assert np.all(p.plan >= 0)
    assert 0 <= p.cost <= 1
    C = cost_matrix(A, B)
    Aeq = np.vstack([np.kron(np.eye(n), np.ones(k)), np.kron(np.ones(n), np.eye(k))])
    ref = linprog(C.ravel(), A_eq=Aeq, b_eq=np.concatenate([A.measure, B.measure]), method="highs-ipm")
    assert p.cost == pytest.approx(ref.fun, abs=1e-9)
    assert p.cost == pytest.approx(float(np.sum(p.plan * C)), abs=1e-12)


def test_plan_dict_triplets(three_two):
    d = solve_ot(*three_two).to_dict()
    assert sorted(d["plan"]) == sorted(
        [["a", "x", pytest.approx(1 / 3)], ["b", "x", pytest.approx(1 / 6)], ["b", "y", pytest.approx(1 / 6)], ["c", "y", pytest.approx(1 / 3)]]
    )
    assert {"cost", "dual_residual", "slack"} <= set(d)


# -- maps and isometries ------------------------------------------------------


def test_diagonal_plan_map():
    X = make_cycle(5)
    T = plan_to_map(solve_ot(X, X))
    assert T.refined.ids == X.ids
    np.testing.assert_array_equal(T.assignment, np.arange(5))


def test_split_map(three_two):
    T = plan_to_map(solve_ot(*three_two))
    assert T.refined.ids == ("a", "b#0", "b#1", "c")
    np.testing.assert_allclose(T.refined.measure, [1 / 3, 1 / 6, 1 / 6, 1 / 3], atol=1e-12)
    assert T.pushforward_error <= 1e-12
    assert T.cost == pytest.approx(T.plan.cost, abs=1e-14)


def test_sigma_pullback(three_two):
    A, B = three_two
    T = plan_to_map(solve_ot(A, B))
    iso = Isometry("sigma", T)
    f = L2Function(B, np.array([2.0, -3.0]))
    g = apply_isometry(iso, f)
    np.testing.assert_array_equal(g.values, [2.0, 2.0, -3.0, -3.0])
    assert inner(g.space, g.values, g.values) == pytest.approx(inner(B, f.values, f.values), rel=1e-14)


def test_isometry_constant_and_identity():
    X = make_cycle(7)
    pi, _ = transport_pair(X, X)
    c = apply_isometry(pi, L2Function(X, np.full(7, 2.5)))
    np.testing.assert_array_equal(c.values, 2.5)
    f = np.arange(7.0)
    np.testing.assert_array_equal(apply_isometry(pi, L2Function(X, f)).values, f)


def test_isometry_space_mismatch():
    pi, _ = transport_pair(make_cycle(4), make_cycle(8))
    with pytest.raises(SpaceMismatch):
        apply_isometry(pi, L2Function(make_cycle(8), np.ones(8)))


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 8))
def test_isometry_preserves_inner_products(seed, n, k):
    rng = np.random.default_rng(seed)
    A, B = random_space(rng, n), random_space(rng, k)
    pi, sigma = transport_pair(A, B)
    for iso, S in ((pi, B), (sigma, A)):
        f, g = rng.standard_normal((2, S.n))
        a, b = rng.standard_normal(2)
        pf = apply_isometry(iso, L2Function(iso.domain, f)).values
        pg = apply_isometry(iso, L2Function(iso.domain, g)).values
        R = iso.codomain
        assert inner(R, pf, pg) == pytest.approx(inner(iso.domain, f, g), abs=1e-10)
        comb = apply_isometry(iso, L2Function(iso.domain, a * f + b * g)).values
        np.testing.assert_allclose(comb, a * pf + b * pg, atol=1e-12)
        assert iso.tmap.pushforward_error <= 1e-12
        assert iso.tmap.cost == pytest.approx(iso.tmap.plan.cost, abs=1e-12)


def test_condexp_is_contraction(three_two):
    A, B = three_two
    T = plan_to_map(solve_ot(A, B))
    f = np.array([1.0, -2.0])
    h = T.transfer(f)
    np.testing.assert_allclose(h, [1.0, -0.5, -2.0])
    assert inner(A, h, h) <= inner(B, f, f)


# -- weak and strong convergence ----------------------------------------------


def refining(ns=(8, 16, 32, 64, 128), limit=256):
    return [make_cycle(n) for n in ns], make_cycle(limit)


def test_pullback_family_converges_strongly():
    spaces, X = refining()
    f = np.cos(2 * math.pi * np.arange(X.n) / X.n)
    fam = []
    for S in spaces:
        T = plan_to_map(solve_ot(S, X))
        fam.append((S, T.transfer(f)))
    rep = check_l2_convergence(fam, (X, f), mode="strong")
    assert rep.weak and rep.strong
    assert np.all(np.diff(rep.gaps) < 0)


def test_alternating_family_weak_not_strong():
    spaces, X = refining()
    fam = [(S, (-1.0) ** np.arange(S.n)) for S in spaces]
    rep = check_l2_convergence(fam, (X, np.zeros(X.n)), mode="strong")
    # oracle: direct pairing with each tent
    panel = make_panel([S for S, _ in fam] + [X])
    direct = [np.abs(panel.evaluate(S.coords) @ (S.measure * f)).max() for S, f in fam]
    np.testing.assert_allclose(rep.gaps, direct, atol=1e-15)
    np.testing.assert_allclose(rep.norms, 1.0)
    assert rep.weak
    assert rep.strong is False


def test_constant_family_both_modes():
    spaces, X = refining()
    fam = [(S, np.ones(S.n)) for S in spaces]
    for mode in ("weak", "strong"):
        rep = check_l2_convergence(fam, (X, np.ones(X.n)), mode=mode)
        assert rep.verdict
    assert rep.panel["kind"] == "tent"
    # the gaps are pure quadrature errors: a tent of radius r is 1/r-Lipschitz
    # and W1 <= W2 bounds its pairing error
    rmin = min(rep.panel["radii"])
    w2 = np.sqrt([solve_ot(S, X).cost for S in spaces])
    assert np.all(rep.gaps <= w2 / rmin + 1e-12)


def test_convergence_dimension_mismatch():
    X = make_cycle(8)
    with pytest.raises(DimensionMismatch):
        check_l2_convergence([(pad_coords(X, 3), np.ones(8))], (X, np.ones(8)))


def test_w2_decreases_along_refinement():
    spaces, X = refining()
    costs = [solve_ot(S, X).cost for S in spaces]
    assert np.all(np.diff(costs) < 0)


def test_transfer_lemma_verdicts_agree():
    spaces, X = refining()
    f = np.sin(2 * math.pi * np.arange(X.n) / X.n)
    zero = (X, np.zeros(X.n))
    cases = [
        ([(S, plan_to_map(solve_ot(S, X)).transfer(f)) for S in spaces], (X, f)),
        ([(S, (-1.0) ** np.arange(S.n)) for S in spaces], zero),
        ([(S, np.full(S.n, (-1.0) ** i)) for i, S in enumerate(spaces)], zero),
    ]
    verdicts = []
    for fam, lim in cases:
        direct = check_l2_convergence(fam, lim)
        pushed = [(X, plan_to_map(solve_ot(X, S)).transfer(fi)) for S, fi in fam]
        via_sigma = check_l2_convergence(pushed, lim)
        assert direct.weak == via_sigma.weak
        verdicts.append(direct.weak)
    # converging, oscillating (weakly null) and sign-flipping constants
    assert verdicts == [True, True, False]


# -- Hausdorff distance -------------------------------------------------------


def test_hausdorff_equal_sets():
    X = make_cycle(5)
    rng = np.random.default_rng(0)
    A = [L2Function(X, v) for v in rng.standard_normal((4, 5))]
    assert hausdorff_distance(A, list(reversed(A))) == 0.0


def test_hausdorff_axis_pairs():
    X = make_space("ab", [0.0, 1.0], "ambient", [0.5, 0.5])
    r = math.sqrt(2)
    A = [L2Function(X, s * np.array([r, 0.0])) for s in (1, -1)]
    B = [L2Function(X, s * np.array([0.0, r])) for s in (1, -1)]
    # brute force over the four pairings: every distance is sqrt(2)
    d = [math.sqrt(X.measure @ (a.values - b.values) ** 2) for a, b in itertools.product(A, B)]
    np.testing.assert_allclose(d, math.sqrt(2))
    assert hausdorff_distance(A, B) == pytest.approx(math.sqrt(2), rel=1e-14)


def test_hausdorff_singletons():
    X = make_cycle(4)
    u, v = L2Function(X, np.arange(4.0)), L2Function(X, np.ones(4))
    assert hausdorff_distance([u], [v]) == pytest.approx(math.sqrt(X.measure @ (u.values - v.values) ** 2))


def test_hausdorff_errors():
    X = make_cycle(4)
    u = L2Function(X, np.ones(4))
    with pytest.raises(EmptySet):
        hausdorff_distance([], [u])
    with pytest.raises(SpaceMismatch):
        hausdorff_distance([u], [L2Function(make_cycle(4), np.ones(4))])


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_hausdorff_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    X = random_space(rng, 4)
    sets = [[L2Function(X, v) for v in rng.standard_normal((int(rng.integers(1, 5)), 4))] for _ in range(3)]
    A, B, C = sets
    dab = hausdorff_distance(A, B)
    assert dab == pytest.approx(hausdorff_distance(B, A), abs=1e-12)
    assert hausdorff_distance(A, C) <= dab + hausdorff_distance(B, C) + 1e-12
