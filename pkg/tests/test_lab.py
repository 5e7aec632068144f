import math

import numpy as np
import pytest

from mmspec.energy import default_quadratic
from mmspec.errors import DimensionMismatch, InvalidParameter, NormCollapse, OutsideDomain, Unbounded
from mmspec.lab import (
    PRESETS,
    ConvergingFamily,
    accumulate_families,
    eigencircle,
    low_mode_function,
    mosco_recovery_check,
    negative_control,
    parallel_map,
    refining_cycles,
    refining_paths,
    shrinking_cycles,
    spectral_continuity_experiment,
    sphere_net,
    thin_tori,
    torus_fiber_eigenvalue,
    transfer_family,
    transfer_lemma_check,
)
from mmspec.space import L2Function, make_cycle, pad_coords
from mmspec.spectrum import quadratic_oracle
from mmspec.transport import hausdorff_distance


@pytest.fixture(scope="module")
def cycles():
    fam = refining_cycles()
    return fam, fam.maps()


def circulant(n, j=1):
    return 2 * n * n * (1 - math.cos(2 * math.pi * j / n))


def first_mode(X):
    return math.sqrt(2) * np.cos(2 * math.pi * np.arange(X.n) / X.n)


def constant_family(n=8, members=4):
    C = make_cycle(n)
    E = default_quadratic(C)
    return ConvergingFamily([(C, E)] * members, (C, E), "refining", "constant")


# -- families -----------------------------------------------------------------


def test_presets_build():
    for name, make in PRESETS.items():
        fam = make()
        assert fam.members, name
        assert len({S.dim for S in fam.spaces} | {fam.limit[0].dim}) == 1


def test_family_dimension_mismatch():
    C = make_cycle(4)
    E = default_quadratic(C)
    P = pad_coords(C, 3)
    with pytest.raises(DimensionMismatch):
        ConvergingFamily([(P, default_quadratic(P))], (C, E))
    with pytest.raises(InvalidParameter):
        ConvergingFamily([], (C, E))


def test_w2_nonincreasing(cycles):
    fam, _ = cycles
    w2 = fam.w2_sequence()
    assert np.all(np.diff(w2) < 0)


def test_parallel_map_order():
    assert parallel_map(lambda x: x * x, list(range(10)), jobs=4) == [x * x for x in range(10)]


def test_torus_fiber_oracle():
    fam = thin_tori(n=4, m=4, eps=(0.5,))
    S, E = fam.members[0]
    lam = quadratic_oracle(E).values
    # Kronecker sum of the base and fiber circulant spectra
    base = [circulant(4, j) for j in range(4)]
    fiber = [torus_fiber_eigenvalue(4, 0.5) / circulant(4) * circulant(4, j) for j in range(4)]
    ref = sorted(a + b for a in base for b in fiber)
    np.testing.assert_allclose(lam, ref, rtol=1e-10, atol=1e-8)


# -- Mosco checks -------------------------------------------------------------


def test_mosco_constant(cycles):
    fam, maps = cycles
    X = fam.limit[0]
    rep = mosco_recovery_check(fam, np.ones(X.n), maps=maps)
    assert rep.ok
    assert np.all(rep.recovery_energies <= 1e-12)
    assert rep.limit_energy == 0.0


def test_mosco_first_eigenfunction(cycles):
    fam, maps = cycles
    X = fam.limit[0]
    rep = mosco_recovery_check(fam, first_mode(X), t=0.01, maps=maps)
    assert rep.ok
    assert rep.gaps_decreasing
    assert rep.energy_gaps[-1] <= 0.05
    assert rep.limit_energy == pytest.approx(circulant(256), rel=1e-10)


def test_mosco_random_low_modes(cycles):
    fam, maps = cycles
    X, EX = fam.limit
    rng = np.random.default_rng(5)
    for _ in range(3):
        rep = mosco_recovery_check(fam, low_mode_function(EX, rng), maps=maps)
        assert rep.recovery_ok and rep.liminf_ok and rep.strong


def test_mosco_rejects_bad_time(cycles):
    fam, maps = cycles
    with pytest.raises(InvalidParameter):
        mosco_recovery_check(fam, np.ones(256), t=0.0, maps=maps)


# -- transfer of subspace families --------------------------------------------


def test_sphere_net_unit_columns():
    for k in (1, 2, 3, 5):
        N = sphere_net(k)
        np.testing.assert_allclose(np.linalg.norm(N, axis=0), 1.0, atol=1e-14)
    # symmetric: the net contains -v with every v
    N = sphere_net(2)
    assert any(np.allclose(N[:, 0], -N[:, j]) for j in range(N.shape[1]))


def test_transfer_identity_family():
    fam = constant_family()
    X, EX = fam.limit
    B = np.column_stack([np.ones(X.n), first_mode(X)])
    rep = transfer_family(fam, B, t=1e-3)
    assert not rep.inadmissible
    for r in rep.results:
        assert r.max_energy <= rep.limit_sup * (1 + 1e-12)


def test_transfer_refining(cycles):
    fam, maps = cycles
    X = fam.limit[0]
    B = np.column_stack([np.ones(X.n), first_mode(X)])
    rep = transfer_family(fam, B, t=1e-3, eps=0.1, maps=maps)
    assert rep.tail_sup() <= rep.limit_sup * 1.05
    assert max(r.max_energy for r in rep.results) <= rep.limit_sup / (1 - rep.eps) * 1.02
    assert rep.resolution == 3.0
    for r in rep.results:
        if r.admissible:
            assert r.min_norm > 1 - rep.eps


def test_transfer_norm_collapse(cycles):
    fam, maps = cycles
    X, EX = fam.limit
    _, phi = EX.eigh()
    # high modes of the limit are invisible to coarse members
    with pytest.raises(NormCollapse) as err:
        transfer_family(fam, phi[:, 100:102], t=1e-3, eps=0.4, strict=True, maps=maps)
    assert 0 in err.value.indices
    rep = transfer_family(fam, phi[:, 100:102], t=1e-3, eps=0.4, maps=maps)
    assert rep.inadmissible[0] == 0


def test_transfer_bad_eps():
    fam = constant_family()
    with pytest.raises(InvalidParameter):
        transfer_family(fam, np.ones(8), eps=0.5)


# -- accumulation -------------------------------------------------------------


def test_accumulate_constant_family():
    fam = constant_family()
    X, EX = fam.limit
    V = eigencircle(EX, 1, points=16)
    rep = accumulate_families(fam, [V] * 4)
    np.testing.assert_allclose(rep.gaps, 0.0, atol=1e-12)
    assert hausdorff_distance(rep.accumulation, V) <= 1e-12
    assert rep.subsequence == [0, 1, 2, 3]


def test_accumulate_eigencircles(cycles):
    fam, maps = cycles
    X, EX = fam.limit
    sets = [eigencircle(E, 1, points=64) for _, E in fam.members]
    rep = accumulate_families(fam, sets, maps=maps)
    assert hausdorff_distance(rep.accumulation, eigencircle(EX, 1, points=256)) <= 0.1
    assert rep.subsequence[-1] == len(sets) - 1


def test_accumulate_rejects_vanishing_norms():
    fam = constant_family()
    X, EX = fam.limit
    V = eigencircle(EX, 1, points=8)
    shrunk = [[L2Function(X, v.values * 2.0**-i) for v in V] for i in range(4)]
    with pytest.raises(OutsideDomain):
        accumulate_families(fam, shrunk)


def test_accumulate_energy_cap():
    fam = constant_family()
    X, EX = fam.limit
    V = eigencircle(EX, 1, points=8)
    with pytest.raises(Unbounded):
        accumulate_families(fam, [V] * 4, cap=1.0)


# -- spectral continuity ------------------------------------------------------


def test_continuity_refining_cycles():
    rep = spectral_continuity_experiment(refining_cycles(), k_max=4)
    assert rep.verdict
    assert all(rep.upper_ok) and all(rep.lower_ok)
    for i, n in enumerate((8, 16, 32, 64, 128)):
        assert rep.values[i, 1] == pytest.approx(circulant(n), rel=1e-6)
    assert rep.values[1, 1] == pytest.approx(38.97, abs=5e-3)
    assert rep.values[3, 1] == pytest.approx(39.45, abs=5e-3)
    assert rep.limit[1] == pytest.approx(4 * math.pi**2, rel=2e-4)
    assert rep.annotations["w2_nonincreasing"]
    assert len(rep.rows()) == 5 * 4


def test_continuity_negative_control():
    rep = spectral_continuity_experiment(negative_control(), k_max=4)
    assert not rep.verdict


def test_continuity_thin_tori():
    rep = spectral_continuity_experiment(thin_tori(), k_max=4)
    assert rep.verdict
    assert all(rep.annotations["fiber_above_window"])
    fib = rep.annotations["fiber_eigenvalues"]
    assert np.all(np.diff(fib) > 0)
    assert fib[1] / fib[0] == pytest.approx(4.0)


def test_continuity_shrinking():
    rep = spectral_continuity_experiment(shrinking_cycles(), k_max=2)
    assert rep.annotations["single_point_limit"]
    assert rep.limit[1] == math.inf
    assert np.all(np.diff(rep.values[:, 1]) > 0)
    assert rep.verdict


def test_continuity_jobs_independent():
    fam = refining_cycles(ns=(8, 16, 32), limit_n=64)
    a = spectral_continuity_experiment(fam, k_max=3, jobs=1)
    b = spectral_continuity_experiment(fam, k_max=3, jobs=3)
    np.testing.assert_array_equal(a.values, b.values)


def test_refining_paths_qinf_cauchy_trend():
    rep = spectral_continuity_experiment(refining_paths(ns=(5, 9, 17), limit_n=33), k_max=2, budget=2)
    lam2 = rep.values[:, 1]
    diffs = np.abs(np.diff(np.append(lam2, rep.limit[1])))
    assert np.all(np.diff(diffs) < 0)
    assert not rep.exact


# -- transfer lemma -----------------------------------------------------------


def test_transfer_lemma_converging(cycles):
    fam, maps = cycles
    X = fam.limit[0]
    f = first_mode(X)
    vals = [T.transfer(f) for T, _ in maps]
    rep = transfer_lemma_check(fam, vals, f, maps=maps)
    assert rep.direct and rep.pushed and rep.agree


def test_transfer_lemma_non_converging(cycles):
    fam, maps = cycles
    X = fam.limit[0]
    vals = [np.full(S.n, (-1.0) ** i) for i, S in enumerate(fam.spaces)]
    rep = transfer_lemma_check(fam, vals, np.ones(X.n), maps=maps)
    assert not rep.direct and not rep.pushed and rep.agree
