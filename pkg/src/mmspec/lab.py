"""Convergence experiments over families of spaces sharing an ambient space.

A :class:`ConvergingFamily` lists approximating spaces with their energies and
a (discrete, finest-proxy) limit.  The experiments check, numerically, the two
halves of Mosco convergence, the transfer of subspace families used in the
upper bound for min-max values, the Hausdorff accumulation used for the lower
bound, and finally the convergence of ``Lambda_k`` itself.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .energy import EnergyForm, default_lq, default_quadratic
from .errors import DimensionMismatch, InvalidParameter, NormCollapse, OutsideDomain, Unbounded
from .flow import heat_flow
from .space import DiscreteSpace, L2Function, make_cycle, make_path, make_thin_torus, pad_coords, single_point
from .spectrum import _sphere_grid, minmax_upper_bound, orthonormalize
from .transport import check_l2_convergence, hausdorff_distance, make_panel, plan_to_map, solve_ot

REL_TOL = 0.05


def parallel_map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """``list(map(fn, items))``, optionally on a thread pool; order is preserved."""
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


@dataclass
class ConvergingFamily:
    members: list
    limit: tuple
    kind: str = "refining"
    name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = {S.dim for S, _ in self.members} | {self.limit[0].dim}
        if len(dims) != 1:
            raise DimensionMismatch(f"family mixes ambient dimensions {sorted(dims)}")
        if not self.members:
            raise InvalidParameter("a family needs at least one member")

    @property
    def spaces(self) -> list:
        return [S for S, _ in self.members]

    def w2_sequence(self, jobs: int = 1) -> list:
        """Truncated squared transport costs between each member measure and the limit."""
        X = self.limit[0]
        return parallel_map(lambda S: solve_ot(S, X).cost, self.spaces, jobs)

    def maps(self, jobs: int = 1) -> list:
        """Transport maps ``(T_i, S_i)``: member to limit and limit to member."""
        X = self.limit[0]
        return parallel_map(lambda S: (plan_to_map(solve_ot(S, X)), plan_to_map(solve_ot(X, S))), self.spaces, jobs)


# -- presets ------------------------------------------------------------------


def refining_cycles(ns=(8, 16, 32, 64, 128), limit_n: int = 256, circumferences=None) -> ConvergingFamily:
    """Cycles ``C_n`` converging to a finer cycle used as the limit proxy.

    ``circumferences`` (one per member) perturbs the family; alternating values
    make a family that does not converge.
    """
    circ = list(circumferences) if circumferences is not None else [1.0] * len(ns)
    members = [(C, default_quadratic(C)) for C in (make_cycle(n, c) for n, c in zip(ns, circ))]
    X = make_cycle(limit_n)
    kind = "refining" if circumferences is None else "measure-perturbed"
    return ConvergingFamily(members, (X, default_quadratic(X)), kind, "refining_cycles", {"ns": list(ns), "limit_n": limit_n, "circumferences": circ})


def negative_control(ns=(8, 16, 32, 64, 128), limit_n: int = 256, alt: float = 1.5) -> ConvergingFamily:
    """Cycles whose circumference alternates between 1 and ``alt``."""
    fam = refining_cycles(ns, limit_n, [1.0 if i % 2 == 0 else alt for i in range(len(ns))])
    fam.name = "negative_control"
    return fam


def thin_tori(n: int = 16, m: int = 8, eps=(0.4, 0.2, 0.1, 0.05)) -> ConvergingFamily:
    """Thin tori ``C_n x C_m(eps)`` collapsing onto the base cycle ``C_n``."""
    members = [(T, default_quadratic(T)) for T in (make_thin_torus(n, m, e) for e in eps)]
    X = make_cycle(n)
    X = pad_coords(X, 4)
    return ConvergingFamily(members, (X, default_quadratic(X)), "collapsing", "thin_tori", {"n": n, "m": m, "eps": list(eps)})


def shrinking_cycles(n: int = 8, circumferences=(1.0, 0.5, 0.25, 0.125)) -> ConvergingFamily:
    """Cycles of shrinking size converging to a single point."""
    members = [(C, default_quadratic(C)) for C in (make_cycle(n, c) for c in circumferences)]
    X = single_point((0.0, 0.0))
    return ConvergingFamily(members, (X, default_quadratic(X)), "collapsing", "shrinking", {"n": n, "circumferences": list(circumferences)})


def refining_paths(ns=(5, 9, 17), limit_n: int = 33, q: float = math.inf) -> ConvergingFamily:
    """Paths on ``[0, 1]`` with an ``lq`` energy."""
    members = [(P, default_lq(P, q)) for P in (make_path(k) for k in ns)]
    X = make_path(limit_n)
    return ConvergingFamily(members, (X, default_lq(X, q)), "refining", "refining_paths", {"ns": list(ns), "limit_n": limit_n, "q": q})


PRESETS = {
    "refining_cycles": refining_cycles,
    "thin_tori": thin_tori,
    "shrinking": shrinking_cycles,
    "negative_control": negative_control,
    "refining_paths": refining_paths,
}


def torus_fiber_eigenvalue(m: int, eps: float) -> float:
    """Smallest fiber eigenvalue ``2 m^2 / eps^2 (1 - cos(2 pi / m))`` of the thin torus."""
    return 2 * m * m / eps**2 * (1 - math.cos(2 * math.pi / m))


# -- Mosco checks -------------------------------------------------------------


@dataclass
class MoscoReport:
    recovery_energies: np.ndarray
    liminf_energies: np.ndarray
    limit_energy: float
    smoothed_limit_energy: float
    energy_gaps: np.ndarray
    strong: bool
    recovery_ok: bool
    liminf_ok: bool
    gaps_decreasing: bool

    @property
    def ok(self) -> bool:
        return self.strong and self.recovery_ok and self.liminf_ok


def _tail(a, k=3):
    return np.asarray(a)[-k:]


def _decreasing(a, floor=1e-12):
    a = _tail(a)
    return bool(np.all(a <= floor) or np.all(np.diff(a) <= floor))


def mosco_recovery_check(family: ConvergingFamily, f, t: float = 0.01, rel: float = REL_TOL, maps=None) -> MoscoReport:
    """Recovery sequence ``f_i = h_t^i(E_i pi_i f)`` and the liminf proxy ``E_i pi_i f``.

    ``E_i pi_i`` composes with the transport map onto the limit and averages
    over the split atoms.  Checks the strong convergence ``f_i -> h_t f``,
    the tail bound ``Ch^i(f_i) <= (1 + rel) Ch(f)`` and the tail bound
    ``Ch^i(E_i pi_i f) >= (1 - rel) Ch(f)``.
    """
    if not t > 0:
        raise InvalidParameter("regularization time must be positive")
    X, EX = family.limit
    f = f.values if isinstance(f, L2Function) else np.asarray(f, float)
    maps = family.maps() if maps is None else maps
    ht = heat_flow(EX, f, t).values
    ch_f, ch_ht = EX.energy(f), EX.energy(ht)
    rec, lin, fam = [], [], []
    for (S, E), (T, _) in zip(family.members, maps):
        g = T.transfer(f)
        fi = heat_flow(E, g, t).values
        rec.append(E.energy(fi))
        lin.append(E.energy(g))
        fam.append((S, fi))
    rec, lin = np.array(rec), np.array(lin)
    conv = check_l2_convergence(fam, (X, ht), "strong")
    scale = ch_ht if ch_ht > 0 else 1.0
    gaps = np.abs(rec - ch_ht) / scale
    tiny = 1e-12 * (1 + ch_f)
    rec_ok = bool(np.all(_tail(rec) <= (1 + rel) * ch_f + tiny))
    lin_ok = bool(np.all(_tail(lin) >= (1 - rel) * ch_f - tiny))
    return MoscoReport(rec, lin, ch_f, ch_ht, gaps, conv.verdict, rec_ok, lin_ok, _decreasing(gaps))


def low_mode_function(E: EnergyForm, rng: np.random.Generator, modes: int = 5) -> np.ndarray:
    """Random combination of the eigenfunctions of the ``modes`` lowest eigenvalues."""
    lam, phi = E.eigh()
    return phi[:, :modes] @ rng.standard_normal(modes)


# -- transfer of subspace families --------------------------------------------


def sphere_net(k: int, resolution_deg: float = 3.0, rng: Optional[np.random.Generator] = None, count: int = 256) -> np.ndarray:
    """Unit vectors of ``R^k`` (columns): an angular net for ``k <= 3``, random otherwise."""
    if k <= 3:
        G = _sphere_grid(k, resolution_deg)
        return np.hstack([G, -G])
    rng = np.random.default_rng(0) if rng is None else rng
    C = rng.standard_normal((k, count))
    return C / np.linalg.norm(C, axis=0)


@dataclass
class TransferResult:
    index: int
    admissible: bool
    min_norm: float
    max_energy: float
    net: list


@dataclass
class TransferReport:
    results: list
    limit_sup: float
    eps: float
    t: float
    resolution: float
    inadmissible: list

    def tail_sup(self, k: int = 3) -> float:
        return max(r.max_energy for r in self.results[-k:])


def transfer_family(
    family: ConvergingFamily,
    basis,
    t: float = 1e-3,
    eps: float = 0.1,
    resolution_deg: float = 3.0,
    strict: bool = False,
    maps=None,
) -> TransferReport:
    """Carry a net on ``S(span basis)`` to every member with ``h_t^i E_i pi_i`` and normalize.

    A member is admissible when every transferred vector keeps norm above
    ``1 - eps``.  With ``strict=True`` an inadmissible member raises
    :class:`NormCollapse`.
    """
    if not t > 0:
        raise InvalidParameter("regularization time must be positive")
    if not 0 < eps < 0.5:
        raise InvalidParameter("eps must lie in (0, 1/2)")
    X, EX = family.limit
    B = orthonormalize(EX, np.asarray(basis, float).reshape(X.n, -1))
    net = B @ sphere_net(B.shape[1], resolution_deg)
    limit_sup = float(np.max(EX.energy(net)))
    maps = family.maps() if maps is None else maps
    results, bad = [], []
    for i, ((S, E), (T, _)) in enumerate(zip(family.members, maps)):
        moved = np.column_stack([heat_flow(E, T.transfer(net[:, j]), t).values for j in range(net.shape[1])])
        norms = np.sqrt(S.measure @ moved**2)
        ok = bool(norms.min() > 1 - eps)
        unit = moved / np.where(norms > 0, norms, 1.0)
        energies = E.energy(unit)
        results.append(TransferResult(i, ok, float(norms.min()), float(np.max(energies)), [L2Function(S, unit[:, j]) for j in range(unit.shape[1])]))
        if not ok:
            bad.append(i)
    if strict and bad:
        raise NormCollapse(f"transferred norms collapse below 1 - eps on members {bad}", bad)
    return TransferReport(results, limit_sup, eps, t, resolution_deg, bad)


# -- Hausdorff accumulation ---------------------------------------------------


@dataclass
class AccumulationReport:
    accumulation: list
    gaps: np.ndarray
    subsequence: list
    pushed: list


def accumulate_families(family: ConvergingFamily, sets: Sequence, cap: float = math.inf, maps=None) -> AccumulationReport:
    """Push unit-sphere subsets of the members to the limit and extract an accumulation set.

    Each set is carried by ``sigma_i`` followed by averaging over split atoms.
    The subsequence is chosen by ``1/k`` chaining: the ``k``-th kept index is
    the first later one whose pushed set is within Hausdorff distance ``1/k``
    of the pushed set of the last member, which serves as the accumulation set.
    """
    if len(sets) != len(family.members):
        raise InvalidParameter("one set per family member is required")
    maps = family.maps() if maps is None else maps
    X = family.limit[0]
    pushed = []
    for (S, E), (_, R), V in zip(family.members, maps, sets):
        if not V:
            raise OutsideDomain("empty set")
        for v in V:
            if v.space is not S:
                raise OutsideDomain("set element lives on the wrong space")
            if abs(v.norm() - 1) > 1e-9:
                raise OutsideDomain(f"set element has norm {v.norm():.3g}, not 1")
        top = max(E.energy(v.values) for v in V)
        if not math.isfinite(top) or top > cap:
            raise Unbounded(f"energy {top} exceeds the cap {cap}")
        pushed.append([L2Function(X, R.transfer(v.values)) for v in V])
    ref = pushed[-1]
    gaps = np.array([hausdorff_distance(P, ref) for P in pushed])
    subseq, k = [], 1
    for i, g in enumerate(gaps):
        if g <= 1.0 / k:
            subseq.append(i)
            k += 1
    return AccumulationReport(ref, gaps, subseq, pushed)


def eigencircle(E: EnergyForm, j: int, points: int = 128) -> list:
    """Net on the unit circle of the span of eigenvectors ``j`` and ``j + 1``."""
    lam, phi = E.eigh()
    th = np.arange(points) * (2 * math.pi / points)
    return [L2Function(E.space, math.cos(a) * phi[:, j] + math.sin(a) * phi[:, j + 1]) for a in th]


# -- spectral continuity ------------------------------------------------------


@dataclass
class ContinuityReport:
    k_max: int
    values: np.ndarray
    limit: np.ndarray
    gaps: np.ndarray
    upper_gap: np.ndarray
    lower_gap: np.ndarray
    upper_ok: list
    lower_ok: list
    verdicts: list
    w2: list
    annotations: dict = field(default_factory=dict)
    exact: bool = True

    @property
    def verdict(self) -> bool:
        return all(self.verdicts)

    def rows(self):
        """Rows ``(i, k, lambda_i_k, lambda_limit_k, gap)``."""
        out = []
        for i in range(self.values.shape[0]):
            for k in range(self.k_max):
                out.append((i, k + 1, self.values[i, k], self.limit[k], self.gaps[i, k]))
        return out


def spectral_continuity_experiment(
    family: ConvergingFamily,
    k_max: int = 4,
    budget: int = 8,
    seed: int = 0,
    rel: float = REL_TOL,
    jobs: int = 1,
) -> ContinuityReport:
    """``Lambda_k`` along the family against the limit, with trend verdicts.

    For each ``k`` the relative gap ``|Lambda_k^i - Lambda_k| / Lambda_k`` must
    end below ``rel`` and decrease over the last three members.  The upper
    and lower verdicts apply the same test to the one-sided gaps.  An infinite
    limit value (single-point limit) asks instead for the member values to
    increase.
    """
    if k_max < 1:
        raise InvalidParameter("k_max must be at least 1")
    X, EX = family.limit

    def lam(E):
        return [minmax_upper_bound(E, k, budget=budget, seed=seed + k).value if k <= E.space.n or E.space.n == 1 else math.inf for k in range(1, k_max + 1)]

    vals = np.array(parallel_map(lam, [E for _, E in family.members], jobs))
    lim = np.array(lam(EX))
    exact = all(E.is_quadratic for _, E in family.members) and EX.is_quadratic
    nm = vals.shape[0]
    gaps = np.zeros_like(vals)
    up = np.zeros_like(vals)
    lo = np.zeros_like(vals)
    upper_ok, lower_ok, verdicts = [], [], []
    for k in range(k_max):
        L = lim[k]
        if math.isinf(L):
            gaps[:, k] = np.inf
            up[:, k] = 0.0
            lo[:, k] = np.inf
            grows = bool(np.all(np.diff(vals[:, k]) > 0)) if nm > 1 else True
            upper_ok.append(True)
            lower_ok.append(grows)
            verdicts.append(grows)
            continue
        den = L if L > 0 else 1.0
        gaps[:, k] = np.abs(vals[:, k] - L) / den
        up[:, k] = np.maximum(vals[:, k] - L, 0.0) / den
        lo[:, k] = np.maximum(L - vals[:, k], 0.0) / den
        uo = bool(up[-1, k] <= rel and _decreasing(up[:, k], 1e-9))
        lo_ = bool(lo[-1, k] <= rel and _decreasing(lo[:, k], 1e-9))
        both = bool(gaps[-1, k] <= rel and _decreasing(gaps[:, k], 1e-9))
        upper_ok.append(uo)
        lower_ok.append(lo_)
        verdicts.append(both and uo and lo_)
    notes = {}
    if family.name == "thin_tori":
        m = family.params["m"]
        notes["fiber_eigenvalues"] = [torus_fiber_eigenvalue(m, e) for e in family.params["eps"]]
        notes["fiber_above_window"] = [bool(v > lim[-1]) for v in notes["fiber_eigenvalues"]]
    if family.kind == "collapsing" and X.n == 1:
        notes["single_point_limit"] = True
    w2 = family.w2_sequence(jobs)
    notes["w2_nonincreasing"] = bool(np.all(np.diff(w2) <= 1e-12))
    return ContinuityReport(k_max, vals, lim, gaps, up, lo, upper_ok, lower_ok, verdicts, w2, notes, exact)


@dataclass
class TransferLemmaReport:
    direct: bool
    pushed: bool
    direct_gaps: np.ndarray
    pushed_gaps: np.ndarray

    @property
    def agree(self) -> bool:
        return self.direct == self.pushed


def transfer_lemma_check(family: ConvergingFamily, member_values: Sequence, f, maps=None, tol: float = 0.05) -> TransferLemmaReport:
    """Compare the weak verdict for ``(f_i)`` with the verdict for ``sigma_i(f_i)`` on the limit.

    Both verdicts use one panel built from every space of the family.
    """
    X = family.limit[0]
    f = f.values if isinstance(f, L2Function) else np.asarray(f, float)
    maps = family.maps() if maps is None else maps
    panel = make_panel(family.spaces + [X])
    direct = check_l2_convergence(list(zip(family.spaces, member_values)), (X, f), "weak", panel, tol)
    pushed_vals = [R.transfer(np.asarray(v, float)) for (_, R), v in zip(maps, member_values)]
    pushed = check_l2_convergence([(X, v) for v in pushed_vals], (X, f), "weak", panel, tol)
    return TransferLemmaReport(direct.weak, pushed.weak, direct.gaps, pushed.gaps)
