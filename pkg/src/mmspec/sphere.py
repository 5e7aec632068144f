"""Sphere-constrained gradient flow and eigenpair search.

For an energy ``Ch`` the functional

    Phi_L(u) = Ch(u) - L |u|^2   on  {|u| <= 1, Ch(u) <= M},   L > M,

is ``(-2L)``-convex and its gradient flow leaves the unit sphere invariant.
Points of the sphere where its slope vanishes are exactly the eigenpairs
``-Delta u = Ch(u) u``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import eigh, null_space

from .energy import EnergyForm, _vals, laplacian
from .errors import InvalidParameter, InvarianceBroken, NoConvergence, OutsideDomain
from .flow import FlowState, FlowTrajectory, Functional, Resolvent, default_probes, evi_residual, slope
from .space import L2Function

SPHERE_TOL = 1e-9
DRIFT_FACTOR = 5e-6
DISTINCT = 1e-3


@dataclass(frozen=True)
class ConstrainedFunctional(Functional):
    """``Phi_L``: ``Ch - L |.|^2`` on the unit ball intersected with ``{Ch <= M}``."""

    @property
    def M(self) -> float:
        return self.cap

    @property
    def L(self) -> float:
        return self.shift


def build_phi(E: EnergyForm, lambda_est: float) -> ConstrainedFunctional:
    """``Phi_L`` with cap ``M = lambda_est + 1`` and shift ``L = M + 1``."""
    if not lambda_est >= 0:
        raise InvalidParameter("energy level must be nonnegative")
    M = float(lambda_est) + 1.0
    return ConstrainedFunctional(E, scale=1.0, shift=M + 1.0, ball=1.0, cap=M)


def _norm(E, v) -> float:
    return math.sqrt(E.space.measure @ v**2)


def phi_minimal_selection(cf: ConstrainedFunctional, u) -> L2Function:
    """Tangential part ``-Delta u - Ch(u) u`` of the least subgradient of ``Phi_L``."""
    E = cf.energy
    v = _vals(E, u)
    if abs(_norm(E, v) - 1) > SPHERE_TOL:
        raise OutsideDomain("point is not on the unit sphere")
    ch = E.energy(v)
    if not ch < cf.M:
        raise OutsideDomain(f"energy {ch} is not below the cap {cf.M}")
    return L2Function(E.space, laplacian(E, v).values - ch * v)


def eigen_residual(E: EnergyForm, u) -> float:
    """``|-Delta u - Ch(u) u|`` for a unit vector ``u``."""
    v = _vals(E, u)
    r = laplacian(E, v).values - E.energy(v) * v
    return _norm(E, r)


def sphere_flow_run(
    cf: ConstrainedFunctional,
    u0,
    T: float,
    tau: float,
    probes: Optional[Sequence] = None,
    record: bool = True,
) -> FlowTrajectory:
    """Implicit Euler flow of ``Phi_L`` restricted to the unit sphere.

    Every resolvent step is checked to leave the sphere by at most
    ``5e-6 tau L`` before it is renormalized, and ``Ch`` must not increase by
    more than ``1e-9``.  With ``record=False`` only the endpoints are kept.

    Raises
    ------
    InvarianceBroken
        The drift or energy checks fail, which signals a step that is too large.
    """
    E = cf.energy
    if not cf.L > cf.M:
        raise InvalidParameter("the shift L must exceed the cap M")
    u = np.array(_vals(E, u0), dtype=float)
    if abs(_norm(E, u) - 1) > SPHERE_TOL:
        raise OutsideDomain("initial point is not on the unit sphere")
    u = u / _norm(E, u)
    ch = E.energy(u)
    if ch > cf.M * (1 + SPHERE_TOL):
        raise OutsideDomain(f"initial energy {ch} exceeds the cap {cf.M}")
    res = Resolvent(cf, tau)
    steps = int(math.ceil(T / tau - 1e-12))
    bound = DRIFT_FACTOR * tau * cf.L
    if record:
        probes = default_probes(cf, u) if probes is None else [_vals(E, p) for p in probes]
        pvals = [cf(p) for p in probes]
    traj = FlowTrajectory(cf, tau, [FlowState(0.0, u, cf(u), slope(cf, u) if record else math.nan, -math.inf, 1.0)])
    for k in range(1, steps + 1):
        raw = res(u)
        nrm = _norm(E, raw)
        drift = abs(nrm - 1)
        if drift > bound:
            raise InvarianceBroken(f"step {k}: sphere drift {drift:.3e} exceeds {bound:.3e}")
        v = raw / nrm
        ch_new = E.energy(v)
        if ch_new > ch + 1e-9 * (1 + ch):
            raise InvarianceBroken(f"step {k}: energy increased from {ch} to {ch_new}")
        if record:
            evi = evi_residual(cf, u, v, tau, probes, pvals)
            traj.states.append(FlowState(k * tau, v, cf(v), slope(cf, v), evi, 1.0, drift))
        elif k == steps:
            traj.states.append(FlowState(k * tau, v, cf(v), math.nan, math.nan, 1.0, drift))
        u, ch = v, ch_new
    return traj


@dataclass
class EigenPair:
    """Unit function ``u`` with ``-Delta u = value * u`` up to ``residual``."""

    value: float
    u: L2Function
    residual: float
    starts_used: int = 1
    steps: int = 0

    def to_dict(self) -> dict:
        return {
            "lambda": self.value,
            "residual": self.residual,
            "u": [float(x) for x in self.u.values],
            "starts_used": self.starts_used,
        }


def _polish(E: EnergyForm, u: np.ndarray, tol: float):
    """Critical point of ``Ch`` on the sphere within the stratum of ``u``.

    The polyhedral energy is linear in each local norm on the stratum cut out
    by the ties of ``u``, so the problem there is a generalized eigenproblem.
    """
    m = E.space.measure
    best = None
    for t in (1e-10, 1e-8, 1e-6, 1e-4, 1e-3):
        Q, C = E.linearization(u, t)
        Z = null_space(C) if C.shape[0] else np.eye(E.space.n)
        if Z.shape[1] == 0:
            continue
        Mz = Z.T @ (m[:, None] * Z)
        lam, Y = eigh(Z.T @ Q @ Z, Mz)
        W = Z @ Y
        k = int(np.argmax(np.abs(W.T @ (m * u))))
        w = W[:, k]
        w = w / _norm(E, w)
        if w @ (m * u) < 0:
            w = -w
        r = eigen_residual(E, w)
        if best is None or r < best[1]:
            best = (w, r)
        if r <= tol:
            break
    return best


def _deflator(E: EnergyForm, deflate):
    m = E.space.measure
    basis = []
    for d in deflate or ():
        d = np.array(_vals(E, d), dtype=float)
        for b in basis:
            d = d - (m @ (d * b)) * b
        nd = _norm(E, d)
        if nd > 1e-12:
            basis.append(d / nd)

    def apply(v):
        for b in basis:
            v = v - (m @ (v * b)) * b
        return v

    return apply


def find_eigenpair(
    E: EnergyForm,
    u0,
    tol: float = 1e-8,
    max_steps: int = 20000,
    chunk: int = 10,
    polish: bool = True,
    deflate: Optional[Sequence] = None,
) -> EigenPair:
    """Follow the sphere flow from ``u0`` until the eigen-residual drops below ``tol``.

    The flow runs in chunks; each chunk rebuilds ``Phi_L`` at the current
    energy and uses ``tau = 1/(4L)``.  Polyhedral energies are finished by an
    exact solve on the current stratum once the flow is close.

    ``deflate`` lists functions spanning a flow-invariant subspace (constants
    for any energy built from differences, eigenspaces for quadratic ones).
    The start is projected onto its orthogonal complement and the projection
    is repeated after every chunk so that rounding cannot regrow it.

    Raises
    ------
    NoConvergence
        ``max_steps`` flow steps did not reach ``tol``; ``.best`` holds the
        pair with the smallest residual seen.
    """
    u = np.array(_vals(E, u0), dtype=float)
    if abs(_norm(E, u) - 1) > 1e-9:
        raise OutsideDomain("initial point is not on the unit sphere")
    project = _deflator(E, deflate)
    u = project(u)
    if _norm(E, u) < 1e-12:
        raise OutsideDomain("start lies in the deflated subspace")
    u = u / _norm(E, u)
    steps = 0
    r = eigen_residual(E, u)
    best = (r, u)
    while r > tol:
        if steps >= max_steps:
            w = best[1]
            pair = EigenPair(E.energy(w), L2Function(E.space, w), best[0], 1, steps)
            raise NoConvergence(f"residual {best[0]:.3e} after {steps} steps", best=pair)
        cf = build_phi(E, E.energy(u))
        tau = 0.25 / cf.L
        traj = sphere_flow_run(cf, u, chunk * tau, tau, record=False)
        u = project(traj.states[-1].u)
        u = u / _norm(E, u)
        steps += chunk
        r = eigen_residual(E, u)
        if r < best[0]:
            best = (r, u)
        if r > tol and polish and E.is_polyhedral:
            w, rw = _polish(E, u, tol)
            if rw < best[0]:
                best = (rw, w)
            if rw <= tol:
                u, r = w, rw
    return EigenPair(E.energy(u), L2Function(E.space, u), r, 1, steps)


def mean_zero_seeds(E: EnergyForm, count: int, rng: np.random.Generator, deflate: Optional[Sequence] = None) -> list:
    """Random unit vectors ``m``-orthogonal to the functions in ``deflate``."""
    project = _deflator(E, deflate)
    out = []
    for _ in range(count):
        v = project(rng.standard_normal(E.space.n))
        out.append(v / _norm(E, v))
    return out


def _run(args):
    E, u0, tol, max_steps, deflate = args
    try:
        return find_eigenpair(E, u0, tol, max_steps, deflate=deflate)
    except NoConvergence as exc:
        return exc.best


def multistart(
    E: EnergyForm,
    seeds: Sequence,
    tol: float = 1e-8,
    max_steps: int = 20000,
    jobs: int = 1,
    deflate: Optional[Sequence] = None,
) -> list:
    """Run :func:`find_eigenpair` from every seed; unconverged runs keep their best iterate."""
    work = [(E, s, tol, max_steps, deflate) for s in seeds]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            return list(ex.map(_run, work))
    return [_run(w) for w in work]


@dataclass
class ProbeResult:
    level: float
    pairs: list
    distances: np.ndarray
    starts: int

    @property
    def count(self) -> int:
        return len(self.pairs)


def critical_set_probe(
    E: EnergyForm,
    level: float,
    n_starts: int,
    tol: float = 1e-8,
    seed: int = 0,
    deflate: Optional[Sequence] = None,
    jobs: int = 1,
) -> ProbeResult:
    """Distinct unit eigenfunctions at energy ``level`` found by multistart.

    Seeds are random and ``m``-orthogonal to ``deflate`` (constants by default
    when ``level > 0``).  Pairs with ``|Ch(u) - level| <= 1e-6 (1 + level)`` and
    residual below ``tol`` are kept when they lie farther than ``1e-3`` from
    every representative kept so far, in the sorted order of ``(value, u)``.
    """
    if n_starts < 1:
        raise InvalidParameter("at least one start is required")
    if deflate is None:
        deflate = [np.ones(E.space.n)] if level > 0 else []
    rng = np.random.default_rng(seed)
    seeds = mean_zero_seeds(E, n_starts, rng, deflate)
    found = multistart(E, seeds, tol, jobs=jobs, deflate=deflate)
    hits = [p for p in found if p.residual <= tol and abs(p.value - level) <= 1e-6 * (1 + level)]
    hits.sort(key=lambda p: (round(p.value, 9), tuple(np.round(p.u.values, 12))))
    m = E.space.measure
    reps = []
    for p in hits:
        if all(_norm(E, p.u.values - q.u.values) > DISTINCT for q in reps):
            reps.append(p)
    for p in reps:
        p.starts_used = n_starts
    k = len(reps)
    D = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            D[i, j] = D[j, i] = math.sqrt(m @ (reps[i].u.values - reps[j].u.values) ** 2)
    return ProbeResult(level, reps, D, n_starts)


@dataclass
class CriticalNeighborhood:
    """Membership tests for the tube ``U_{lam, r}`` and the set ``N_{lam, delta}``."""

    cf: ConstrainedFunctional
    level: float
    radius: float
    delta: float
    points: list = field(default_factory=list)

    def in_tube(self, u) -> bool:
        v = _vals(self.cf.energy, u)
        return any(_norm(self.cf.energy, v - _vals(self.cf.energy, p)) < self.radius for p in self.points)

    def in_near_critical(self, u) -> bool:
        E = self.cf.energy
        v = _vals(E, u)
        if abs(E.energy(v) - self.level) > self.delta:
            return False
        return slope(self.cf, v) ** 2 <= 4 * self.delta


def uniform_slope_bound(cf: ConstrainedFunctional, starts: Sequence, t: float = 0.5, steps: int = 100) -> float:
    """``J``: the largest slope of ``Phi_L`` at time ``t`` along flows from ``starts``."""
    tau = min(t / steps, 0.25 / cf.L)
    worst = 0.0
    for s in starts:
        traj = sphere_flow_run(cf, s, t, tau, record=False)
        worst = max(worst, slope(cf, traj.states[-1].u))
    return worst
