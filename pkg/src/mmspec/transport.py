"""Optimal couplings, transport maps by atom splitting, and cross-space L^2 tests.

Couplings minimize the bounded cost ``min(1, rho**2)`` of the ambient distance
``rho``.  A plan becomes a map after each source atom is split along its row
of the plan; composing with the map is then a linear isometry between the
``L^2`` spaces, and averaging over the split pieces (conditional expectation)
returns functions to the unrefined source.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix, vstack

from .errors import DimensionMismatch, EmptySet, SolverFailure, SpaceMismatch
from .space import DiscreteSpace, L2Function, ambient_distances, truncated_cost

MARGINAL_TOL = 1e-10
DUAL_TOL = 1e-9


@dataclass
class CouplingPlan:
    """Optimal coupling of ``source.measure`` and ``target.measure``."""

    source: DiscreteSpace
    target: DiscreteSpace
    plan: np.ndarray
    cost: float
    dual_residual: float
    potentials: tuple = ()
    slack: float = 0.0

    def marginal_error(self) -> float:
        a = np.abs(self.plan.sum(axis=1) - self.source.measure).max()
        b = np.abs(self.plan.sum(axis=0) - self.target.measure).max()
        return float(max(a, b))

    def to_dict(self) -> dict:
        i, j = np.nonzero(self.plan)
        return {
            "plan": [[self.source.ids[a], self.target.ids[b], float(self.plan[a, b])] for a, b in zip(i, j)],
            "cost": self.cost,
            "dual_residual": self.dual_residual,
            "slack": self.slack,
        }


def cost_matrix(source: DiscreteSpace, target: DiscreteSpace) -> np.ndarray:
    if source.dim != target.dim:
        raise DimensionMismatch(f"ambient dimensions differ: {source.dim} vs {target.dim}")
    return truncated_cost(ambient_distances(source.coords, target.coords) ** 2)


def _balance(P: np.ndarray, a: np.ndarray, b: np.ndarray, iters: int = 50) -> np.ndarray:
    # scale rows and columns on the fixed support until both marginals are met
    P = P.copy()
    for _ in range(iters):
        rs = P.sum(axis=1)
        P *= np.where(rs > 0, a / np.where(rs > 0, rs, 1.0), 1.0)[:, None]
        cs = P.sum(axis=0)
        P *= np.where(cs > 0, b / np.where(cs > 0, cs, 1.0), 1.0)[None, :]
        if max(np.abs(P.sum(axis=1) - a).max(), np.abs(P.sum(axis=0) - b).max()) < 1e-16:
            break
    return P


def _centered(P: np.ndarray, red: np.ndarray, a: np.ndarray, b: np.ndarray, tol: float) -> np.ndarray:
    # maximum-entropy plan on the optimal face (entries with zero reduced cost);
    # unique, so ties such as rotations on a cycle are resolved symmetrically
    mask = (red <= tol) | (P > 0)
    Q = _balance(mask * np.outer(a, b), a, b, iters=5000)
    err = max(np.abs(Q.sum(axis=1) - a).max(), np.abs(Q.sum(axis=0) - b).max())
    return Q if err < MARGINAL_TOL * 1e-2 else P


def solve_ot(source: DiscreteSpace, target: DiscreteSpace) -> CouplingPlan:
    """Exact optimal plan for the cost ``min(1, rho**2)`` by a sparse LP (HiGHS).

    When the optimum is not unique the maximum-entropy optimal plan is
    returned, which does not depend on the LP vertex found.

    Optimality is certified from the LP duals: the reported residual is the
    larger of the worst negative reduced cost and the complementary slackness
    gap ``sum plan * reduced_cost``.
    """
    C = cost_matrix(source, target)
    n, m = C.shape
    a, b = source.measure, target.measure
    rows = np.repeat(np.arange(n), m)
    cols = np.arange(n * m)
    Ar = coo_matrix((np.ones(n * m), (rows, cols)), shape=(n, n * m))
    Ac = coo_matrix((np.ones(n * m), (np.tile(np.arange(m), n), cols)), shape=(m, n * m))
    A = vstack([Ar, Ac]).tocsr()
    # HiGHS tolerances are absolute: rescale costs and masses to order one
    cs = float(C.max()) or 1.0
    ms = 1.0 / max(a.max(), b.max())
    res = linprog(
        C.ravel() / cs,
        A_eq=A,
        b_eq=np.concatenate([a, b]) * ms,
        bounds=(0, None),
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise SolverFailure(f"transport LP failed: {res.message}")
    P = np.clip(res.x.reshape(n, m) / ms, 0.0, None)
    P[P < 1e-15] = 0.0
    P = _balance(P, a, b)
    y = res.eqlin.marginals * cs
    f, g = y[:n], y[n:]
    red = C - f[:, None] - g[None, :]
    P = _centered(P, red, a, b, 1e-9 * cs)
    scale = 1.0 + float(np.abs(C).max())
    dual = max(0.0, float(-red.min())) / scale + abs(float(np.sum(P * red))) / scale
    plan = CouplingPlan(source, target, P, float(np.sum(P * C)), dual, (f, g))
    if plan.marginal_error() > MARGINAL_TOL:
        raise SolverFailure(f"marginals violated by {plan.marginal_error():.2e}")
    return plan


@dataclass
class TransportMap:
    """Deterministic map from a refinement of ``plan.source`` onto ``plan.target``."""

    plan: CouplingPlan
    refined: DiscreteSpace
    parent: np.ndarray
    assignment: np.ndarray
    pushforward_error: float

    @property
    def cost(self) -> float:
        C = cost_matrix(self.plan.source, self.plan.target)
        return math.fsum(self.refined.measure * C[self.parent, self.assignment])

    def pull(self, values: np.ndarray) -> np.ndarray:
        """``f o T`` on the refined source for ``f`` on the target."""
        return np.asarray(values)[self.assignment]

    def condexp(self, values: np.ndarray) -> np.ndarray:
        """Average of a refined-source function over the pieces of each source atom."""
        src = self.plan.source
        out = np.zeros(src.n)
        np.add.at(out, self.parent, self.refined.measure * np.asarray(values))
        return out / src.measure

    def transfer(self, values: np.ndarray) -> np.ndarray:
        """Target function carried to the unrefined source: ``condexp(pull(f))``."""
        return self.condexp(self.pull(values))


def plan_to_map(plan: CouplingPlan) -> TransportMap:
    """Split each source atom along its row of the plan.

    Atoms with a single positive entry keep their id; split atoms get the
    suffix ``#j`` for the target index ``j``.  The refined space carries the
    pseudometric pulled back from the source.
    """
    src = plan.source
    P = plan.plan
    parent, assign, mass, ids = [], [], [], []
    for i in range(src.n):
        js = np.flatnonzero(P[i] > 0)
        for j in js:
            parent.append(i)
            assign.append(j)
            mass.append(P[i, j])
            ids.append(src.ids[i] if js.size == 1 else f"{src.ids[i]}#{j}")
    parent = np.array(parent)
    assign = np.array(assign)
    mass = np.array(mass)
    mass.setflags(write=False)
    coords = src.coords[parent]
    dist = src.dist[np.ix_(parent, parent)]
    for a in (coords, dist):
        a.setflags(write=False)
    meta = {"family": "refined", "base": dict(src.meta)}
    refined = DiscreteSpace(tuple(ids), coords, dist, mass, (), meta)
    err = 0.0
    for j in range(plan.target.n):
        err = max(err, abs(math.fsum(mass[assign == j]) - plan.target.measure[j]))
    return TransportMap(plan, refined, parent, assign, err)


@dataclass
class Isometry:
    """Composition with a transport map: ``f -> f o T``.

    ``direction`` is ``"pi"`` (limit to approximant) or ``"sigma"``
    (approximant to limit); functions are taken on ``tmap.plan.target``.
    """

    direction: str
    tmap: TransportMap

    @property
    def domain(self) -> DiscreteSpace:
        return self.tmap.plan.target

    @property
    def codomain(self) -> DiscreteSpace:
        return self.tmap.refined


def apply_isometry(iso: Isometry, f: L2Function) -> L2Function:
    if f.space is not iso.domain:
        raise SpaceMismatch("function does not live on the domain of the isometry")
    return L2Function(iso.codomain, iso.tmap.pull(f.values))


def transport_pair(approx: DiscreteSpace, limit: DiscreteSpace) -> tuple:
    """``(pi, sigma)`` isometries between an approximant and the limit.

    ``pi`` pulls limit functions back to a refinement of ``approx``; ``sigma``
    pulls approximant functions back to a refinement of ``limit``.
    """
    pi = Isometry("pi", plan_to_map(solve_ot(approx, limit)))
    sigma = Isometry("sigma", plan_to_map(solve_ot(limit, approx)))
    return pi, sigma


# -- weak and strong convergence across spaces --------------------------------


@dataclass
class TestPanel:
    """Tent functions ``max(0, 1 - |z - c| / r)`` on a grid of centers."""

    centers: np.ndarray
    radii: np.ndarray

    def evaluate(self, coords: np.ndarray) -> np.ndarray:
        """Matrix ``(panel size, n)`` of test-function values."""
        D = ambient_distances(self.centers, coords)
        out = [np.maximum(0.0, 1.0 - D / r) for r in self.radii]
        return np.vstack(out)

    def describe(self) -> dict:
        return {
            "kind": "tent",
            "centers": int(self.centers.shape[0]),
            "radii": [float(r) for r in self.radii],
        }


def make_panel(spaces: Sequence[DiscreteSpace], per_dim: int = 4, fractions=(0.25, 0.5, 1.0)) -> TestPanel:
    """Panel over the common bounding box of ``spaces``."""
    dims = {s.dim for s in spaces}
    if len(dims) != 1:
        raise DimensionMismatch(f"spaces use ambient dimensions {sorted(dims)}")
    allc = np.vstack([s.coords for s in spaces])
    lo, hi = allc.min(axis=0), allc.max(axis=0)
    diag = float(np.linalg.norm(hi - lo)) or 1.0
    axes = [np.linspace(a, b, per_dim) if b > a else np.array([a]) for a, b in zip(lo, hi)]
    centers = np.array(list(itertools.product(*axes)))
    return TestPanel(centers, np.array(fractions) * diag)


@dataclass
class ConvergenceReport:
    gaps: np.ndarray
    norms: np.ndarray
    limit_norm: float
    weak: bool
    strong: Optional[bool]
    decreasing: bool
    panel: dict = field(default_factory=dict)

    @property
    def verdict(self) -> bool:
        return self.weak if self.strong is None else self.strong


def _trend(gaps, floor):
    tail = gaps[-3:]
    if np.all(tail <= floor):
        return True
    return bool(np.all(np.diff(tail) <= floor))


def check_l2_convergence(
    family: Sequence,
    limit,
    mode: str = "weak",
    panel: Optional[TestPanel] = None,
    tol: float = 0.05,
    floor: float = 1e-9,
    norm_slack: float = 1e-2,
) -> ConvergenceReport:
    """Numerical proxy for ``f_i m_i -> f m`` weakly, or strongly, in ``L^2``.

    Weak: the largest pairing gap with a tent panel decreases over the last
    three indices (up to ``floor``) and ends below ``tol``.  Strong also
    requires the tail norms to stay below ``|f| (1 + norm_slack)``.
    """
    if mode not in ("weak", "strong"):
        raise ValueError("mode must be 'weak' or 'strong'")
    X, f = limit
    f = f.values if isinstance(f, L2Function) else np.asarray(f, float)
    spaces = [s for s, _ in family] + [X]
    if panel is None:
        panel = make_panel(spaces)
    elif {s.dim for s in spaces} != {panel.centers.shape[1]}:
        raise DimensionMismatch("panel and spaces use different ambient dimensions")
    ref = panel.evaluate(X.coords) @ (X.measure * f)
    gaps, norms = [], []
    for S, fi in family:
        fi = fi.values if isinstance(fi, L2Function) else np.asarray(fi, float)
        pair = panel.evaluate(S.coords) @ (S.measure * fi)
        gaps.append(float(np.abs(pair - ref).max()))
        norms.append(math.sqrt(S.measure @ fi**2))
    gaps, norms = np.array(gaps), np.array(norms)
    fn = math.sqrt(X.measure @ f**2)
    dec = _trend(gaps, floor)
    weak = dec and gaps[-1] <= tol
    strong = None
    if mode == "strong":
        strong = weak and bool(np.all(norms[-3:] <= fn * (1 + norm_slack) + floor))
    return ConvergenceReport(gaps, norms, fn, weak, strong, dec, panel.describe())


def hausdorff_distance(A: Sequence, B: Sequence) -> float:
    """Hausdorff distance in ``L^2(m)`` between two finite sets of functions."""
    if len(A) == 0 or len(B) == 0:
        raise EmptySet("Hausdorff distance needs two nonempty sets")
    sp = A[0].space
    if any(f.space is not sp for f in itertools.chain(A, B)):
        raise SpaceMismatch("all functions must live on one space")
    m = sp.measure
    Xa = np.array([f.values for f in A]) * np.sqrt(m)
    Xb = np.array([f.values for f in B]) * np.sqrt(m)
    D = np.sqrt(((Xa[:, None, :] - Xb[None, :, :]) ** 2).sum(axis=2))
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))
