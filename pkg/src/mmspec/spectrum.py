"""Min-max values over subspace spheres and the quadratic oracle.

For a ``k``-dimensional subspace ``L`` the unit sphere ``S(L)`` has genus ``k``,
so

    Lambda_k = inf over k-frames of  sup{Ch(v) : v in S(span frame)}

bounds the min-max eigenvalue ``lambda_k`` from above.  For quadratic
energies both coincide with the ``k``-th eigenvalue of ``A u = lam M u``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh

from .energy import EnergyForm, as_quadratic, default_lq
from .errors import InvalidK, NotOrthonormal, NotQuadratic

ORTHO_TOL = 1e-10
GRID_DEG = 1.0


def _gram(E: EnergyForm, B: np.ndarray) -> np.ndarray:
    return B.T @ (E.space.measure[:, None] * B)


def orthonormalize(E: EnergyForm, B: np.ndarray) -> np.ndarray:
    """``m``-orthonormal basis of the column span of ``B`` (same column order)."""
    m = E.space.measure
    Q, _ = np.linalg.qr(np.sqrt(m)[:, None] * B)
    Q = Q / np.sqrt(m)[:, None]
    return Q


def check_orthonormal(E: EnergyForm, B: np.ndarray):
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or B.shape[0] != E.space.n or B.shape[1] < 1:
        raise NotOrthonormal("basis must be an n x k array with k >= 1")
    err = np.abs(_gram(E, B) - np.eye(B.shape[1])).max()
    if err > ORTHO_TOL:
        raise NotOrthonormal(f"Gram matrix deviates from the identity by {err:.2e}")
    return B


# -- inner maximization -------------------------------------------------------


@dataclass
class InnerMax:
    """Lower bounds for ``sup Ch`` on a subspace sphere and where they are attained."""

    value: float
    maximizer: np.ndarray
    certified: bool
    ascent_value: float
    grid_value: float = math.nan
    grid_step_deg: float = math.nan


def _sphere_grid(k: int, step_deg: float) -> np.ndarray:
    """Unit vectors of ``R^k`` covering a half sphere at angular step ``step_deg``."""
    h = math.radians(step_deg)
    if k == 1:
        return np.ones((1, 1))
    if k == 2:
        t = np.arange(0.0, math.pi, h)
        return np.vstack([np.cos(t), np.sin(t)])
    polar = np.arange(0.0, math.pi / 2 + h / 2, h)
    cols = []
    for p in polar:
        count = max(1, int(math.ceil(2 * math.pi * math.sin(p) / h)))
        az = np.arange(count) * (2 * math.pi / count)
        cols.append(np.vstack([np.sin(p) * np.cos(az), np.sin(p) * np.sin(az), np.full(count, math.cos(p))]))
    return np.hstack(cols)


def _ascent(E: EnergyForm, B: np.ndarray, C: np.ndarray, iters: int = 200, rtol: float = 1e-13):
    """Power ascent ``c <- normalize(B' grad Ch(Bc))`` for each column of ``C``.

    Monotone for convex 2-homogeneous energies.
    """
    C = C / np.linalg.norm(C, axis=0)
    val = np.atleast_1d(E.energy(B @ C))
    for _ in range(iters):
        G = B.T @ E.some_subgradient(B @ C)
        nrm = np.linalg.norm(G, axis=0)
        ok = nrm > 0
        Cn = np.where(ok, G / np.where(ok, nrm, 1.0), C)
        vn = np.atleast_1d(E.energy(B @ Cn))
        better = vn > val
        C = np.where(better, Cn, C)
        done = np.all(vn - val <= rtol * (1 + np.abs(val)))
        val = np.maximum(val, vn)
        if done:
            break
    return val, C


def rayleigh_sup_on_sphere(
    E: EnergyForm,
    basis,
    starts: int = 32,
    rng: Optional[np.random.Generator] = None,
    grid: bool = True,
    init: Optional[np.ndarray] = None,
) -> InnerMax:
    """``sup{Ch(v) : v in S(span basis)}`` for an ``m``-orthonormal basis.

    Quadratic energies are handled exactly through the restricted form.
    Otherwise a multistart power ascent runs, and for ``k <= 3`` a deterministic
    grid of step ``1`` degree is evaluated and used to restart the ascent; the
    result is then marked certified to that grid.
    """
    B = check_orthonormal(E, basis)
    k = B.shape[1]
    if E.is_quadratic:
        A, _ = E.matrices()
        lam, Y = np.linalg.eigh(B.T @ A @ B)
        c = Y[:, -1]
        return InnerMax(float(max(lam[-1], 0.0)), B @ c, True, float(lam[-1]))
    rng = np.random.default_rng(0) if rng is None else rng
    C0 = rng.standard_normal((k, starts))
    if init is not None:
        C0 = np.hstack([np.asarray(init, float).reshape(k, -1), C0])
    val, C = _ascent(E, B, C0)
    j = int(np.argmax(val))
    best_val, best_c = float(val[j]), C[:, j]
    ascent_val = best_val
    gval, step = math.nan, math.nan
    certified = False
    if grid and k <= 3:
        Gd = _sphere_grid(k, GRID_DEG)
        gv = np.atleast_1d(E.energy(B @ Gd))
        gval, step = float(gv.max()), GRID_DEG
        top = Gd[:, np.argsort(gv)[-4:]]
        v2, C2 = _ascent(E, B, top)
        i = int(np.argmax(v2))
        if v2[i] > best_val:
            best_val, best_c = float(v2[i]), C2[:, i]
        certified = True
    return InnerMax(best_val, B @ best_c, certified, ascent_val, gval, step)


# -- outer minimization -------------------------------------------------------


@dataclass
class MinMaxResult:
    value: float
    basis: Optional[np.ndarray]
    exact: bool
    inner_max_certified: bool
    maximizer: Optional[np.ndarray] = None
    restarts: int = 0


def _lobpcg(A, M, k, rng, tol=1e-12, maxiter=500, extra=2):
    """Block preconditioned descent for the ``k`` smallest pencil eigenvalues.

    Minimizes the Rayleigh trace over ``m``-orthonormal frames by Rayleigh-Ritz
    on the span of the frame, its preconditioned residuals and the previous
    search directions.
    """
    n = A.shape[0]
    b = min(n, k + extra)
    d = np.diag(M)
    X = rng.standard_normal((n, b))
    X[:, 0] = 1.0
    sigma = 1e-3 * (1 + np.abs(A).max() / d.min())
    pre = cho_factor(A + sigma * M)
    P = None

    def ortho(S):
        G = S.T @ M @ S
        w, V = np.linalg.eigh((G + G.T) / 2)
        keep = w > 1e-13 * w.max()
        return S @ (V[:, keep] / np.sqrt(w[keep]))

    def ritz(S):
        Z = ortho(S)
        H = Z.T @ A @ Z
        th, Y = np.linalg.eigh((H + H.T) / 2)
        return th, Z @ Y

    th, V = ritz(X)
    X, th = V[:, :b], th[:b]
    scale = 1.0 + abs(th).max()
    for _ in range(maxiter):
        R = A @ X - (M @ X) * th
        rn = np.sqrt(np.sum(R * R / d[:, None], axis=0))
        if rn[:k].max() <= tol * scale:
            break
        W = cho_solve(pre, R)
        S = np.hstack([X, W] + ([P] if P is not None else []))
        th_all, V = ritz(S)
        Xn = V[:, :b]
        P = Xn - X @ (X.T @ M @ Xn)
        X, th = Xn, th_all[:b]
        scale = 1.0 + abs(th).max()
    return th[:k], X[:, :k]


def _frame_value(E, Q, rng, starts, grid, init=None):
    return rayleigh_sup_on_sphere(E, Q, starts=starts, rng=rng, grid=grid, init=init)


def _descend(E: EnergyForm, Q: np.ndarray, rng, iters: int, starts: int):
    """Frame descent on ``Q -> sup Ch(S(span Q))`` with backtracking steps."""
    m = E.space.measure
    inner = _frame_value(E, Q, rng, starts, grid=False)
    c = Q.T @ (m * inner.maximizer)
    eta = 1.0 / (1.0 + inner.value)
    for _ in range(iters):
        xi = E.some_subgradient(inner.maximizer) / m
        G = 2.0 * np.outer(xi, c)
        G = G - Q @ (Q.T @ (m[:, None] * G))
        gn = math.sqrt(np.sum(m[:, None] * G * G))
        if gn <= 1e-12 * (1 + inner.value):
            break
        improved = False
        for _ in range(30):
            Qn = orthonormalize(E, Q - eta * G)
            cand = _frame_value(E, Qn, rng, max(4, starts // 4), grid=False, init=Qn.T @ (m * inner.maximizer))
            if cand.value < inner.value * (1 - 1e-12) - 1e-15:
                Q, inner, improved = Qn, cand, True
                c = Q.T @ (m * inner.maximizer)
                eta *= 1.5
                break
            eta *= 0.5
        if not improved:
            break
    return Q, inner


def minmax_upper_bound(
    E: EnergyForm,
    k: int,
    budget: int = 16,
    seed: int = 0,
    iters: int = 60,
    starts: int = 32,
    init: Optional[Sequence[np.ndarray]] = None,
) -> MinMaxResult:
    """Upper bound ``Lambda_k`` on the ``k``-th min-max value and a realizing frame.

    Quadratic energies: exact, from a block preconditioned descent of the
    Rayleigh trace.  Other energies: descent over ``m``-orthonormal frames
    from a seed frame (the eigenvectors of the ``q = 2`` companion energy)
    and ``budget`` random restarts; the best frame is re-evaluated with the
    certified inner maximization.
    """
    n = E.space.n
    if int(k) != k or k < 1:
        raise InvalidK(f"k must be a positive integer, got {k}")
    if k > n:
        if n == 1:
            return MinMaxResult(math.inf, None, True, True)
        raise InvalidK(f"k = {k} exceeds the dimension {n}")
    rng = np.random.default_rng(seed)
    if k == 1:
        Q = np.ones((n, 1))
        val = rayleigh_sup_on_sphere(E, Q, rng=rng)
        return MinMaxResult(val.value, Q, True, True, val.maximizer)
    if E.is_quadratic:
        A, M = E.matrices()
        _, X = _lobpcg(A, M, k, rng)
        Q = orthonormalize(E, X)
        val = rayleigh_sup_on_sphere(E, Q)
        return MinMaxResult(val.value, Q, True, True, val.maximizer)
    frames = []
    if init is not None:
        frames.extend(orthonormalize(E, np.asarray(f, float)) for f in init)
    companion = default_lq(E.space, 2.0) if E.space.graph else None
    if companion is not None and companion.w.size:
        frames.append(orthonormalize(E, companion.eigh()[1][:, :k]))
    for _ in range(budget):
        R = rng.standard_normal((n, k))
        R[:, 0] = 1.0
        frames.append(orthonormalize(E, R))
    best = None
    for Q in frames:
        Q, inner = _descend(E, Q, rng, iters, starts)
        if best is None or inner.value < best[1].value:
            best = (Q, inner)
    Q = best[0]
    final = rayleigh_sup_on_sphere(E, Q, starts=starts, rng=rng, grid=True, init=Q.T @ (E.space.measure * best[1].maximizer))
    return MinMaxResult(final.value, Q, False, final.certified, final.maximizer, len(frames))


# -- oracle and reports -------------------------------------------------------


@dataclass
class Oracle:
    values: np.ndarray
    basis: np.ndarray
    residual: float


def quadratic_oracle(E: EnergyForm) -> Oracle:
    """All eigenvalues and an ``m``-orthonormal eigenbasis from a dense solve."""
    if not E.is_quadratic:
        raise NotQuadratic(f"{E!r} is not a quadratic form")
    Eq = as_quadratic(E)
    A, M = Eq.matrices()
    lam, V = eigh(A, M)
    lam = np.where(np.abs(lam) < 1e-12 * (1 + abs(lam[-1])), 0.0, lam)
    R = A @ V - (M @ V) * lam
    res = float(np.abs(R).max() / (1 + np.abs(A).max()))
    return Oracle(lam, V, res)


@dataclass
class SpectrumRow:
    k: int
    lambda_upper: float
    exact_flag: bool
    inner_max_certified: bool
    residual_of_matched_eigenpair: float
    matched_value: float = math.nan
    basis: Optional[np.ndarray] = field(default=None, repr=False)


def _backward_pass(E, rows, results, rng, starts):
    # a (k+1)-frame contains k-frames whose sphere lies inside its own
    for i in range(len(results) - 2, 0, -1):
        big = results[i + 1]
        if big.basis is None or results[i].exact:
            continue
        for drop in range(big.basis.shape[1]):
            Q = np.delete(big.basis, drop, axis=1)
            val = rayleigh_sup_on_sphere(E, Q, starts=starts, rng=rng)
            if val.value < results[i].value:
                results[i] = MinMaxResult(val.value, Q, False, val.certified, val.maximizer, results[i].restarts)


def spectrum_report(
    E: EnergyForm,
    k_max: int,
    budget: int = 16,
    seed: int = 0,
    match: bool = True,
    jobs: int = 1,
) -> list:
    """``Lambda_k`` for ``k = 1..k_max`` with the eigenpair the sphere flow reaches from each maximizer."""
    from .sphere import NoConvergence, find_eigenpair

    n = E.space.n
    ks = list(range(1, k_max + 1))

    def one(k):
        return minmax_upper_bound(E, k, budget=budget, seed=seed + k)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(one, ks))
    else:
        results = [one(k) for k in ks]
    results = [None] + results
    if not E.is_quadratic:
        _backward_pass(E, None, results, np.random.default_rng(seed), 32)
    rows = []
    for k in ks:
        r = results[k]
        res, mval = math.nan, math.nan
        if match and r.maximizer is not None and math.isfinite(r.value):
            u = r.maximizer / math.sqrt(E.space.measure @ r.maximizer**2)
            deflate = [np.ones(n)] if k > 1 and E.is_connected() else None
            try:
                pair = find_eigenpair(E, u, deflate=deflate)
            except NoConvergence as exc:
                pair = exc.best
            except ValueError:
                pair = None
            if pair is not None:
                res, mval = pair.residual, pair.value
        rows.append(SpectrumRow(k, r.value, r.exact, r.inner_max_certified, res, mval, r.basis))
    return rows


@dataclass
class DivergenceReport:
    values: list
    nondecreasing: bool
    finite_up_to_n: bool
    doubling_ok: bool
    ratios: list

    @property
    def ok(self) -> bool:
        return self.nondecreasing and self.finite_up_to_n and self.doubling_ok


def divergence_check(E: EnergyForm, k_max: int, budget: int = 8, seed: int = 0) -> DivergenceReport:
    """Growth of ``Lambda_k``: monotone, finite for ``k <= n`` and ``Lambda_k >= Lambda_ceil(k/2)``."""
    n = E.space.n
    vals = []
    for k in range(1, k_max + 1):
        if k > n:
            vals.append(math.inf)
        else:
            vals.append(minmax_upper_bound(E, k, budget=budget, seed=seed + k).value)
    tol = 1e-9
    mono = all(b >= a - tol * (1 + abs(a)) for a, b in zip(vals, vals[1:]) if math.isfinite(a))
    finite = all(math.isfinite(v) for v in vals[: min(n, k_max)])
    ratios, dbl = [], True
    for k in range(2, k_max + 1):
        a, b = vals[(k + 1) // 2 - 1], vals[k - 1]
        dbl &= b >= a - tol * (1 + abs(a))
        ratios.append(b / a if a > 0 else math.inf)
    return DivergenceReport(vals, mono, finite, dbl, ratios)
