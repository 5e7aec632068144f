"""Small dense quadratic programs with exact active-set polishing.

The interior-point solvers in :mod:`cvxopt` find the active set; the final
iterate is then recomputed from the KKT system restricted to that set, which
brings primal and dual residuals down to rounding level.  A caller may pass
the active set of a previous, nearby problem; if it verifies, the interior
point solve is skipped altogether.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from cvxopt import matrix, solvers
from scipy.optimize import brentq, nnls

from .errors import SolverFailure

_OPTS = {"show_progress": False, "abstol": 1e-12, "reltol": 1e-12, "feastol": 1e-12, "maxiters": 200}


@dataclass
class QPResult:
    x: np.ndarray
    active: tuple
    mu: float = 0.0
    polished: bool = True


def _m(a):
    return matrix(np.ascontiguousarray(a, dtype=float))


def _kkt(P, q, G, h, A, b, S, mu=0.0, B=None):
    n = P.shape[0]
    H = P if mu == 0.0 else P + 2.0 * mu * (B.T @ B)
    rows = [G[list(S)]] if S else []
    rhs = [h[list(S)]] if S else []
    if A is not None and A.shape[0]:
        rows.append(A)
        rhs.append(b)
    C = np.vstack(rows) if rows else np.zeros((0, n))
    d = np.concatenate(rhs) if rhs else np.zeros(0)
    k = C.shape[0]
    K = np.block([[H, C.T], [C, np.zeros((k, k))]])
    r = np.concatenate([-q, d])
    z, *_ = np.linalg.lstsq(K, r, rcond=None)
    scale = 1.0 + np.abs(r).max(initial=0.0) + np.abs(K).max(initial=0.0) * np.abs(z).max(initial=0.0)
    if np.abs(K @ z - r).max(initial=0.0) > 1e-9 * scale:
        return None, None
    return z[:n], z[n : n + len(S)]


def _verify(x, y, G, h, scale, tol=1e-10, stat=None):
    if x is None:
        return False
    if G is not None and G.shape[0] and np.max(G @ x - h) > tol * scale:
        return False
    if y is None or len(y) == 0 or np.min(y) >= -tol * scale:
        return True
    return stat is not None and _nonnegative_multipliers(*stat, x, scale, tol)


def _nonnegative_multipliers(H, q, G, A, S, x, scale, tol):
    # degenerate active sets admit many multiplier vectors; least squares may
    # return one with negative entries although a nonnegative one exists
    grad = H @ x + q
    cols = [G[list(S)].T]
    if A is not None and A.shape[0]:
        cols += [A.T, -A.T]
    C = np.hstack(cols)
    _, res = nnls(C, -grad, maxiter=50 * C.shape[1])
    return res <= 1e-9 * scale


_THRESHOLDS = (1e-8, 1e-10, 1e-6, 1e-12)


def _active_sets(x, G, h, scale):
    # interior-point iterates leave nearly active constraints ambiguous, so
    # several slack thresholds are offered in turn
    if G is None or not G.shape[0]:
        return [()]
    slack = h - G @ x
    out = []
    for thr in _THRESHOLDS:
        S = tuple(int(i) for i in np.flatnonzero(slack <= thr * scale))
        if S not in out:
            out.append(S)
    return out


def solve_qp(P, q, G=None, h=None, A=None, b=None, active=None) -> QPResult:
    """Minimize ``x'Px/2 + q'x`` subject to ``Gx <= h`` and ``Ax = b``.

    ``P`` must be positive semidefinite and the problem bounded.
    """
    P = np.asarray(P, float)
    q = np.asarray(q, float)
    n = P.shape[0]
    if G is None:
        G, h = np.zeros((0, n)), np.zeros(0)
    scale = 1.0 + np.abs(q).max(initial=0.0) + np.abs(h).max(initial=0.0)
    if active is not None:
        x, y = _kkt(P, q, G, h, A, b, tuple(active))
        if _verify(x, y, G, h, scale, stat=(P, q, G, A, tuple(active))):
            return QPResult(x, tuple(active))
    if not G.shape[0] and A is None:
        x, _ = _kkt(P, q, G, h, A, b, ())
        if x is None:
            raise SolverFailure("unconstrained QP is unbounded or singular")
        return QPResult(x, ())
    args = [_m(P), _m(q[:, None])]
    args += [_m(G), _m(h[:, None])] if G.shape[0] else [None, None]
    if A is not None and A.shape[0]:
        args += [_m(A), _m(np.asarray(b, float)[:, None])]
    sol = solvers.qp(*args, options=_OPTS)
    x0 = np.array(sol["x"]).ravel()
    sets = _active_sets(x0, G, h, scale)
    for S in sets:
        x, y = _kkt(P, q, G, h, A, b, S)
        if _verify(x, y, G, h, scale, stat=(P, q, G, A, S)):
            return QPResult(x, S)
    S = sets[0]
    if sol["status"] != "optimal":
        raise SolverFailure(f"QP solver stopped with status {sol['status']!r}")
    return QPResult(x0, S, polished=False)


def solve_qp_ball(P, q, G, h, B, radius, active=None) -> QPResult:
    """As :func:`solve_qp` with the extra constraint ``||Bx|| <= radius``.

    The ball multiplier is found by a scalar root search on a fixed active set
    of the linear constraints; the cone solver is only used to discover that set.
    """
    P = np.asarray(P, float)
    q = np.asarray(q, float)
    n = P.shape[0]
    if G is None:
        G, h = np.zeros((0, n)), np.zeros(0)
    scale = 1.0 + np.abs(q).max(initial=0.0) + np.abs(h).max(initial=0.0)

    def attempt(S):
        x, y = _kkt(P, q, G, h, None, None, S)
        if x is not None and np.linalg.norm(B @ x) <= radius * (1 + 1e-14):
            return (x, 0.0) if _verify(x, y, G, h, scale, stat=(P, q, G, None, S)) else None

        def excess(mu):
            x, _ = _kkt(P, q, G, h, None, None, S, mu, B)
            return np.inf if x is None else np.linalg.norm(B @ x) - radius

        hi = 1.0
        while excess(hi) > 0:
            hi *= 4.0
            if hi > 1e16:
                return None
        if not np.isfinite(excess(0.0)):
            return None
        mu = brentq(excess, 0.0, hi, xtol=1e-15 * hi, rtol=1e-15, maxiter=200)
        x, y = _kkt(P, q, G, h, None, None, S, mu, B)
        if _verify(x, y, G, h, scale, stat=(P + 2.0 * mu * (B.T @ B), q, G, None, S)):
            return x, mu
        return None

    if active is not None:
        got = attempt(tuple(active))
        if got is not None:
            return QPResult(got[0], tuple(active), got[1])
    k = B.shape[0]
    Gc = np.vstack([G, np.zeros((1, n)), -B])
    hc = np.concatenate([h, [radius], np.zeros(k)])
    dims = {"l": G.shape[0], "q": [k + 1], "s": []}
    sol = solvers.coneqp(_m(P), _m(q[:, None]), _m(Gc), _m(hc[:, None]), dims, options=_OPTS)
    x0 = np.array(sol["x"]).ravel()
    sets = _active_sets(x0, G, h, scale)
    for S in sets:
        got = attempt(S)
        if got is not None:
            return QPResult(got[0], S, got[1])
    S = sets[0]
    if sol["status"] != "optimal":
        raise SolverFailure(f"cone solver stopped with status {sol['status']!r}")
    return QPResult(x0, S, float(np.array(sol["z"]).ravel()[G.shape[0]]), polished=False)
