"""Even, convex, 2-homogeneous Dirichlet energies on finite spaces.

Two kinds are supported.

``quadratic``
    ``Ch(u) = sum_e w_e (u(y) - u(x))**2`` over undirected edges, i.e. ``u'Au``.
``lq``
    ``Ch(u) = sum_x m(x) N_x(u)**2`` with the local norm
    ``N_x(u) = (sum_y w_xy |u(y) - u(x)|**q)**(1/q)`` over directed neighbour
    pairs, and ``N_x(u) = max_y w_xy |u(y) - u(x)|`` for ``q = inf``.

The Laplacian returned by :func:`laplacian` is the element of least
``L^2(m)`` norm in the subdifferential of ``Ch/2``.  For ``q`` in ``(1, inf)``
the energy is differentiable and that element is the gradient; for the
polyhedral exponents ``q = 1`` and ``q = inf`` it is the solution of a small
quadratic program over the subdifferential polytope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Optional

import numpy as np
from scipy.sparse.csgraph import connected_components

from . import qp
from .errors import InvalidParameter, OutsideDomain, SolverFailure, SpaceMismatch, ValidationError
from .space import DiscreteSpace, L2Function

# relative tolerance for treating two local slopes as tied
ACTIVE_TOL = 1e-10


def _vals(E: "EnergyForm", u) -> np.ndarray:
    if isinstance(u, L2Function):
        if u.space is not E.space:
            raise SpaceMismatch("function and energy live on different spaces")
        return u.values
    u = np.asarray(u, dtype=float)
    if u.shape[0] != E.space.n:
        raise SpaceMismatch(f"{u.shape[0]} values for a space of {E.space.n} points")
    return u


class EnergyForm:
    """A Dirichlet energy on a :class:`~mmspec.space.DiscreteSpace`.

    Parameters
    ----------
    space : DiscreteSpace
    kind : {"quadratic", "lq"}
    src, dst : array_like of int
        Edge endpoints.  Undirected for the quadratic kind; for ``lq`` the pair
        ``(x, y)`` enters the local norm at ``x``.
    weights : array_like of float
        Nonnegative edge weights.
    q : float
        Exponent of the ``lq`` kind, ``1 <= q <= inf``.
    """

    def __init__(self, space: DiscreteSpace, kind: str, src, dst, weights, q: float = 2.0):
        if kind not in ("quadratic", "lq"):
            raise InvalidParameter(f"unknown energy kind {kind!r}")
        q = float(q)
        if kind == "lq" and not q >= 1:
            raise InvalidParameter("exponent q must satisfy 1 <= q <= inf")
        src = np.asarray(src, dtype=int).reshape(-1)
        dst = np.asarray(dst, dtype=int).reshape(-1)
        w = np.asarray(weights, dtype=float).reshape(-1)
        if not (src.shape == dst.shape == w.shape):
            raise ValidationError("edge arrays differ in length")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValidationError("edge weights must be finite and nonnegative")
        if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= space.n):
            raise ValidationError("edge endpoint out of range")
        self.space = space
        self.kind = kind
        self.q = q if kind == "lq" else 2.0
        self.src, self.dst, self.w = src, dst, w
        for a in (src, dst, w):
            a.setflags(write=False)
        self._cache: dict = {}

    # -- descriptors ---------------------------------------------------------

    @property
    def is_quadratic(self) -> bool:
        """True when ``Ch`` is a quadratic form (quadratic kind or ``q = 2``)."""
        return self.kind == "quadratic" or self.q == 2.0

    @property
    def is_polyhedral(self) -> bool:
        return self.kind == "lq" and self.q in (1.0, math.inf)

    def __repr__(self):
        tag = "quadratic" if self.kind == "quadratic" else f"lq(q={self.q:g})"
        return f"EnergyForm({tag}, n={self.space.n}, edges={self.w.size})"

    def scaled(self, c: float) -> "EnergyForm":
        """The energy ``c * Ch`` for ``c > 0``."""
        if not c > 0:
            raise InvalidParameter("scale factor must be positive")
        if self.kind == "quadratic":
            f = c
        elif self.q == math.inf:
            f = math.sqrt(c)
        else:
            f = c ** (self.q / 2)
        return EnergyForm(self.space, self.kind, self.src, self.dst, self.w * f, self.q)

    def is_connected(self) -> bool:
        return n_components(self) == 1

    # -- evaluation ----------------------------------------------------------

    def local_norms(self, u) -> np.ndarray:
        """Local norms ``N_x`` of the ``lq`` kind, one row per point."""
        u = _vals(self, u)
        d = np.abs(u[self.dst] - u[self.src])
        wd = self.w.reshape((-1,) + (1,) * (u.ndim - 1))
        out = np.zeros((self.space.n,) + u.shape[1:])
        if self.q == math.inf:
            np.maximum.at(out, self.src, wd * d)
            return out
        np.add.at(out, self.src, wd * d**self.q)
        return out ** (1.0 / self.q)

    def energy(self, u) -> np.ndarray | float:
        """``Ch(u)``; a column-stacked array gives one value per column."""
        u = _vals(self, u)
        if self.kind == "quadratic":
            d = u[self.dst] - u[self.src]
            wd = self.w.reshape((-1,) + (1,) * (u.ndim - 1))
            val = np.sum(wd * d * d, axis=0)
        else:
            m = self.space.measure.reshape((-1,) + (1,) * (u.ndim - 1))
            val = np.sum(m * self.local_norms(u) ** 2, axis=0)
        return float(val) if np.ndim(val) == 0 else val

    def smooth_gradient(self, u) -> np.ndarray:
        """Euclidean gradient of ``Ch/2`` for the differentiable kinds."""
        u = _vals(self, u)
        if self.is_polyhedral:
            raise SolverFailure("polyhedral energies have no gradient")
        d = u[self.dst] - u[self.src]
        shape = (-1,) + (1,) * (u.ndim - 1)
        if self.kind == "quadratic":
            c = self.w.reshape(shape) * d
        elif self.q == 2.0:
            c = (self.space.measure[self.src] * self.w).reshape(shape) * d
        else:
            N = self.local_norms(u)
            Ns = N[self.src]
            safe = np.where(Ns > 0, Ns, 1.0)
            ratio = np.where(Ns > 0, np.abs(d) / safe, 0.0)
            c = (self.space.measure[self.src]).reshape(shape) * Ns * self.w.reshape(shape)
            c = c * ratio ** (self.q - 1) * np.sign(d)
        g = np.zeros(u.shape)
        np.add.at(g, self.dst, c)
        np.add.at(g, self.src, -c)
        return g

    # -- quadratic structure -------------------------------------------------

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """Stiffness ``A`` and mass ``M`` with ``Ch(u) = u'Au`` (quadratic forms only)."""
        if not self.is_quadratic:
            from .errors import NotQuadratic

            raise NotQuadratic(f"{self!r} is not a quadratic form")
        if "AM" not in self._cache:
            n = self.space.n
            A = np.zeros((n, n))
            w = self.w if self.kind == "quadratic" else self.w * self.space.measure[self.src]
            np.add.at(A, (self.src, self.src), w)
            np.add.at(A, (self.dst, self.dst), w)
            np.add.at(A, (self.src, self.dst), -w)
            np.add.at(A, (self.dst, self.src), -w)
            self._cache["AM"] = (A, np.diag(self.space.measure))
        return self._cache["AM"]

    def eigh(self) -> tuple[np.ndarray, np.ndarray]:
        """Generalized eigendecomposition ``A phi = lam M phi``, ``phi' M phi = I``."""
        if "eigh" not in self._cache:
            from scipy.linalg import eigh

            A, M = self.matrices()
            lam, phi = eigh(A, M)
            lam = np.where(np.abs(lam) < 1e-13 * (1 + abs(lam[-1])), 0.0, lam)
            self._cache["eigh"] = (lam, phi)
        return self._cache["eigh"]

    # -- polyhedral structure ------------------------------------------------

    def _vertex_rows(self):
        """Extreme points of the unit subdifferential balls of the local norms.

        Returns ``(owner, rows)``: ``rows[k]`` is a vertex of ``dN_x`` for
        ``x = owner[k]`` (q = inf), or the signed edge functional of one
        directed pair (q = 1).
        """
        if "vrows" not in self._cache:
            n, k = self.space.n, self.w.size
            R = np.zeros((k, n))
            np.add.at(R, (np.arange(k), self.dst), self.w)
            np.add.at(R, (np.arange(k), self.src), -self.w)
            self._cache["vrows"] = (self.src.copy(), R)
        return self._cache["vrows"]

    def lifted_program(self):
        """Linear description of the epigraphs of the local norms.

        Variables are ``(v, t, s)`` where ``t_x >= N_x(v)``; ``s`` holds one
        auxiliary per directed pair for ``q = 1``.  Returns ``(G, nz)`` with
        ``G @ (v, t, s) <= 0`` and ``nz`` the count of ``t`` and ``s`` variables.
        """
        if "lifted" not in self._cache:
            n = self.space.n
            owner, R = self._vertex_rows()
            k = R.shape[0]
            if self.q == math.inf:
                T = np.zeros((k, n))
                T[np.arange(k), owner] = -1.0
                G = np.vstack([np.hstack([R, T]), np.hstack([-R, T])])
                nz = n
            else:
                E = R / np.where(self.w > 0, self.w, 1.0)[:, None]
                S = -np.eye(k)
                top = np.hstack([E, np.zeros((k, n)), S])
                mid = np.hstack([-E, np.zeros((k, n)), S])
                W = np.zeros((n, k))
                W[owner, np.arange(k)] = self.w
                bot = np.hstack([np.zeros((n, n)), -np.eye(n), W])
                G = np.vstack([top, mid, bot])
                nz = n + k
            self._cache["lifted"] = (G, nz)
        return self._cache["lifted"]

    def subdifferential(self, u, tol: float = ACTIVE_TOL):
        """Describe ``d(Ch/2)(u)`` in Euclidean coordinates.

        Returns ``(g0, blocks)``: every subgradient is ``g0 + sum_b B_b a_b``
        where ``blocks`` holds ``(B_b, kind_b)`` with ``a_b`` ranging over the
        probability simplex (``"simplex"``) or the cube ``[-1, 1]^k`` (``"box"``).
        """
        u = _vals(self, u)
        if not self.is_polyhedral:
            return self.smooth_gradient(u), []
        n = self.space.n
        m = self.space.measure
        owner, R = self._vertex_rows()
        N = self.local_norms(u)
        lin = R @ u
        scale = tol * max(1.0, float(np.max(np.abs(lin), initial=0.0)))
        g0 = np.zeros(n)
        blocks = []
        for x in range(n):
            if N[x] <= scale:
                continue
            rows = np.flatnonzero(owner == x)
            c = m[x] * N[x]
            if self.q == math.inf:
                act = rows[np.abs(lin[rows]) >= N[x] - scale]
                V = (np.sign(lin[act])[:, None] * R[act]).T * c
                if V.shape[1] == 1:
                    g0 += V[:, 0]
                else:
                    blocks.append((V, "simplex"))
            else:
                flat = np.abs(lin[rows]) <= scale
                g0 += c * (np.sign(lin[rows[~flat]]) @ R[rows[~flat]])
                if flat.any():
                    blocks.append((c * R[rows[flat]].T, "box"))
        return g0, blocks

    def some_subgradient(self, U) -> np.ndarray:
        """One Euclidean element of ``d(Ch/2)`` per column of ``U`` (cheap, not least-norm)."""
        U = _vals(self, U)
        if not self.is_polyhedral:
            return self.smooth_gradient(U)
        owner, R = self._vertex_rows()
        lin = R @ U
        N = self.local_norms(U)
        coef = (self.space.measure[:, None] * N if U.ndim > 1 else self.space.measure * N)[owner]
        if self.q == math.inf:
            # keep one maximizing pair per owner
            pick = np.zeros(lin.shape, dtype=bool)
            mag = np.abs(lin)
            for x in np.unique(owner):
                rows = np.flatnonzero(owner == x)
                best = rows[np.argmax(mag[rows], axis=0)]
                if U.ndim > 1:
                    pick[best, np.arange(U.shape[1])] = True
                else:
                    pick[best] = True
            coef = np.where(pick, coef, 0.0)
        return R.T @ (coef * np.sign(lin))

    def nearest_subgradient(self, u, target=None, tol: float = ACTIVE_TOL) -> np.ndarray:
        """Element of ``d(Ch/2)(u)`` closest in ``L^2(m)`` to ``target`` (default 0).

        Returned as an ``L^2(m)`` representative, i.e. ``M^{-1} g``.
        """
        u = _vals(self, u)
        m = self.space.measure
        g0, blocks = self.subdifferential(u, tol)
        if target is not None:
            g0 = g0 - m * np.asarray(target, dtype=float)
        if blocks:
            B = np.hstack([b for b, _ in blocks])
            Bm = B / np.sqrt(m)[:, None]
            gm = g0 / np.sqrt(m)
            P = Bm.T @ Bm
            qv = Bm.T @ gm
            G, h, A, b = _block_constraints(blocks)
            res = qp.solve_qp(P, qv, G, h, A, b)
            g0 = g0 + B @ res.x
        xi = g0 / m
        if target is not None:
            xi = xi + np.asarray(target, dtype=float)
        return xi

    def linearization(self, u, tol: float):
        """Local quadratic model of ``Ch`` on the stratum of ``u``.

        Returns ``(Q, C)``: on ``{v : C v = 0}`` near ``u`` the energy equals
        ``v'Qv`` (polyhedral kinds), with ties and vanishing local norms turned
        into the linear constraints ``C``.
        """
        u = _vals(self, u)
        n = self.space.n
        m = self.space.measure
        if not self.is_polyhedral:
            raise InvalidParameter("linearization applies to polyhedral energies")
        owner, R = self._vertex_rows()
        N = self.local_norms(u)
        lin = R @ u
        scale = tol * max(1.0, float(np.max(np.abs(lin), initial=0.0)))
        Q = np.zeros((n, n))
        cons = []
        for x in range(n):
            rows = np.flatnonzero(owner == x)
            if rows.size == 0:
                continue
            if N[x] <= scale:
                cons.extend(R[rows])
                continue
            if self.q == math.inf:
                act = rows[np.abs(lin[rows]) >= N[x] - scale]
                a = np.sign(lin[act])[:, None] * R[act]
                a0 = a[0]
                cons.extend(a[1:] - a0)
            else:
                flat = np.abs(lin[rows]) <= scale
                a0 = np.sign(lin[rows[~flat]]) @ R[rows[~flat]]
                cons.extend(R[rows[flat]])
            Q += m[x] * np.outer(a0, a0)
        C = np.array(cons) if cons else np.zeros((0, n))
        return Q, C


def _block_constraints(blocks):
    sizes = [b.shape[1] for b, _ in blocks]
    k = sum(sizes)
    G_rows, h_rows, A_rows = [], [], []
    off = 0
    for (b, kind), s in zip(blocks, sizes):
        idx = np.arange(off, off + s)
        if kind == "simplex":
            G = np.zeros((s, k))
            G[np.arange(s), idx] = -1.0
            G_rows.append(G)
            h_rows.append(np.zeros(s))
            a = np.zeros(k)
            a[idx] = 1.0
            A_rows.append(a)
        else:
            G = np.zeros((2 * s, k))
            G[np.arange(s), idx] = 1.0
            G[s + np.arange(s), idx] = -1.0
            G_rows.append(G)
            h_rows.append(np.ones(2 * s))
        off += s
    A = np.array(A_rows) if A_rows else None
    b = np.ones(len(A_rows)) if A_rows else None
    return np.vstack(G_rows), np.concatenate(h_rows), A, b


# -- constructors -------------------------------------------------------------


def quadratic_energy(space: DiscreteSpace, edges) -> EnergyForm:
    """Quadratic energy from ``(i, j, w)`` index triples."""
    edges = list(edges)
    if not edges:
        return EnergyForm(space, "quadratic", [], [], [])
    i, j, w = zip(*edges)
    return EnergyForm(space, "quadratic", i, j, w)


def lq_energy(space: DiscreteSpace, q: float, pairs) -> EnergyForm:
    """``lq`` energy from directed ``(x, y, w_xy)`` index triples."""
    pairs = list(pairs)
    if not pairs:
        return EnergyForm(space, "lq", [], [], [], q)
    x, y, w = zip(*pairs)
    return EnergyForm(space, "lq", x, y, w, q)


def default_quadratic(space: DiscreteSpace) -> EnergyForm:
    """Quadratic energy on the neighbour graph with ``w = mbar / d**2``.

    ``mbar`` is the mean mass of the two endpoints; for a uniform cycle this
    reproduces the circulant spectrum ``2 n**2 (1 - cos(2 pi j / n))``.
    """
    m, D = space.measure, space.dist
    edges = [(i, j, 0.5 * (m[i] + m[j]) / D[i, j] ** 2) for i, j in space.graph]
    return quadratic_energy(space, edges)


def default_lq(space: DiscreteSpace, q: float) -> EnergyForm:
    """``lq`` energy on the neighbour graph built from difference quotients.

    ``w_xy = 1 / (deg(x) d_xy**q)`` for finite ``q`` and ``w_xy = 1 / d_xy`` for
    ``q = inf``, so that ``N_x`` approximates ``|grad u|`` for smooth data.
    """
    q = float(q)
    deg = np.zeros(space.n)
    for i, j in space.graph:
        deg[i] += 1
        deg[j] += 1
    pairs = []
    for i, j in space.graph:
        d = space.dist[i, j]
        for x, y in ((i, j), (j, i)):
            w = 1.0 / d if q == math.inf else 1.0 / (deg[x] * d**q)
            pairs.append((x, y, w))
    return lq_energy(space, q, pairs)


def n_components(E: EnergyForm) -> int:
    from scipy.sparse import coo_matrix

    n = E.space.n
    keep = E.w > 0
    adj = coo_matrix((np.ones(keep.sum()), (E.src[keep], E.dst[keep])), shape=(n, n))
    return int(connected_components(adj, directed=False)[0])


def as_quadratic(E: EnergyForm) -> EnergyForm:
    """The quadratic-kind energy equal to a ``q = 2`` ``lq`` energy."""
    if E.kind == "quadratic":
        return E
    if E.q != 2.0:
        from .errors import NotQuadratic

        raise NotQuadratic(f"{E!r} is not a quadratic form")
    return EnergyForm(E.space, "quadratic", E.src, E.dst, E.w * E.space.measure[E.src])


# -- operations ---------------------------------------------------------------


def eval_energy(E: EnergyForm, u) -> float:
    """Value of the energy at ``u``.

    Examples
    --------
    >>> from mmspec.space import make_space
    >>> X = make_space("ab", [0.0, 1.0], "ambient", [0.5, 0.5])
    >>> eval_energy(quadratic_energy(X, [(0, 1, 1.0)]), [1.0, -1.0])
    4.0
    """
    return float(E.energy(_vals(E, u)))


def laplacian(E: EnergyForm, u) -> L2Function:
    """``-Delta u``: the least-norm element of ``d(Ch/2)(u)`` in ``L^2(m)``."""
    vals = _vals(E, u)
    if E.is_polyhedral:
        xi = E.nearest_subgradient(vals)
    else:
        xi = E.smooth_gradient(vals) / E.space.measure
    return L2Function(E.space, xi)


@dataclass(frozen=True)
class Constraint:
    """Constraint data of a functional ``s Ch - L |u|^2`` restricted to a ball and an energy cap."""

    scale: float = 1.0
    shift: float = 0.0
    ball: Optional[float] = None
    cap: Optional[float] = None


def descending_slope(E: EnergyForm, u, constraint: Optional[Constraint] = None) -> float:
    """Descending slope of ``Ch/2`` or of a constrained functional.

    Without ``constraint`` this is ``||laplacian(E, u)||``.  With a
    :class:`Constraint` it is the least norm of the Frechet subdifferential of
    ``s Ch - L |.|^2`` plus the indicator of ``{|u| <= ball, Ch(u) <= cap}``.
    At points where the cap is attained the cap is treated as inactive.
    """
    vals = _vals(E, u)
    m = E.space.measure
    if constraint is None:
        xi = laplacian(E, vals).values
        return float(np.sqrt(m @ xi**2))
    s, L = constraint.scale, constraint.shift
    ch = E.energy(vals)
    norm = float(np.sqrt(m @ vals**2))
    tol = 1e-9
    if constraint.ball is not None and norm > constraint.ball * (1 + tol):
        raise OutsideDomain(f"norm {norm} exceeds the ball radius {constraint.ball}")
    if constraint.cap is not None and ch > constraint.cap * (1 + tol) + tol:
        raise OutsideDomain(f"energy {ch} exceeds the cap {constraint.cap}")
    on_sphere = constraint.ball is not None and norm >= constraint.ball * (1 - tol)
    if not on_sphere:
        if s == 0:
            return 2 * L * norm
        target = (L / s) * vals
        xi = E.nearest_subgradient(vals, target) if E.is_polyhedral else E.smooth_gradient(vals) / m
        r = 2 * s * xi - 2 * L * vals
        return float(np.sqrt(m @ r**2))
    r = constraint.ball
    xi = laplacian(E, vals).values
    tangential = max(0.0, float(m @ xi**2) - (ch / r) ** 2)
    radial = 2 * max(0.0, s * ch / r - L * r)
    return float(np.sqrt(4 * s * s * tangential + radial**2))


# -- serialization ------------------------------------------------------------


def energy_to_dict(E: EnergyForm) -> dict:
    ids = E.space.ids
    edges = [[ids[i], ids[j], float(w)] for i, j, w in zip(E.src, E.dst, E.w)]
    out: dict[str, Any] = {"kind": E.kind, "edges": edges}
    if E.kind == "lq":
        out["q"] = "inf" if E.q == math.inf else E.q
        out["directed"] = True
    return out


def energy_from_dict(space: DiscreteSpace, data: Mapping[str, Any]) -> EnergyForm:
    """Read the energy JSON layout.

    ``{"kind": "quadratic" | "lq", "q": num | "inf", "edges": [[idA, idB, w], ...]}``.
    For ``lq`` an edge contributes ``w`` in both directions unless
    ``"directed": true`` is set.
    """
    try:
        kind = data["kind"]
        raw = data["edges"]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"missing field: {exc}") from None
    index = {pid: k for k, pid in enumerate(space.ids)}
    try:
        triples = [(index[str(a)], index[str(b)], float(w)) for a, b, w in raw]
    except KeyError as exc:
        raise ValidationError(f"unknown point id {exc}") from None
    except (TypeError, ValueError):
        raise ValidationError("edges must be [idA, idB, weight] triples") from None
    if kind == "quadratic":
        return quadratic_energy(space, triples)
    if kind == "lq":
        q = data.get("q", 2)
        q = math.inf if q in ("inf", "Infinity", math.inf) else float(q)
        if not data.get("directed", False):
            triples = triples + [(b, a, w) for a, b, w in triples]
        return lq_energy(space, q, triples)
    raise ValidationError(f"unknown energy kind {kind!r}")
