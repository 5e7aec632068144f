"""Finite metric measure spaces embedded in a common Euclidean ambient space.

A :class:`DiscreteSpace` carries point ids, ambient coordinates, an intrinsic
distance matrix and a probability measure with full support.  Generators for
the test families (cycles, paths, thin tori, products) also record the natural
neighbour graph so that default Dirichlet energies can be built from it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateId,
    InvalidParameter,
    MetricViolation,
    NonProbabilityMeasure,
    SpaceMismatch,
    ValidationError,
)

TOL = 1e-12


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DiscreteSpace:
    """A validated finite metric measure space.

    Instances are immutable; build them with :func:`validate_space` or one of
    the generators rather than calling the constructor directly.
    """

    ids: tuple
    coords: np.ndarray
    dist: np.ndarray
    measure: np.ndarray
    graph: tuple = ()
    meta: Mapping[str, Any] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    def function(self, values) -> "L2Function":
        return L2Function(self, values)

    def constant(self, c: float = 1.0) -> "L2Function":
        return L2Function(self, np.full(self.n, float(c)))

    def __repr__(self):
        kind = self.meta.get("family", "custom")
        return f"DiscreteSpace(n={self.n}, dim={self.dim}, family={kind!r})"


class L2Function:
    """A real function on the points of a space, seen as an element of L^2(m)."""

    __slots__ = ("space", "values")

    def __init__(self, space: DiscreteSpace, values):
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.shape[0] != space.n:
            raise SpaceMismatch(f"{values.shape[0]} values for a space of {space.n} points")
        self.space = space
        self.values = values

    def _check(self, other: "L2Function"):
        if other.space is not self.space:
            raise SpaceMismatch("functions live on different spaces")

    def __add__(self, other):
        self._check(other)
        return L2Function(self.space, self.values + other.values)

    def __sub__(self, other):
        self._check(other)
        return L2Function(self.space, self.values - other.values)

    def __neg__(self):
        return L2Function(self.space, -self.values)

    def __mul__(self, alpha):
        return L2Function(self.space, float(alpha) * self.values)

    __rmul__ = __mul__

    def __truediv__(self, alpha):
        return L2Function(self.space, self.values / float(alpha))

    def norm(self) -> float:
        return l2_norm(self)

    def normalized(self) -> "L2Function":
        return self / l2_norm(self)

    def __repr__(self):
        return f"L2Function(n={self.space.n}, norm={self.norm():.6g})"


def l2_norm(f: L2Function) -> float:
    return float(np.sqrt(np.dot(f.space.measure, f.values**2)))


def l2_inner(f: L2Function, g: L2Function) -> float:
    if f.space is not g.space:
        raise SpaceMismatch("functions live on different spaces")
    return float(np.dot(f.space.measure, f.values * g.values))


def truncated_cost(rho):
    """Bounded ground cost ``min(1, rho)`` applied elementwise."""
    return np.minimum(1.0, rho)


def ambient_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


# -- validation ---------------------------------------------------------------


def _check_measure(measure: np.ndarray):
    if measure.ndim != 1 or not np.all(np.isfinite(measure)):
        raise NonProbabilityMeasure("measure must be a finite vector")
    if np.any(measure <= 0):
        raise NonProbabilityMeasure("measure weights must be strictly positive")
    total = float(np.sum(measure))
    if abs(total - 1.0) > TOL:
        raise NonProbabilityMeasure(f"measure sums to {total!r}, not 1")


def _check_metric(dist: np.ndarray):
    n = dist.shape[0]
    if dist.shape != (n, n) or not np.all(np.isfinite(dist)):
        raise MetricViolation("dist must be a finite square matrix")
    scale = max(1.0, float(np.max(dist)) if n else 1.0)
    tol = TOL * scale
    if np.any(np.abs(np.diag(dist)) > tol):
        raise MetricViolation("dist has a nonzero diagonal")
    if np.any(dist < -tol):
        raise MetricViolation("dist has negative entries")
    if np.max(np.abs(dist - dist.T), initial=0.0) > tol:
        raise MetricViolation("dist is not symmetric")
    for k in range(n):
        slack = dist[:, k, None] + dist[None, k, :] - dist
        if slack.min() < -tol:
            i, j = np.unravel_index(np.argmin(slack), slack.shape)
            raise MetricViolation(
                f"triangle inequality fails for ({i}, {k}, {j}): "
                f"{dist[i, j]} > {dist[i, k]} + {dist[k, j]}"
            )


def make_space(ids, coords, dist, measure, graph=(), meta=None) -> DiscreteSpace:
    """Build a :class:`DiscreteSpace` from arrays, checking every invariant."""
    ids = tuple(str(i) for i in ids)
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise DuplicateId(f"point id {dup!r} is repeated")
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    n = len(ids)
    if coords.shape[0] != n:
        raise ValidationError("one coordinate tuple per point is required")
    if isinstance(dist, str):
        if dist != "ambient":
            raise ValidationError(f"unknown dist keyword {dist!r}")
        dist = ambient_distances(coords, coords)
    dist = np.asarray(dist, dtype=float)
    measure = np.asarray(measure, dtype=float)
    if measure.shape != (n,):
        raise NonProbabilityMeasure("one weight per point is required")
    _check_measure(measure)
    _check_metric(dist)
    graph = tuple(sorted((int(min(i, j)), int(max(i, j))) for i, j in graph))
    return DiscreteSpace(ids, _frozen(coords), _frozen(dist), _frozen(measure), graph, dict(meta or {}))


def validate_space(candidate: Mapping[str, Any]) -> DiscreteSpace:
    """Validate raw space data in the JSON layout.

    ``{"points": [{"id": str, "coord": [...]}, ...], "dist": "ambient" | matrix,
    "measure": [...]}``; an optional ``"graph"`` lists neighbour id pairs.
    """
    try:
        points = candidate["points"]
        dist = candidate["dist"]
        measure = candidate["measure"]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"missing field: {exc}") from None
    ids = [p["id"] for p in points]
    coords = [p["coord"] for p in points]
    index = {str(i): k for k, i in enumerate(ids)}
    graph = []
    for a, b in candidate.get("graph", ()):
        graph.append((index[str(a)], index[str(b)]))
    return make_space(ids, coords, dist, measure, graph, candidate.get("meta"))


def space_to_dict(space: DiscreteSpace) -> dict:
    out = {
        "points": [{"id": i, "coord": c.tolist()} for i, c in zip(space.ids, space.coords)],
        "dist": space.dist.tolist(),
        "measure": space.measure.tolist(),
    }
    if space.graph:
        out["graph"] = [[space.ids[i], space.ids[j]] for i, j in space.graph]
    if space.meta:
        out["meta"] = dict(space.meta)
    return out


# -- generators ---------------------------------------------------------------


def _cycle_parts(n: int, circumference: float):
    k = np.arange(n)
    radius = circumference / (2 * np.pi)
    theta = 2 * np.pi * k / n
    coords = radius * np.column_stack([np.cos(theta), np.sin(theta)])
    gap = np.abs(k[:, None] - k[None, :])
    dist = circumference * np.minimum(gap, n - gap) / n
    return coords, dist


def make_cycle(n: int, circumference: float = 1.0) -> DiscreteSpace:
    """``n`` equally spaced points on a planar circle, arc-length metric."""
    if int(n) != n or n < 1:
        raise InvalidParameter(f"cycle needs n >= 1 points, got {n}")
    if not circumference > 0:
        raise InvalidParameter("circumference must be positive")
    n = int(n)
    coords, dist = _cycle_parts(n, circumference)
    graph = [(i, (i + 1) % n) for i in range(n)] if n > 1 else []
    # n == 2: both arcs join the same pair of points and both count as edges
    meta = {"family": "cycle", "n": n, "circumference": float(circumference)}
    space = make_space([f"c{i}" for i in range(n)], coords, dist, np.full(n, 1.0 / n), (), meta)
    return _with_graph(space, graph)


def _with_graph(space: DiscreteSpace, graph) -> DiscreteSpace:
    # keeps multi-edges (the two arcs of a 2-cycle), which make_space would sort but not merge
    graph = tuple((int(min(i, j)), int(max(i, j))) for i, j in graph)
    return DiscreteSpace(space.ids, space.coords, space.dist, space.measure, graph, space.meta)


def make_path(n: int, length: float = 1.0) -> DiscreteSpace:
    """``n`` equally spaced points on a segment of the given length."""
    if int(n) != n or n < 1:
        raise InvalidParameter(f"path needs n >= 1 points, got {n}")
    if not length > 0:
        raise InvalidParameter("length must be positive")
    n = int(n)
    x = np.linspace(0.0, length, n) if n > 1 else np.zeros(1)
    dist = np.abs(x[:, None] - x[None, :])
    meta = {"family": "path", "n": n, "length": float(length)}
    graph = [(i, i + 1) for i in range(n - 1)]
    return make_space([f"p{i}" for i in range(n)], x[:, None], dist, np.full(n, 1.0 / n), graph, meta)


def make_product(a: DiscreteSpace, b: DiscreteSpace, meta=None) -> DiscreteSpace:
    """Product space with the l2 product metric and the product measure."""
    na, nb = a.n, b.n
    ia, ib = np.divmod(np.arange(na * nb), nb)
    coords = np.hstack([a.coords[ia], b.coords[ib]])
    dist = np.sqrt(a.dist[np.ix_(ia, ia)] ** 2 + b.dist[np.ix_(ib, ib)] ** 2)
    measure = a.measure[ia] * b.measure[ib]
    measure = measure / measure.sum()
    ids = [f"{a.ids[i]}x{b.ids[j]}" for i, j in zip(ia, ib)]
    graph = [(i * nb + k, j * nb + k) for i, j in a.graph for k in range(nb)]
    graph += [(k * nb + i, k * nb + j) for i, j in b.graph for k in range(na)]
    meta = dict(meta or {"family": "product", "factors": [dict(a.meta), dict(b.meta)]})
    space = make_space(ids, coords, dist, measure, (), meta)
    return _with_graph(space, graph)


def make_thin_torus(n: int, m: int, eps: float) -> DiscreteSpace:
    """Product of a unit-circumference cycle with a cycle of circumference ``eps``.

    The ambient embedding is four dimensional: two coordinates per circle.
    """
    for name, v in (("n", n), ("m", m)):
        if int(v) != v or v < 2:
            raise InvalidParameter(f"thin torus needs {name} >= 2, got {v}")
    if not eps > 0:
        raise InvalidParameter("fiber scale eps must be positive")
    meta = {"family": "thin_torus", "n": int(n), "m": int(m), "eps": float(eps)}
    return make_product(make_cycle(n, 1.0), make_cycle(m, eps), meta)


def single_point(coord: Sequence[float] = (0.0, 0.0)) -> DiscreteSpace:
    return make_space(["o"], [list(coord)], [[0.0]], [1.0], (), {"family": "point"})


def pad_coords(space: DiscreteSpace, dim: int) -> DiscreteSpace:
    """Same space with ambient coordinates zero-padded to ``dim`` dimensions."""
    if dim < space.dim:
        raise InvalidParameter("cannot shrink the ambient dimension")
    coords = np.hstack([space.coords, np.zeros((space.n, dim - space.dim))])
    return DiscreteSpace(space.ids, _frozen(coords), space.dist, space.measure, space.graph, space.meta)
