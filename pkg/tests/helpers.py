"""Random spaces and energies shared by the property tests."""

import math

import numpy as np

from mmspec.energy import lq_energy, quadratic_energy
from mmspec.space import make_space

KINDS = ["quadratic", 1.0, 1.5, 2.0, 3.0, math.inf]


def random_space(rng, n):
    m = rng.uniform(0.2, 1.0, n)
    m /= m.sum()
    m[-1] = 1.0 - m[:-1].sum()
    coords = rng.standard_normal((n, 2))
    return make_space(range(n), coords, "ambient", m)


def random_edges(rng, n, extra=None):
    """A spanning path in random order plus a few random chords."""
    order = rng.permutation(n)
    edges = {(int(min(a, b)), int(max(a, b))) for a, b in zip(order[:-1], order[1:])}
    extra = n // 2 if extra is None else extra
    for _ in range(extra):
        a, b = rng.choice(n, 2, replace=False)
        edges.add((int(min(a, b)), int(max(a, b))))
    return sorted(edges)


def random_energy(rng, n, kind, connected=True):
    S = random_space(rng, n)
    edges = random_edges(rng, n) if connected else []
    w = rng.uniform(0.5, 2.0, len(edges))
    if kind == "quadratic":
        return quadratic_energy(S, [(i, j, c) for (i, j), c in zip(edges, w)])
    pairs = [(i, j, c) for (i, j), c in zip(edges, w)] + [(j, i, c) for (i, j), c in zip(edges, w)]
    return lq_energy(S, kind, pairs)


def norm(E, v):
    return float(np.sqrt(E.space.measure @ np.asarray(v) ** 2))
