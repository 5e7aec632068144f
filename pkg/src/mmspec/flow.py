"""Gradient flows of semiconvex functionals by implicit Euler (minimizing movements).

The functionals handled here have the form

    Phi(u) = s Ch(u) - L |u|^2 + indicator{|u| <= r, Ch(u) <= M}

with ``s > 0`` and ``L >= 0``, so ``Phi`` is ``(-2L)``-convex.  The heat flow is
the flow of ``Ch/2`` (``s = 1/2``, ``L = 0``, no constraints).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from . import qp
from .energy import Constraint, EnergyForm, _vals
from .errors import IllPosed, InvalidParameter, OutsideDomain, SolverFailure
from .space import L2Function

DOMAIN_TOL = 1e-9


@dataclass(frozen=True)
class Functional:
    """``scale * Ch - shift * |.|^2`` restricted to ``{|u| <= ball, Ch <= cap}``."""

    energy: EnergyForm
    scale: float = 1.0
    shift: float = 0.0
    ball: Optional[float] = None
    cap: Optional[float] = None

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidParameter("energy scale must be positive")
        if self.shift < 0:
            raise InvalidParameter("shift must be nonnegative")

    @property
    def lambda_conv(self) -> float:
        return -2.0 * self.shift

    @property
    def space(self):
        return self.energy.space

    @property
    def constraint(self) -> Constraint:
        return Constraint(self.scale, self.shift, self.ball, self.cap)

    def in_domain(self, u) -> bool:
        v = _vals(self.energy, u)
        if self.ball is not None:
            if math.sqrt(self.space.measure @ v**2) > self.ball * (1 + DOMAIN_TOL):
                return False
        if self.cap is not None and self.energy.energy(v) > self.cap * (1 + DOMAIN_TOL) + DOMAIN_TOL:
            return False
        return True

    def __call__(self, u) -> float:
        v = _vals(self.energy, u)
        if not self.in_domain(v):
            return math.inf
        return self.scale * self.energy.energy(v) - self.shift * float(self.space.measure @ v**2)


def heat_functional(E: EnergyForm) -> Functional:
    return Functional(E, scale=0.5)


def minimal_element(phi: Functional, u) -> np.ndarray:
    """Least-norm element of the Frechet subdifferential of ``phi`` at ``u``.

    Only the ball constraint contributes a normal cone; points on the energy
    cap are treated as interior.
    """
    E = phi.energy
    v = _vals(E, u)
    m = phi.space.measure
    s, L = phi.scale, phi.shift
    norm = math.sqrt(m @ v**2)
    if not phi.in_domain(v):
        raise OutsideDomain("point lies outside the domain of the functional")
    on_sphere = phi.ball is not None and norm >= phi.ball * (1 - DOMAIN_TOL) and norm > 0
    if not on_sphere:
        if E.is_polyhedral:
            xi = E.nearest_subgradient(v, (L / s) * v)
        else:
            xi = E.smooth_gradient(v) / m
        return 2 * s * xi - 2 * L * v
    r = phi.ball
    xi = E.nearest_subgradient(v) if E.is_polyhedral else E.smooth_gradient(v) / m
    ch = E.energy(v)
    tangential = 2 * s * (xi - (ch / r**2) * v)
    radial = 2 * max(0.0, s * ch / r - L * r)
    return tangential + radial * v / norm


def slope(phi: Functional, u) -> float:
    z = minimal_element(phi, u)
    return float(math.sqrt(phi.space.measure @ z**2))


# -- resolvent ----------------------------------------------------------------


class Resolvent:
    """The map ``u -> argmin Phi(v) + |v - u|^2 / (2 tau)`` at a fixed step.

    Keeps the active set of the last polyhedral solve as a warm start.
    """

    def __init__(self, phi: Functional, tau: float):
        if not tau > 0:
            raise InvalidParameter("step size must be positive")
        if 2 * phi.shift * tau >= 1:
            raise IllPosed(f"tau = {tau} violates 2 L tau < 1 for L = {phi.shift}")
        self.phi = phi
        self.tau = float(tau)
        self.kappa = 1.0 / (2 * tau) - phi.shift
        self._active = None
        self.last_mu = 0.0

    def __call__(self, u) -> np.ndarray:
        E = self.phi.energy
        u = _vals(E, u)
        if E.is_quadratic:
            v = self._quadratic(u)
        elif E.is_polyhedral:
            v = self._polyhedral(u)
        else:
            v = self._smooth(u)
        if self.phi.cap is not None and E.energy(v) > self.phi.cap * (1 + DOMAIN_TOL) + DOMAIN_TOL:
            raise SolverFailure("the energy cap binds at the resolvent; not supported")
        return v

    def _quadratic(self, u):
        E, s, tau, r = self.phi.energy, self.phi.scale, self.tau, self.phi.ball
        lam, phi = E.eigh()
        c = phi.T @ (E.space.measure * u)
        den = 2 * tau * (s * lam + self.kappa)
        self.last_mu = 0.0
        if r is not None and np.sum((c / den) ** 2) > r * r:

            def excess(mu):
                return math.sqrt(np.sum((c / (den + 2 * tau * mu)) ** 2)) - r

            hi = 1.0
            while excess(hi) > 0:
                hi *= 4
            mu = brentq(excess, 0.0, hi, xtol=1e-16 * hi, rtol=1e-15, maxiter=200)
            self.last_mu = mu
            den = den + 2 * tau * mu
        return phi @ (c / den)

    def _polyhedral(self, u):
        E, s = self.phi.energy, self.phi.scale
        n, m = E.space.n, E.space.measure
        G, nz = E.lifted_program()
        P = np.zeros((n + nz, n + nz))
        P[np.arange(n), np.arange(n)] = 2 * self.kappa * m
        P[n + np.arange(n), n + np.arange(n)] = 2 * s * m
        qv = np.zeros(n + nz)
        qv[:n] = -m * u / self.tau
        h = np.zeros(G.shape[0])
        if self.phi.ball is None:
            res = qp.solve_qp(P, qv, G, h, active=self._active)
        else:
            B = np.zeros((n, n + nz))
            B[np.arange(n), np.arange(n)] = np.sqrt(m)
            res = qp.solve_qp_ball(P, qv, G, h, B, self.phi.ball, active=self._active)
        self._active = res.active
        self.last_mu = res.mu
        return res.x[:n]

    def _smooth(self, u, max_iter: int = 50000):
        # accelerated projected gradient in the L^2(m) geometry; step and
        # restart tests use gradients only, which stay accurate near the optimum
        E, s, tau, r = self.phi.energy, self.phi.scale, self.tau, self.phi.ball
        m = E.space.measure
        kap = self.kappa

        def grad(v):
            return 2 * s * E.smooth_gradient(v) / m + 2 * kap * v - u / tau

        def proj(v):
            if r is None:
                return v
            nv = math.sqrt(m @ v**2)
            return v if nv <= r else v * (r / nv)

        def nrm(v):
            return math.sqrt(m @ v**2)

        target = 1e-10 * (1 + nrm(u) / tau)
        lip = 2 * kap
        x = proj(u.copy())
        y, t_k = x.copy(), 1.0
        for _ in range(max_iter):
            gy = grad(y)
            while True:
                xn = proj(y - gy / lip)
                d = xn - y
                dd = nrm(d)
                if dd == 0 or nrm(grad(xn) - gy) <= lip * dd * (1 + 1e-12):
                    break
                lip *= 2
            if lip * dd <= target:
                return xn
            # gradient-mapping restart: valid with the ball projection active
            if m @ ((y - xn) * (xn - x)) > 0:
                x, y, t_k = xn, xn.copy(), 1.0
                continue
            t_next = 0.5 * (1 + math.sqrt(1 + 4 * t_k * t_k))
            y = xn + ((t_k - 1) / t_next) * (xn - x)
            x, t_k = xn, t_next
        raise SolverFailure("accelerated gradient did not reach the residual target")


def prox_step(phi: Functional, u, tau: float) -> L2Function:
    """One implicit Euler step: the minimizer of ``Phi(v) + |v - u|^2 / (2 tau)``.

    Examples
    --------
    >>> from mmspec.space import make_space
    >>> from mmspec.energy import quadratic_energy
    >>> X = make_space("ab", [0.0, 1.0], "ambient", [0.5, 0.5])
    >>> E = quadratic_energy(X, [(0, 1, 1.0)])
    >>> prox_step(Functional(E), [1.0, -1.0], 0.25).values.round(12)
    array([ 0.333333333333, -0.333333333333])
    """
    return L2Function(phi.space, Resolvent(phi, tau)(u))


# -- trajectories -------------------------------------------------------------


@dataclass
class FlowState:
    t: float
    u: np.ndarray
    energy: float
    slope: float
    evi: float
    norm: float
    drift: float = 0.0


@dataclass
class FlowTrajectory:
    """Record of a discrete flow; ``states[0]`` is the initial point."""

    phi: Functional
    tau: float
    states: list = field(default_factory=list)

    @property
    def u0(self) -> np.ndarray:
        return self.states[0].u

    @property
    def final(self) -> L2Function:
        return L2Function(self.phi.space, self.states[-1].u)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.states])

    def rows(self):
        """Rows ``(t, energy, slope, evi_max_residual, norm)`` for CSV dumps."""
        return [(s.t, s.energy, s.slope, s.evi, s.norm) for s in self.states]


def default_probes(phi: Functional, u0: np.ndarray) -> list:
    n = phi.space.n
    mean = float(phi.space.measure @ u0)
    return [np.zeros(n), u0.copy(), np.full(n, mean), np.ones(n)]


def evi_residual(phi: Functional, u_prev, u_next, tau, probes, values=None) -> float:
    """Largest violation of the discrete evolution variational inequality.

    For each probe ``v`` in the domain this is
    ``(|u_next - v|^2 - |u_prev - v|^2) / (2 tau) - Phi(v) + Phi(u_next) + (lam/2)|v - u_next|^2``.
    """
    m = phi.space.measure
    fn = phi(u_next)
    lam = phi.lambda_conv
    worst = -math.inf
    for k, v in enumerate(probes):
        fv = phi(v) if values is None else values[k]
        if not math.isfinite(fv):
            continue
        a = m @ (u_next - v) ** 2
        b = m @ (u_prev - v) ** 2
        worst = max(worst, (a - b) / (2 * tau) - fv + fn + 0.5 * lam * a)
    return worst


def _state(phi, t, u, evi, drift=0.0) -> FlowState:
    m = phi.space.measure
    return FlowState(t, u, phi(u), slope(phi, u), evi, math.sqrt(m @ u**2), drift)


def flow(phi: Functional, u0, T: float, tau: float, probes: Optional[Sequence] = None) -> FlowTrajectory:
    """Implicit Euler flow of ``phi`` from ``u0`` over ``ceil(T / tau)`` steps."""
    u = np.array(_vals(phi.energy, u0), dtype=float)
    if not phi.in_domain(u):
        raise OutsideDomain("initial point lies outside the domain")
    steps = int(math.ceil(T / tau - 1e-12))
    res = Resolvent(phi, tau)
    probes = default_probes(phi, u) if probes is None else [_vals(phi.energy, p) for p in probes]
    pvals = [phi(p) for p in probes]
    traj = FlowTrajectory(phi, tau, [_state(phi, 0.0, u, -math.inf)])
    for k in range(1, steps + 1):
        v = res(u)
        traj.states.append(_state(phi, k * tau, v, evi_residual(phi, u, v, tau, probes, pvals)))
        u = v
    return traj


# -- heat flow ----------------------------------------------------------------


def heat_spectral(E: EnergyForm, f, t: float) -> np.ndarray:
    """Exact heat semigroup ``exp(-t M^{-1} A) f`` of a quadratic energy."""
    lam, phi = E.eigh()
    c = phi.T @ (E.space.measure * f)
    return phi @ (np.exp(-t * lam) * c)


def heat_euler(E: EnergyForm, f, t: float, steps: int) -> np.ndarray:
    res = Resolvent(heat_functional(E), t / steps)
    u = np.array(f, dtype=float)
    for _ in range(steps):
        u = res(u)
    return u


def heat_flow(
    E: EnergyForm,
    f,
    t: float,
    method: str = "auto",
    rtol: float = 1e-6,
    max_halvings: int = 6,
    steps: Optional[int] = None,
) -> L2Function:
    """Heat flow ``h_t f``: the gradient flow of ``Ch/2`` at time ``t``.

    Quadratic energies use the exact spectral solution unless ``method="euler"``.
    Implicit Euler starts from ``t/200`` and halves the step until successive
    endpoints differ by less than ``rtol`` (at most ``max_halvings`` times).
    For non-polyhedral energies the endpoints compared (and returned) are
    Richardson extrapolations of consecutive step sizes.
    A fixed ``steps`` count skips the refinement loop.
    """
    if t < 0:
        raise InvalidParameter("time must be nonnegative")
    f = np.array(_vals(E, f), dtype=float)
    if t == 0:
        return L2Function(E.space, f)
    if method == "auto":
        method = "spectral" if E.is_quadratic else "euler"
    if method == "spectral":
        return L2Function(E.space, heat_spectral(E, f, t))
    if steps is not None:
        return L2Function(E.space, heat_euler(E, f, t, steps))
    m = E.space.measure
    # smooth energies: Richardson extrapolation of the first-order scheme;
    # polyhedral ones keep plain implicit Euler (no expansion across kinks)
    extrapolate = not E.is_polyhedral
    steps = 200
    last = heat_euler(E, f, t, steps)
    prev = None
    for _ in range(max_halvings):
        steps *= 2
        cur = heat_euler(E, f, t, steps)
        est = 2 * cur - last if extrapolate else cur
        if prev is not None or not extrapolate:
            ref = prev if extrapolate else last
            if math.sqrt(m @ (est - ref) ** 2) < rtol:
                return L2Function(E.space, est)
        prev, last = est, cur
    return L2Function(E.space, prev if extrapolate else last)


# -- diagnostics --------------------------------------------------------------


@dataclass
class RegularizationReport:
    energy_bound_ok: bool
    slope_bound_ok: bool
    energy: float
    energy_bound: float
    slope_sq: float
    slope_bound: float

    @property
    def ok(self) -> bool:
        return self.energy_bound_ok and self.slope_bound_ok


def check_regularization(E: EnergyForm, f, t: float, slack: float = 1.02, **heat_kw) -> RegularizationReport:
    """Check ``Ch(h_t f) <= |f|^2/t`` and ``|Delta h_t f|^2 <= |f|^2/t^2`` up to ``slack``."""
    from .energy import laplacian

    f = np.array(_vals(E, f), dtype=float)
    m = E.space.measure
    g = heat_flow(E, f, t, **heat_kw).values
    ff = float(m @ f**2)
    ch = E.energy(g)
    lap = laplacian(E, g).values
    sl = float(m @ lap**2)
    eb, sb = ff / t, ff / t**2
    tiny = 1e-14 * (1 + ff)
    return RegularizationReport(ch <= slack * eb + tiny, sl <= slack * sb + tiny / t**2, ch, eb, sl, sb)


@dataclass
class ContractivityReport:
    ok: bool
    monotone: bool
    worst_ratio: float
    distances: np.ndarray


def check_contractivity(phi: Functional, u, v, T: float, tau: float, factor: float = 1.02) -> ContractivityReport:
    """Check ``|S_t u - S_t v| <= exp(-lam t) |u - v|`` at every step, up to ``factor``."""
    a = flow(phi, u, T, tau, probes=[])
    b = flow(phi, v, T, tau, probes=[])
    m = phi.space.measure
    d = np.array([math.sqrt(m @ (x.u - y.u) ** 2) for x, y in zip(a.states, b.states)])
    t = a.column("t")
    bound = np.exp(-phi.lambda_conv * t) * d[0]
    ratio = np.where(bound > 0, d / np.where(bound > 0, bound, 1.0), np.where(d > 1e-12, np.inf, 0.0))
    ok = bool(np.all(d <= factor * bound + 1e-12))
    mono = bool(np.all(np.diff(d) <= 1e-10 * (1 + d[0])))
    return ContractivityReport(ok, mono, float(ratio.max()), d)


@dataclass
class EnergyIdentityReport:
    ok: bool
    worst_deviation: float
    within_fraction: float
    kinks: int
    checked: int
    ratios: np.ndarray


def _signature(E: EnergyForm, u, tol=1e-7):
    if not E.is_polyhedral:
        return None
    owner, R = E._vertex_rows()
    lin = R @ u
    N = E.local_norms(u)
    scale = tol * max(1.0, float(np.abs(lin).max(initial=0.0)))
    if E.q == math.inf:
        act = (np.abs(lin) >= N[owner] - scale) & (N[owner] > scale)
        return tuple((act * np.sign(lin)).astype(int))
    return tuple(np.where(np.abs(lin) <= scale, 0, np.sign(lin)).astype(int))


def check_energy_identity(phi: Functional, traj: FlowTrajectory, min_fraction: float = 0.9) -> EnergyIdentityReport:
    """Compare ``(Phi_n - Phi_{n+1}) / tau`` with ``|dPhi|^2(u_{n+1})`` step by step.

    The relative tolerance at step ``n`` is ``10 tau c_n`` with ``c_n`` the
    local Lipschitz estimate ``|z_n - z_{n+1}| / |u_n - u_{n+1}|`` of the least
    subgradient ``z``.  Steps whose active signature changes (kinks of a
    polyhedral energy) are excluded and counted.
    """
    m = phi.space.measure
    tau = traj.tau
    states = traj.states
    zs = [minimal_element(phi, s.u) for s in states]
    ratios, within, kinks, checked = [], 0, 0, 0
    worst = 0.0
    for a, b, za, zb in zip(states, states[1:], zs, zs[1:]):
        if phi.energy.is_polyhedral and _signature(phi.energy, a.u) != _signature(phi.energy, b.u):
            kinks += 1
            continue
        lhs = (a.energy - b.energy) / tau
        rhs = b.slope**2
        du = math.sqrt(m @ (a.u - b.u) ** 2)
        checked += 1
        if rhs <= 1e-20 and abs(lhs) <= 1e-12:
            ratios.append(1.0)
            within += 1
            continue
        c = math.sqrt(m @ (za - zb) ** 2) / du if du > 0 else 0.0
        ratio = lhs / rhs if rhs > 0 else math.inf
        ratios.append(ratio)
        dev = abs(ratio - 1)
        worst = max(worst, dev)
        if dev <= 10 * tau * c + 1e-9:
            within += 1
    frac = within / checked if checked else 1.0
    need = min_fraction if phi.energy.is_polyhedral else 1.0
    return EnergyIdentityReport(frac >= need, worst, frac, kinks, checked, np.array(ratios))
