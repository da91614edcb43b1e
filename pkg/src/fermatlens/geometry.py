"""Pointwise tensor machinery: inner products, connection, curvature, exponential map.

Array convention throughout: a spacetime point is z = (x_1..x_n, t) with shape
(..., d), d = n+1; tangent vectors share the layout.  The coordinate time axis
(the future field Y) is the last basis vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainExitError, MetricDomainError, NonConvergenceError
from .metrics import ChartMetric


@dataclass(frozen=True)
class Event:
    """A spacetime point in chart coordinates."""

    x: np.ndarray
    t: float

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "t", float(self.t))
        if not (np.isfinite(self.x).all() and np.isfinite(self.t)):
            raise ValueError("event components must be finite")

    @property
    def z(self):
        return np.concatenate([self.x, [self.t]])


@dataclass(frozen=True)
class Tangent:
    """A tangent vector (xi, theta) attached to an event."""

    base: Event
    xi: np.ndarray
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        object.__setattr__(self, "theta", float(self.theta))
        if not (np.isfinite(self.xi).all() and np.isfinite(self.theta)):
            raise ValueError("tangent components must be finite")

    @property
    def v(self):
        return np.concatenate([self.xi, [self.theta]])


def split(z):
    """(..., d) -> spatial part (..., n) and time part (...,)."""
    return z[..., :-1], z[..., -1]


def time_axis(d):
    Y = np.zeros(d)
    Y[-1] = 1.0
    return Y


# -- inner products ----------------------------------------------------------


def lorentz_form(m: ChartMetric, z, U, V):
    """Batched Lorentzian inner product of vectors U, V at points z."""
    G = m.metric(*split(z))
    return np.einsum("...ab,...a,...b->...", G, U, V)


def riemann_form(m: ChartMetric, z, U, V):
    """Auxiliary Riemannian product: flip the sign of the Y-component pairing.

    <u,v>_R = <u,v> - 2 <u,Y><v,Y> / <Y,Y>, positive definite for timelike Y.
    """
    x, t = split(z)
    G = m.metric(x, t)
    uv = np.einsum("...ab,...a,...b->...", G, U, V)
    uY = np.einsum("...a,...a->...", G[..., -1, :], U)
    vY = np.einsum("...a,...a->...", G[..., -1, :], V)
    YY = G[..., -1, -1]
    return uv - 2.0 * uY * vY / YY


def lorentz_inner(m: ChartMetric, p: Event, u: Tangent, v: Tangent) -> float:
    """Bilinear form of the chart metric on two tangents at p."""
    _check_based(p, u, v)
    return float(lorentz_form(m, p.z, u.v, v.v))


def riemann_inner(m: ChartMetric, p: Event, u: Tangent, v: Tangent) -> float:
    """Auxiliary Riemannian product at p (Y is the coordinate time axis)."""
    _check_based(p, u, v)
    return float(riemann_form(m, p.z, u.v, v.v))


def _check_based(p, u, v):
    for w in (u, v):
        if not (np.array_equal(w.base.x, p.x) and w.base.t == p.t):
            raise ValueError("tangents must be based at the same event")


def future_margin(m: ChartMetric, z, V):
    """<Y, V> at points z; future-pointing causal vectors give negative values."""
    x, t = split(z)
    G = m.metric(x, t)
    return np.einsum("...a,...a->...", G[..., -1, :], V)


# -- connection and curvature -------------------------------------------------


def christoffel_at(m: ChartMetric, z):
    """Levi-Civita coefficients Gamma^k_ij at points z, shape (..., d, d, d)."""
    x, t = split(z)
    G = m.metric(x, t)
    dG = m.metric_grad(x, t)
    try:
        Ginv = np.linalg.inv(G)
    except np.linalg.LinAlgError as exc:
        raise MetricDomainError("degenerate metric") from exc
    # term[l,i,j] = d_i g_lj + d_j g_li - d_l g_ij
    term = np.einsum("...lji->...lij", dG) + dG - np.einsum("...ijl->...lij", dG)
    return 0.5 * np.einsum("...kl,...lij->...kij", Ginv, term)


def christoffel(m: ChartMetric, p: Event):
    """Connection coefficients at a single event."""
    return christoffel_at(m, p.z)


def curvature_tensor(m: ChartMetric, z, h_scale=1e-5):
    """R^l_{kij} with R(e_i,e_j)e_k = R^l_{kij} e_l, via central differences of Gamma.

    The difference step is h = h_scale * (1 + |x|) per point.
    """
    z = np.asarray(z, float)
    d = z.shape[-1]
    h = h_scale * (1.0 + np.linalg.norm(z[..., :-1], axis=-1))
    dGam = np.empty(z.shape[:-1] + (d, d, d, d))  # [..., k, i, j, c] = d_c Gamma^k_ij
    for c in range(d):
        e = np.zeros(d)
        e[c] = 1.0
        dz = h[..., None] * e
        dGam[..., c] = (christoffel_at(m, z + dz) - christoffel_at(m, z - dz)) / (2.0 * h)[
            ..., None, None, None
        ]
    Gam = christoffel_at(m, z)
    R = (
        np.einsum("...ljki->...lkij", dGam)
        - np.einsum("...likj->...lkij", dGam)
        + np.einsum("...lim,...mjk->...lkij", Gam, Gam)
        - np.einsum("...ljm,...mik->...lkij", Gam, Gam)
    )
    return R


def riemann_apply(m: ChartMetric, z, X, Y, Z, R=None):
    """R(X, Y)Z component vector; R may be a precomputed curvature tensor."""
    if R is None:
        R = curvature_tensor(m, z)
    return np.einsum("...lkij,...i,...j,...k->...l", R, X, Y, Z)


def curvature(m: ChartMetric, p: Event, X: Tangent, Y: Tangent, Z: Tangent) -> Tangent:
    """Curvature operator R(X,Y)Z at p, returned as a tangent at p."""
    w = riemann_apply(m, p.z, X.v, Y.v, Z.v)
    return Tangent(base=p, xi=w[:-1], theta=w[-1])


# -- geodesic flow (exponential map) ------------------------------------------


def _geodesic_rhs(m, state):
    d = state.shape[-1] // 2
    z, v = state[..., :d], state[..., d:]
    Gam = christoffel_at(m, z)
    acc = -np.einsum("...kij,...i,...j->...k", Gam, v, v)
    return np.concatenate([v, acc], axis=-1)


def integrate_geodesics(m: ChartMetric, z0, v0, s_end, steps, check_domain=True):
    """Fixed-step RK4 on the first-order geodesic system, batched over rays.

    Returns (traj, vel, death_step): traj/vel have shape (steps+1, B, d), and
    death_step[b] is the last valid step index of ray b (steps when it never
    left the chart).  Frozen rays keep their last state.
    """
    z0 = np.atleast_2d(np.asarray(z0, float))
    v0 = np.atleast_2d(np.asarray(v0, float))
    B, d = z0.shape
    hs = s_end / steps
    state = np.concatenate([z0, v0], axis=-1)
    traj = np.empty((steps + 1, B, d))
    vel = np.empty((steps + 1, B, d))
    traj[0], vel[0] = z0, v0
    alive = np.ones(B, dtype=bool)
    death_step = np.full(B, steps, dtype=int)
    for i in range(steps):
        live = state[alive]
        k1 = _geodesic_rhs(m, live)
        k2 = _geodesic_rhs(m, live + 0.5 * hs * k1)
        k3 = _geodesic_rhs(m, live + 0.5 * hs * k2)
        k4 = _geodesic_rhs(m, live + hs * k3)
        new = live + (hs / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        state[alive] = new
        traj[i + 1] = traj[i]
        vel[i + 1] = vel[i]
        traj[i + 1, alive] = new[..., :d]
        vel[i + 1, alive] = new[..., d:]
        if check_domain:
            ok = np.isfinite(new).all(axis=-1)
            ok &= m.contains(new[..., : d - 1], new[..., d - 1])
            if not ok.all():
                idx = np.flatnonzero(alive)
                death_step[idx[~ok]] = i
                alive[idx[~ok]] = False
                if not alive.any():
                    return traj[: i + 2], vel[: i + 2], death_step
    return traj, vel, death_step


def geodesic_flow(
    m: ChartMetric,
    p: Event,
    v: Tangent,
    s_end: float = 1.0,
    steps: int = 256,
    energy_rtol: float = 1e-8,
    max_refine: int = 8,
    out_samples: int | None = None,
):
    """Integrate the geodesic with initial data (p, v) on [0, s_end].

    The step is halved until max_s |<zdot,zdot> - <zdot(0),zdot(0)>| passes the
    conservation tolerance.  Returns a DiscreteCurve carrying integrator
    velocities; raises DomainExitError if the ray leaves the chart.
    """
    from .curves import DiscreteCurve  # deferred: curves imports geometry

    if steps < 16:
        raise ValueError("steps must be at least 16")
    out = out_samples or steps
    steps = max(steps, out)
    steps = ((steps + out - 1) // out) * out  # keep the output grid a sub-grid
    e0 = float(lorentz_form(m, p.z, v.v, v.v))
    for attempt in range(max_refine + 1):
        traj, vel, death = integrate_geodesics(m, p.z[None], v.v[None], s_end, steps)
        if death[0] < steps:
            raise DomainExitError(death[0] / steps * s_end)
        energy = lorentz_form(m, traj[:, 0], vel[:, 0], vel[:, 0])
        drift = np.max(np.abs(energy - e0))
        if drift <= energy_rtol * (1.0 + abs(e0)):
            break
        steps *= 2
    else:
        raise NonConvergenceError(
            "energy conservation not reached", {"drift": drift, "steps": steps}
        )
    stride = steps // out
    sel = slice(None, None, stride)
    zs, vs = traj[sel, 0], vel[sel, 0]
    eps = float(np.sqrt(max(-e0, 0.0)))  # causal label from the (conserved) initial energy
    s = np.linspace(0.0, 1.0, out + 1)
    return DiscreteCurve(
        s=s,
        x=zs[:, :-1],
        t=zs[:, -1],
        xdot=vs[:, :-1] * s_end,
        tdot=vs[:, -1] * s_end,
        epsilon=eps * s_end,
        metric_name=m.name,
    )
