"""Discrete causal curves: the time-component lift, arrival time, transport.

A discrete curve is a uniform grid s_0=0 < ... < s_N=1 with samples (x_i, t_i)
and node velocities (xdot_i, tdot_i).  Curves built by the lift have their
node tdot computed algebraically from xdot, so the causal constraint
<zdot, zdot> = -eps^2 and the future condition <Y, zdot> < 0 hold exactly at
the nodes; the recorded residuals measure integration quality, not the label.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import CurveConstraintError, DomainExitError, EndpointError
from .geometry import christoffel_at, lorentz_form, riemann_form, split
from .metrics import ChartMetric


# -- the lift integrand --------------------------------------------------------


def lift_rate(m: ChartMetric, x, t, w, epsilon):
    """Future-branch time velocity: the positive root of <zdot,zdot> = -eps^2.

        tdot = <G/b, w> + sqrt(<(a/b) w, w> + <G/b, w>^2 + eps^2 / b)

    (a, G, b) = (alpha, shift, lapse) at (x, t).  Vectorised over leading axes.
    """
    a = m.alpha(x, t)
    g = m.shift(x, t)
    b = m.lapse(x, t)
    u = np.einsum("...i,...i->...", g, w) / b
    q = np.einsum("...ij,...i,...j->...", a, w, w) / b
    disc = q + u * u + epsilon**2 / b
    return u + np.sqrt(disc)


def _lift_sampled(m: ChartMetric, s, x, t0, epsilon):
    """Arrival-time integration for a sampled spatial path (polyline convention).

    Each grid interval carries the chord velocity; the quadrature is the RK4
    of the scalar lift, which for a static metric is interval-wise Simpson.
    Returns the t samples.  Exact bookkeeping: the value t[-1] is a smooth
    function of the node positions, shared with the shortening objective.
    """
    h = s[1] - s[0]
    w = np.diff(x, axis=0) / h
    mid = 0.5 * (x[:-1] + x[1:])
    if not m.time_dependent:
        fa = lift_rate(m, x[:-1], 0.0, w, epsilon)
        fm = lift_rate(m, mid, 0.0, w, epsilon)
        fb = lift_rate(m, x[1:], 0.0, w, epsilon)
        inc = (h / 6.0) * (fa + 4.0 * fm + fb)
        t = np.empty(len(s))
        t[0] = t0
        t[1:] = t0 + np.cumsum(inc)
        return t
    t = np.empty(len(s))
    t[0] = t0
    for j in range(len(s) - 1):
        k1 = lift_rate(m, x[j], t[j], w[j], epsilon)
        k2 = lift_rate(m, mid[j], t[j] + 0.5 * h * k1, w[j], epsilon)
        k3 = lift_rate(m, mid[j], t[j] + 0.5 * h * k2, w[j], epsilon)
        k4 = lift_rate(m, x[j + 1], t[j] + h * k3, w[j], epsilon)
        t[j + 1] = t[j] + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return t


def _lift_smooth(m: ChartMetric, x_fn, xdot_fn, s, t0, epsilon):
    """RK4 of the lift against a C^1 path given by callables; 4th order in the grid."""
    t = np.empty(len(s))
    t[0] = t0
    h = s[1] - s[0]
    for j in range(len(s) - 1):
        sj = s[j]
        xa, wa = x_fn(sj), xdot_fn(sj)
        xm, wm = x_fn(sj + 0.5 * h), xdot_fn(sj + 0.5 * h)
        xb, wb = x_fn(sj + h), xdot_fn(sj + h)
        k1 = lift_rate(m, xa, t[j], wa, epsilon)
        k2 = lift_rate(m, xm, t[j] + 0.5 * h * k1, wm, epsilon)
        k3 = lift_rate(m, xm, t[j] + 0.5 * h * k2, wm, epsilon)
        k4 = lift_rate(m, xb, t[j] + h * k3, wb, epsilon)
        t[j + 1] = t[j] + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return t


def solve_time_component(m: ChartMetric, x_path, t_a, epsilon, s=None, n=256):
    """Solve the time-component Cauchy problem along a spatial path.

    ``x_path`` is either a sample array of shape (N+1, n) on the uniform grid
    (polyline rule, the convention shared with the shortening objective) or a
    pair of callables (x(s), xdot(s)) for a smooth path.  Returns (s, t).
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if isinstance(x_path, tuple) and callable(x_path[0]):
        if s is None:
            s = np.linspace(0.0, 1.0, n + 1)
        x_fn, xdot_fn = x_path
        _check_in_chart(m, np.asarray([x_fn(si) for si in s]), t_a)
        t = _lift_smooth(m, x_fn, xdot_fn, s, t_a, epsilon)
        return s, t
    x = np.asarray(x_path, float)
    if s is None:
        s = np.linspace(0.0, 1.0, len(x))
    _check_in_chart(m, x, t_a)
    if epsilon == 0.0:
        speed = np.linalg.norm(np.diff(x, axis=0), axis=1) / (s[1] - s[0])
        if np.any(speed <= 1e-13 * (1.0 + speed.max(initial=0.0))):
            raise CurveConstraintError("null lift of a zero-velocity sub-arc is degenerate")
    t = _lift_sampled(m, s, x, t_a, epsilon)
    return s, t


def _check_in_chart(m, x, t):
    ok = m.contains(x, np.broadcast_to(t, x.shape[:-1]))
    if not np.all(ok):
        bad = int(np.argmin(ok))
        raise DomainExitError(bad / max(len(np.atleast_1d(ok)) - 1, 1))


# -- discrete curves -----------------------------------------------------------


@dataclass(eq=False)
class DiscreteCurve:
    """A sampled causal curve with its label epsilon and node velocities."""

    s: np.ndarray
    x: np.ndarray
    t: np.ndarray
    xdot: np.ndarray
    tdot: np.ndarray
    epsilon: float
    metric_name: str = ""
    constraint_residual: float | None = None
    future_margin_max: float | None = None

    def __post_init__(self):
        self.s = np.asarray(self.s, float)
        self.x = np.asarray(self.x, float)
        self.t = np.asarray(self.t, float)
        self.xdot = np.asarray(self.xdot, float)
        self.tdot = np.asarray(self.tdot, float)
        ds = np.diff(self.s)
        if np.any(ds <= 0) or np.max(np.abs(ds - ds[0])) > 1e-12:
            raise CurveConstraintError("curve grid must be strictly increasing and uniform")
        self._cache = {}

    @property
    def n(self):
        return self.x.shape[1]

    @property
    def z(self):
        return np.concatenate([self.x, self.t[:, None]], axis=1)

    @property
    def zdot(self):
        return np.concatenate([self.xdot, self.tdot[:, None]], axis=1)

    def spline(self):
        if "spline" not in self._cache:
            self._cache["spline"] = CubicSpline(self.s, self.z, axis=0)
        return self._cache["spline"]

    def at(self, s):
        return self.spline()(s)

    def velocity_at(self, s):
        return self.spline()(s, 1)

    def endpoint(self):
        return self.x[-1], self.t[-1]


def curve_from_samples(m: ChartMetric, s, x, t, epsilon, xdot=None):
    """Assemble a DiscreteCurve; node tdot comes from the lift branch so the
    causal constraint holds exactly at the nodes, and the residual diagnostics
    are recorded on the curve."""
    x = np.asarray(x, float)
    t = np.asarray(t, float)
    h = s[1] - s[0]
    if xdot is None:
        xdot = np.gradient(x, h, axis=0, edge_order=2)
    tdot = lift_rate(m, x, t, xdot, epsilon)
    curve = DiscreteCurve(
        s=s, x=x, t=t, xdot=xdot, tdot=tdot, epsilon=float(epsilon), metric_name=m.name
    )
    record_curve_diagnostics(m, curve)
    return curve


def lift_curve(m: ChartMetric, x_samples, t0, epsilon, s=None):
    """Lift a sampled spatial path to a causal curve with t(0) = t0."""
    x = np.asarray(x_samples, float)
    s, t = solve_time_component(m, x, t0, epsilon, s=s)
    return curve_from_samples(m, s, x, t, epsilon)


def record_curve_diagnostics(m: ChartMetric, curve: DiscreteCurve):
    """Record the constraint residual max_i |<zdot,zdot> + eps^2| and the
    future-pointing margin max_i <Y, zdot> (negative = good)."""
    z, v = curve.z, curve.zdot
    energy = lorentz_form(m, z, v, v)
    curve.constraint_residual = float(np.max(np.abs(energy + curve.epsilon**2)))
    G = m.metric(*split(z))
    curve.future_margin_max = float(np.max(np.einsum("...a,...a->...", G[..., -1, :], v)))
    if curve.future_margin_max >= 0.0:
        raise CurveConstraintError(
            f"curve is not future pointing (max <Y,zdot> = {curve.future_margin_max:.3g})"
        )
    return curve


def riemann_speed(m: ChartMetric, curve: DiscreteCurve):
    """Node values of sqrt(<zdot, zdot>_R)."""
    v = curve.zdot
    return np.sqrt(np.maximum(riemann_form(m, curve.z, v, v), 0.0))


def riemann_length(m: ChartMetric, curve: DiscreteCurve):
    sp = CubicSpline(curve.s, riemann_speed(m, curve))
    return float(sp.integrate(curve.s[0], curve.s[-1]))


def arc_parameters(m: ChartMetric, curve: DiscreteCurve, k: int, refine: int = 8):
    """Parameters of k+1 marks with equal cumulative Riemannian arc along the curve."""
    sp = CubicSpline(curve.s, riemann_speed(m, curve))
    dense = np.linspace(curve.s[0], curve.s[-1], refine * (len(curve.s) - 1) + 1)
    cum = np.concatenate([[0.0], np.cumsum(np.fromiter(
        (sp.integrate(a, b) for a, b in zip(dense[:-1], dense[1:])), float))])
    targets = np.linspace(0.0, cum[-1], k + 1)
    params = np.interp(targets, cum, dense)
    params[0], params[-1] = curve.s[0], curve.s[-1]
    return params, cum[-1]


# -- worldlines -----------------------------------------------------------------


class VerticalWorldline:
    """Integral curve of the time axis: s -> (x0, t0 + s).  Injective, timelike,
    future pointing for any chart metric (lapse > 0)."""

    def __init__(self, x0, t0=0.0):
        self.x0 = np.asarray(x0, float)
        self.t0 = float(t0)

    def point(self, s):
        s = np.asarray(s, float)
        return np.broadcast_to(self.x0, s.shape + self.x0.shape).copy(), self.t0 + s

    def velocity(self, s):
        d = len(self.x0) + 1
        v = np.zeros(d)
        v[-1] = 1.0
        return v

    def locate(self, x, t, tol_scale=None):
        """Nearest-parameter projection; returns (s, spatial offset)."""
        offset = float(np.linalg.norm(np.asarray(x, float) - self.x0))
        return float(t) - self.t0, offset

    def describe(self):
        return {"kind": "vertical", "x0": self.x0.tolist(), "t0": self.t0}


class SampledWorldline:
    """General C^2 worldline given by a callable s -> (x, t) on a finite range.

    Used only for arrival-time readout; the catalog keeps vertical worldlines.
    """

    def __init__(self, fn, s_range, samples=2048):
        self.fn = fn
        self.s_min, self.s_max = map(float, s_range)
        grid = np.linspace(self.s_min, self.s_max, samples)
        pts = np.asarray([np.concatenate([np.atleast_1d(fn(si)[0]), [fn(si)[1]]]) for si in grid])
        self._spline = CubicSpline(grid, pts, axis=0)
        self._grid = grid

    def point(self, s):
        z = self._spline(s)
        return z[..., :-1], z[..., -1]

    def velocity(self, s):
        return self._spline(s, 1)

    def locate(self, x, t, tol_scale=None):
        z = np.concatenate([np.asarray(x, float), [float(t)]])
        d2 = np.sum((self._spline(self._grid) - z) ** 2, axis=1)
        i = int(np.argmin(d2))
        lo = self._grid[max(i - 1, 0)]
        hi = self._grid[min(i + 1, len(self._grid) - 1)]
        from scipy.optimize import minimize_scalar

        res = minimize_scalar(lambda u: float(np.sum((self._spline(u) - z) ** 2)),
                              bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-14})
        return float(res.x), float(np.sqrt(res.fun))


def validate_worldline(m: ChartMetric, gamma, s_values):
    """Sampled check that gamma is timelike and future pointing."""
    for s in np.atleast_1d(s_values):
        x, t = gamma.point(np.asarray(s))
        v = gamma.velocity(s)
        z = np.concatenate([np.atleast_1d(x).ravel(), np.atleast_1d(t).ravel()])
        sq = float(lorentz_form(m, z, v, v))
        G = m.metric(z[:-1], z[-1])
        margin = float(G[-1, :] @ v)
        if sq >= 0 or margin >= 0:
            raise CurveConstraintError("worldline must be timelike and future pointing")
    return True


def arrival_time(z: DiscreteCurve, gamma, tol=1e-9) -> float:
    """Worldline parameter of the curve endpoint (the arrival-time functional)."""
    x1, t1 = z.endpoint()
    s, offset = gamma.locate(x1, t1)
    if offset > tol * (1.0 + np.linalg.norm(np.asarray(x1))):
        raise EndpointError(offset)
    return s


# -- parallel transport and variation projection --------------------------------


def parallel_transport(m: ChartMetric, curve: DiscreteCurve, v, s0=0.0, substeps=2):
    """Parallel transport of the vector(s) v along the curve from parameter s0.

    v has shape (d,) or (d, k) for k simultaneous columns.  Returns samples of
    the transported field on the curve grid, shape (N+1, d[, k]).
    """
    v = np.asarray(v, float)
    cols = v.ndim == 2
    V = v if cols else v[:, None]
    sp = curve.spline()
    s = curve.s
    N = len(s) - 1
    h = (s[1] - s[0]) / substeps
    i0 = int(round((s0 - s[0]) / (s[1] - s[0])))

    def rhs(si, Vi):
        z = sp(si)
        zd = sp(si, 1)
        Gam = christoffel_at(m, z)
        return -np.einsum("kij,i,ja->ka", Gam, zd, Vi)

    out = np.empty((N + 1,) + V.shape)
    out[i0] = V

    def sweep(rng):
        Vi = out[i0].copy()
        for i in rng:
            direction = 1 if i > i0 else -1
            si = s[i - direction]
            Vi = out[i - direction].copy()
            for q in range(substeps):
                a = si + direction * q * h
                step = direction * h
                k1 = rhs(a, Vi)
                k2 = rhs(a + 0.5 * step, Vi + 0.5 * step * k1)
                k3 = rhs(a + 0.5 * step, Vi + 0.5 * step * k2)
                k4 = rhs(a + step, Vi + step * k3)
                Vi = Vi + (step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            out[i] = Vi

    sweep(range(i0 + 1, N + 1))
    sweep(range(i0 - 1, -1, -1))
    return out if cols else out[:, :, 0]


def parallel_transport_receiver(m: ChartMetric, curve: DiscreteCurve, gamma):
    """The field U(z): parallel transport of the worldline velocity at the
    arrival point backwards along the curve (the terminal-value problem)."""
    tau = arrival_time(curve, gamma)
    U1 = np.asarray(gamma.velocity(tau), float)
    return parallel_transport(m, curve, U1, s0=curve.s[-1])


def covariant_derivative(m: ChartMetric, curve: DiscreteCurve, field):
    """D_s of a vector field sampled on the curve grid (spline derivative + connection)."""
    field = np.asarray(field, float)
    fsp = CubicSpline(curve.s, field, axis=0)
    fprime = fsp(curve.s, 1)
    Gam = christoffel_at(m, curve.z)
    return fprime + np.einsum("skij,si,sj->sk", Gam, curve.zdot, field)


def project_variation(m: ChartMetric, curve: DiscreteCurve, U, zeta):
    """Project a vector field with zeta(0)=0 onto the admissible variations.

    Returns (V, mu, dtau) where V = zeta - mu U, mu is the cumulative integral
    of <D_s zeta, zdot> / <U, zdot>, and dtau = -mu(1) is the arrival-time
    differential along the projected field.
    """
    zeta = np.asarray(zeta, float)
    Dzeta = covariant_derivative(m, curve, zeta)
    num = lorentz_form(m, curve.z, Dzeta, curve.zdot)
    den = lorentz_form(m, curve.z, np.asarray(U, float), curve.zdot)
    if np.any(np.abs(den) < 1e-14):
        raise CurveConstraintError("transported receiver velocity degenerate against zdot")
    integrand = num / den
    mu = CubicSpline(curve.s, integrand).antiderivative()(curve.s)
    V = zeta - mu[:, None] * np.asarray(U, float)
    return V, mu, -float(mu[-1])


# -- serialization ---------------------------------------------------------------


def curve_to_csv(curve: DiscreteCurve, path, tolerances=None):
    """Write a curve as CSV with a JSON header line (epsilon, tolerances, metric)."""
    header = {
        "epsilon": curve.epsilon,
        "metric": curve.metric_name,
        "tolerances": tolerances or {"constraint": curve.constraint_residual},
    }
    cols = ["s"] + [f"x{i+1}" for i in range(curve.n)] + ["t"]
    buf = io.StringIO()
    buf.write("# " + json.dumps(header) + "\n")
    buf.write(",".join(cols) + "\n")
    data = np.column_stack([curve.s, curve.x, curve.t])
    np.savetxt(buf, data, delimiter=",", fmt="%.17g")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def curve_from_csv(m: ChartMetric, path):
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError("missing JSON header line")
        header = json.loads(first[1:].strip())
        fh.readline()  # column names
        data = np.loadtxt(fh, delimiter=",")
    s = data[:, 0]
    x = data[:, 1:-1]
    t = data[:, -1]
    return curve_from_samples(m, s, x, t, header["epsilon"])


# -- admissible random curves -----------------------------------------------------


def random_admissible_curve(m: ChartMetric, p, gamma: VerticalWorldline, epsilon,
                            rng, n=256, modes=4, amplitude=0.15):
    """A random smooth spatial path from p to the worldline anchor, lifted to a
    causal curve.  Amplitude is relative to the endpoint separation."""
    x0 = np.asarray(p.x, float)
    x1 = gamma.x0
    scale = np.linalg.norm(x1 - x0)
    s = np.linspace(0.0, 1.0, n + 1)
    for _ in range(32):
        x = x0 + np.outer(s, x1 - x0)
        for k in range(1, modes + 1):
            a = rng.normal(size=len(x0)) * amplitude * scale / k
            x = x + np.outer(np.sin(np.pi * k * s), a)
        speed = np.linalg.norm(np.diff(x, axis=0), axis=1)
        if speed.min() > 1e-6 * scale:
            try:
                return lift_curve(m, x, p.t, epsilon, s=s)
            except (CurveConstraintError, DomainExitError):
                continue
    raise CurveConstraintError("could not draw an admissible random curve")
