"""Chart-form Lorentzian metrics and the built-in catalog.

Every metric lives in a single chart with coordinates (x_1..x_n, t); the time
axis is the last coordinate and +t is the future.  On a tangent (xi, theta)
the quadratic form is

    <alpha(x,t) xi, xi> + 2 <shift(x,t), xi> theta - lapse(x,t) theta**2

with alpha(x,t) symmetric positive definite and lapse(x,t) > 0.  Under those
two conditions the assembled (n+1)x(n+1) matrix automatically has Lorentzian
signature (+..+, -): the Schur complement of alpha is -lapse - <alpha^-1 G, G>.

Coefficient fields are vectorised: x has shape (..., n), t broadcasts against
the leading axes, and every result carries the broadcast batch shape.
"""

from __future__ import annotations

import numpy as np

from .errors import MetricDomainError


def _batchify(x, t):
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if t.shape == x.shape[:-1]:  # fast path: shapes already aligned
        return x, t, t.shape
    batch = np.broadcast_shapes(x.shape[:-1], t.shape)
    x = np.broadcast_to(x, batch + x.shape[-1:])
    return x, np.broadcast_to(t, batch), batch


class ChartMetric:
    """Base class: concrete metrics supply alpha / shift / lapse and, when
    available, their analytic first derivatives.

    derivative oracle: ``deriv_mode`` is "analytic" when the subclass provides
    closed-form first derivatives, "fd" to force central differences with step
    ``fd_step`` (also the fallback when no analytic derivative exists).
    """

    name = "chart-metric"
    time_dependent = False

    def __init__(self, n=3, deriv_mode="analytic", fd_step=1e-6, box=None):
        if deriv_mode not in ("analytic", "fd"):
            raise ValueError(f"unknown deriv_mode {deriv_mode!r}")
        self.n = int(n)
        self.dim = self.n + 1
        self.deriv_mode = deriv_mode
        self.fd_step = float(fd_step)
        self.box = None if box is None else (np.asarray(box[0], float), np.asarray(box[1], float))

    # -- coefficient fields -------------------------------------------------

    def alpha(self, x, t):
        raise NotImplementedError

    def shift(self, x, t):
        x, t, batch = _batchify(x, t)
        return np.zeros(batch + (self.n,))

    def lapse(self, x, t):
        x, t, batch = _batchify(x, t)
        return np.ones(batch)

    # Analytic derivatives return None when unavailable; the last axis runs
    # over (x_1..x_n, t).
    def alpha_grad(self, x, t):
        return None

    def shift_grad(self, x, t):
        x, t, batch = _batchify(x, t)
        return np.zeros(batch + (self.n, self.dim))

    def lapse_grad(self, x, t):
        x, t, batch = _batchify(x, t)
        return np.zeros(batch + (self.dim,))

    # -- chart domain ---------------------------------------------------------

    def contains(self, x, t):
        x, t, batch = _batchify(x, t)
        ok = np.isfinite(x).all(axis=-1) & np.isfinite(t)
        if self.box is not None:
            lo, hi = self.box
            ok &= (x >= lo).all(axis=-1) & (x <= hi).all(axis=-1)
        return ok

    # -- assembled metric -----------------------------------------------------

    def metric(self, x, t):
        """Assembled (..., n+1, n+1) Lorentzian matrix; raises on lapse <= 0."""
        x, t, batch = _batchify(x, t)
        a = self.alpha(x, t)
        g = self.shift(x, t)
        b = self.lapse(x, t)
        if np.any(~np.isfinite(b)) or np.any(b <= 0.0):
            raise MetricDomainError("lapse must be positive on the chart")
        G = np.zeros(batch + (self.dim, self.dim))
        G[..., : self.n, : self.n] = a
        G[..., : self.n, self.n] = g
        G[..., self.n, : self.n] = g
        G[..., self.n, self.n] = -b
        return G

    def _fd_coefficient_grads(self, x, t):
        n, d, h0 = self.n, self.dim, self.fd_step
        x, t, batch = _batchify(x, t)
        h = h0 * (1.0 + np.linalg.norm(x, axis=-1))
        da = np.zeros(batch + (n, n, d))
        dg = np.zeros(batch + (n, d))
        db = np.zeros(batch + (d,))
        for k in range(n):
            e = np.zeros(n)
            e[k] = 1.0
            dx = h[..., None] * e
            da[..., k] = (self.alpha(x + dx, t) - self.alpha(x - dx, t)) / (2 * h)[..., None, None]
            dg[..., k] = (self.shift(x + dx, t) - self.shift(x - dx, t)) / (2 * h)[..., None]
            db[..., k] = (self.lapse(x + dx, t) - self.lapse(x - dx, t)) / (2 * h)
        da[..., n] = (self.alpha(x, t + h) - self.alpha(x, t - h)) / (2 * h)[..., None, None]
        dg[..., n] = (self.shift(x, t + h) - self.shift(x, t - h)) / (2 * h)[..., None]
        db[..., n] = (self.lapse(x, t + h) - self.lapse(x, t - h)) / (2 * h)
        return da, dg, db

    def metric_grad(self, x, t):
        """Coordinate derivatives dG[..., a, b, c] = d_c g_ab."""
        x, t, batch = _batchify(x, t)
        da = self.alpha_grad(x, t) if self.deriv_mode == "analytic" else None
        if da is None:
            da, dg, db = self._fd_coefficient_grads(x, t)
        else:
            dg = self.shift_grad(x, t)
            db = self.lapse_grad(x, t)
        dG = np.zeros(batch + (self.dim, self.dim, self.dim))
        dG[..., : self.n, : self.n, :] = da
        dG[..., : self.n, self.n, :] = dg
        dG[..., self.n, : self.n, :] = dg
        dG[..., self.n, self.n, :] = -db
        return dG

    def validate_points(self, x, t):
        """Full invariant check (SPD alpha, lapse > 0, signature) at the given points."""
        x, t, batch = _batchify(x, t)
        if not np.all(self.contains(x, t)):
            raise MetricDomainError("point outside chart domain")
        b = self.lapse(x, t)
        if np.any(b <= 0.0):
            raise MetricDomainError("lapse must be positive")
        a = self.alpha(x, t)
        amin = np.linalg.eigvalsh(a)[..., 0]
        if np.any(amin <= 0.0):
            raise MetricDomainError("spatial operator must be positive definite")
        ev = np.linalg.eigvalsh(self.metric(x, t))
        if np.any(ev[..., 0] >= 0.0) or np.any(ev[..., 1:] <= 0.0):
            raise MetricDomainError("assembled matrix is not Lorentzian")
        return True

    def params(self):
        return {}

    def describe(self):
        return {"name": self.name, "n": self.n, "params": self.params()}


class Minkowski(ChartMetric):
    """Flat metric: alpha = I, shift = 0, lapse = 1."""

    name = "minkowski"

    def __init__(self, n=3, **kw):
        super().__init__(n=n, **kw)

    def alpha(self, x, t):
        x, t, batch = _batchify(x, t)
        return np.broadcast_to(np.eye(self.n), batch + (self.n, self.n)).copy()

    def alpha_grad(self, x, t):
        x, t, batch = _batchify(x, t)
        return np.zeros(batch + (self.n, self.n, self.dim))


class StaticSphere(ChartMetric):
    """Product of the time line with the unit round 2-sphere, in a stereographic chart.

    The chart maps x in R^2 to the sphere minus one pole; the spatial operator is
    conformal, 4 / (1 + |x|^2)^2 times the identity.  Great circles through
    generic points stay at finite |x|; ``box`` can cap the chart radius.
    """

    name = "static-sphere"

    def __init__(self, **kw):
        # default chart cap: keeps stray rays from racing toward the missing
        # pole (|x| -> inf); generous for any desk-scale great circle
        kw.setdefault("box", ([-1e3, -1e3], [1e3, 1e3]))
        super().__init__(n=2, **kw)

    def _conformal(self, x):
        r2 = np.sum(x * x, axis=-1)
        return 4.0 / (1.0 + r2) ** 2

    def alpha(self, x, t):
        x, t, batch = _batchify(x, t)
        lam = self._conformal(x)
        return lam[..., None, None] * np.eye(self.n)

    def alpha_grad(self, x, t):
        x, t, batch = _batchify(x, t)
        r2 = np.sum(x * x, axis=-1)
        dlam = -16.0 * x / (1.0 + r2[..., None]) ** 3
        da = np.zeros(batch + (self.n, self.n, self.dim))
        eye = np.eye(self.n)
        da[..., : self.n] = eye[:, :, None] * dlam[..., None, None, :]
        return da


class WeakFieldLens(ChartMetric):
    """Softened point-mass lens: alpha = (1 - 2 phi) I, lapse = 1 + 2 phi,
    phi(x) = -mass / sqrt(|x - center|^2 + soften^2).

    Regular for |x - center| > 0 whenever 2 mass <= soften keeps the lapse
    positive away from the exact center; callers should avoid querying the
    center itself when 2 mass == soften.
    """

    name = "weak-field-lens"

    def __init__(self, mass=1.0, soften=2.0, center=None, n=3, **kw):
        super().__init__(n=n, **kw)
        self.mass = float(mass)
        self.soften = float(soften)
        self.center = np.zeros(self.n) if center is None else np.asarray(center, float)
        if self.center.shape != (self.n,):
            raise ValueError("lens center must have the spatial dimension")

    def potential(self, x):
        d = np.asarray(x, float) - self.center
        return -self.mass / np.sqrt(np.sum(d * d, axis=-1) + self.soften**2)

    def potential_grad(self, x):
        d = np.asarray(x, float) - self.center
        r2 = np.sum(d * d, axis=-1) + self.soften**2
        return self.mass * d / r2[..., None] ** 1.5

    def alpha(self, x, t):
        x, t, batch = _batchify(x, t)
        return (1.0 - 2.0 * self.potential(x))[..., None, None] * np.eye(self.n)

    def lapse(self, x, t):
        x, t, batch = _batchify(x, t)
        return np.broadcast_to(1.0 + 2.0 * self.potential(x), batch).copy()

    def alpha_grad(self, x, t):
        x, t, batch = _batchify(x, t)
        dphi = self.potential_grad(x)
        da = np.zeros(batch + (self.n, self.n, self.dim))
        da[..., : self.n] = -2.0 * np.eye(self.n)[:, :, None] * dphi[..., None, None, :]
        return da

    def lapse_grad(self, x, t):
        x, t, batch = _batchify(x, t)
        db = np.zeros(batch + (self.dim,))
        db[..., : self.n] = 2.0 * self.potential_grad(x)
        return db

    def params(self):
        return {"mass": self.mass, "soften": self.soften, "center": self.center.tolist()}


_CATALOG = {
    "minkowski": Minkowski,
    "static-sphere": StaticSphere,
    "weak-field-lens": WeakFieldLens,
}


def make_metric(name, params=None):
    """Build a catalog metric from its name and a parameter map."""
    try:
        cls = _CATALOG[name]
    except KeyError:
        raise ValueError(f"unknown catalog metric {name!r}; have {sorted(_CATALOG)}") from None
    return cls(**(params or {}))


def catalog_names():
    return sorted(_CATALOG)
