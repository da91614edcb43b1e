"""Transition maps between null and timelike curves, and epsilon-families.

In the adapted chart the flow of the time axis is the exact shift
(x, t) -> (x, t + sigma), so lifting a null curve to the epsilon-timelike one
(and projecting back) is a scalar ODE for sigma(s) driven by the curve data.
The family machinery continues a null geodesic to timelike geodesics with
prescribed epsilon through the endpoint Newton solver, warm-started with the
quadratic epsilon-scaling of the velocity correction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import EpsilonTooLargeError, FamilyConstructionError, NonConvergenceError
from .curves import DiscreteCurve, arrival_time, record_curve_diagnostics
from .geometry import christoffel_at, lorentz_form, riemann_form
from .metrics import ChartMetric
from .records import GeodesicRecord
from .shooting import project_to_constraint, record_from_connector, solve_connector


def _shift_rate(m: ChartMetric, x, t_shifted, xdot, tdot, eps_target):
    """Time-shift velocity solving the causal quadratic at the shifted point.

    Returns sigma_dot with <zdot_shifted, zdot_shifted> = -eps_target^2 and
    <zdot_shifted, Y> = -sqrt(quarter_disc) < 0 (the future branch).
    """
    a = m.alpha(x, t_shifted)
    g = m.shift(x, t_shifted)
    b = m.lapse(x, t_shifted)
    A = np.einsum("...i,...i->...", g, xdot) - b * tdot
    B = (
        np.einsum("...ij,...i,...j->...", a, xdot, xdot)
        + 2.0 * np.einsum("...i,...i->...", g, xdot) * tdot
        - b * tdot**2
    )
    quarter = A * A + b * (B + eps_target**2)
    quarter = np.maximum(quarter, 0.0)
    return (A + np.sqrt(quarter)) / b


def _integrate_shift(m, curve, eps_target, substeps, sigma_band):
    """RK4 for sigma(s) along the curve; stage data from the curve splines."""
    s = curve.s
    N = len(s) - 1
    h = (s[1] - s[0]) / substeps
    zsp = curve.spline()
    vsp = CubicSpline(s, curve.zdot, axis=0)

    def rate(si, sigma):
        z = zsp(si)
        v = vsp(si)
        return _shift_rate(m, z[..., :-1], z[..., -1] + sigma, v[..., :-1], v[..., -1],
                           eps_target)

    sigma = np.empty(N + 1)
    sigma[0] = 0.0
    val = 0.0
    for i in range(N):
        si = s[i]
        for q in range(substeps):
            a = si + q * h
            k1 = rate(a, val)
            k2 = rate(a + 0.5 * h, val + 0.5 * h * k1)
            k3 = rate(a + 0.5 * h, val + 0.5 * h * k2)
            k4 = rate(a + h, val + h * k3)
            val = val + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if abs(val) > sigma_band:
                raise EpsilonTooLargeError(
                    f"time shift left its band at s = {a + h:.4g} (|sigma| = {abs(val):.3g})"
                )
        sigma[i + 1] = val
    return sigma


def _shifted_curve(m, curve, sigma, eps_target):
    t_new = curve.t + sigma
    sdot = _shift_rate(m, curve.x, t_new, curve.xdot, curve.tdot, eps_target)
    out = DiscreteCurve(
        s=curve.s,
        x=curve.x.copy(),
        t=t_new,
        xdot=curve.xdot.copy(),
        tdot=curve.tdot + sdot,
        epsilon=float(eps_target),
        metric_name=curve.metric_name,
    )
    record_curve_diagnostics(m, out)
    return out


def lift_phi(m: ChartMetric, z: DiscreteCurve, epsilon: float, substeps=2,
             sigma_band=np.inf) -> DiscreteCurve:
    """Lift a null curve to the epsilon-timelike one through the time-axis flow."""
    if z.epsilon != 0.0:
        raise ValueError("lift_phi expects a null curve")
    if epsilon == 0.0:
        return z
    sigma = _integrate_shift(m, z, epsilon, substeps, sigma_band)
    return _shifted_curve(m, z, sigma, epsilon)


def project_psi(m: ChartMetric, z: DiscreteCurve, substeps=2,
                sigma_band=np.inf) -> DiscreteCurve:
    """Project an epsilon-timelike curve to its null companion (shift target 0)."""
    if z.epsilon <= 0.0:
        raise ValueError("project_psi expects a timelike curve")
    sigma = _integrate_shift(m, z, 0.0, substeps, sigma_band)
    return _shifted_curve(m, z, sigma, 0.0)


# -- distances ------------------------------------------------------------------


def sup_distance(m: ChartMetric, za: DiscreteCurve, zb: DiscreteCurve):
    """max_s of the Riemannian norm of the coordinate difference field."""
    delta = zb.z - za.z
    val = riemann_form(m, za.z, delta, delta)
    return float(np.sqrt(np.max(np.maximum(val, 0.0))))


def h1_distance(m: ChartMetric, za: DiscreteCurve, zb: DiscreteCurve):
    """Distance induced by the curve-space inner product: the L^2 norm of the
    covariant derivative of the difference field along the base curve."""
    delta = zb.z - za.z
    dsp = CubicSpline(za.s, delta, axis=0)(za.s, 1)
    Gam = christoffel_at(m, za.z)
    Dd = dsp + np.einsum("skij,si,sj->sk", Gam, za.zdot, delta)
    integrand = np.maximum(riemann_form(m, za.z, Dd, Dd), 0.0)
    return float(np.sqrt(CubicSpline(za.s, integrand).integrate(0.0, 1.0)))


def c2_distance(za: DiscreteCurve, zb: DiscreteCurve):
    """Uniform distance up to second derivatives (coordinate components)."""
    sa, sb = za.spline(), zb.spline()
    s = za.s
    d0 = np.abs(sb(s) - sa(s)).max()
    d1 = np.abs(sb(s, 1) - sa(s, 1)).max()
    d2 = np.abs(sb(s, 2) - sa(s, 2)).max()
    return float(d0 + d1 + d2)


# -- epsilon families -------------------------------------------------------------


@dataclass
class EpsilonFamily:
    """Timelike geodesics continuing a null geodesic, with convergence data."""

    base: GeodesicRecord
    epsilons: list = field(default_factory=list)
    members: list = field(default_factory=list)
    taus: list = field(default_factory=list)
    indices: list = field(default_factory=list)
    d_sup: list = field(default_factory=list)
    d_h1: list = field(default_factory=list)
    d_c2: list = field(default_factory=list)
    stable_from: int | None = None

    def report(self):
        rows = []
        for k in range(len(self.epsilons)):
            rows.append(
                {
                    "k": k,
                    "epsilon": self.epsilons[k],
                    "tau": self.taus[k],
                    "mu": self.indices[k],
                    "d_sup": self.d_sup[k],
                    "d_h1": self.d_h1[k],
                    "d_c2": self.d_c2[k],
                    "residual": self.members[k].residual,
                }
            )
        return {
            "tau_base": self.base.tau,
            "mu_base": self.base.mu,
            "stable_from": self.stable_from,
            "members": rows,
        }


def epsilon_family(
    m: ChartMetric,
    base: GeodesicRecord,
    eps0: float,
    K: int,
    gamma,
    tolerance: float = 1e-4,
) -> EpsilonFamily:
    """Construct the family of epsilon-geodesics through a null geodesic.

    The base must have a nonconjugate endpoint (checked on the record).  Each
    member solves the endpoint problem with <v,v> = -eps_k^2 by Newton, seeded
    from the previous member with the velocity correction scaled by the
    quadratic epsilon law; the sign <v_k - v_0, v_0> < 0 is verified on every
    member.
    """
    from .jacobi import index_record

    if base.epsilon != 0.0:
        raise ValueError("family base must be a null geodesic")
    if base.conjugate_points is None:
        base = index_record(m, base)
    if base.degenerate_endpoint:
        raise FamilyConstructionError("base endpoint is conjugate; family not defined")
    curve = base.curve
    p_z = curve.z[0]
    v0 = curve.zdot[0]
    grid_n = len(curve.s) - 1
    fam = EpsilonFamily(base=base)
    correction = None
    prev_eps = None
    for k in range(K + 1):
        eps_k = eps0 * 0.5**k
        if correction is None:
            v_seed = project_to_constraint(m, p_z, v0, eps_k)
        else:
            v_seed = project_to_constraint(
                m, p_z, v0 + correction * (eps_k / prev_eps) ** 2, eps_k
            )
        try:
            v_k, curve_k, diag = solve_connector(
                m, p_z, gamma.x0, eps_k, v_seed, out_samples=grid_n
            )
        except NonConvergenceError as exc:
            raise FamilyConstructionError(
                f"family Newton diverged at eps = {eps_k:.3g}; reduce eps0"
            ) from exc
        correction = v_k - v0
        prev_eps = eps_k
        if float(lorentz_form(m, p_z, correction, v0)) >= 0:
            raise FamilyConstructionError(
                "family correction violates the exponential-map pairing sign"
            )
        rec = record_from_connector(m, gamma, v_k, curve_k, diag, eps_k, tolerance, "family")
        rec = index_record(m, rec)
        fam.epsilons.append(eps_k)
        fam.members.append(rec)
        fam.taus.append(rec.tau)
        fam.indices.append(rec.mu)
        fam.d_sup.append(sup_distance(m, curve, curve_k))
        fam.d_h1.append(h1_distance(m, curve, curve_k))
        fam.d_c2.append(c2_distance(curve, curve_k))
    mu_base = base.mu
    stable = None
    for k in range(len(fam.indices)):
        if all(mu == mu_base for mu in fam.indices[k:]):
            stable = k
            break
    fam.stable_from = stable
    return fam


def fit_power_law(eps_values, dist_values):
    """Log-log regression dist ~ M * eps^p; returns (M, p)."""
    eps_values = np.asarray(eps_values, float)
    dist_values = np.asarray(dist_values, float)
    mask = dist_values > 0
    lx = np.log(eps_values[mask])
    ly = np.log(dist_values[mask])
    p, logM = np.polyfit(lx, ly, 1)
    return float(np.exp(logM)), float(p)
