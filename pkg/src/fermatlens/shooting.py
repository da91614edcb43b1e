"""Two-point connector solver: Newton on the exponential-map endpoint.

Unknown: the initial velocity v at p.  Equations: the spatial endpoint of
exp_p(v) must land on the (vertical) worldline anchor and <v,v> must equal
-epsilon^2.  The Jacobian of the endpoint uses the coordinate matrix Jacobi
system along the current geodesic, so local invertibility is exactly the
nonconjugacy of the endpoint.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import DomainExitError, FamilyConstructionError, MetricDomainError, NonConvergenceError
from .curves import DiscreteCurve, record_curve_diagnostics
from .geometry import christoffel_at, curvature_tensor, integrate_geodesics, lorentz_form
from .records import GeodesicRecord


def _trajectory(m, z0, v0, steps):
    traj, vel, death = integrate_geodesics(m, z0[None], v0[None], 1.0, steps)
    if death[0] < steps:
        raise DomainExitError(death[0] / steps)
    return traj[:, 0], vel[:, 0]


def _energy_controlled_trajectory(m, z0, v0, out_n, energy_rtol, max_refine=4):
    """Integrate the geodesic adaptively (DOP853) and sample it on a uniform
    grid of ``out_n`` steps; the conservation of <zdot,zdot> is verified on
    the samples and the local tolerance tightened until it passes.

    Adaptive stepping is what makes near-core lensing rays affordable; the
    public exponential-map op keeps its fixed-step contract separately.
    """
    from scipy.integrate import solve_ivp

    d = len(z0)
    e0 = float(lorentz_form(m, z0, v0, v0))
    scale = 1.0 + float(np.abs(z0).max() + np.abs(v0).max())

    def rhs(s, y):
        # the chart box is a pseudo-coercivity diagnostic checked on results,
        # not a hard wall for Newton iterates; only metric validity stops us
        if not np.isfinite(y).all():
            raise DomainExitError(s)
        z = y[:d]
        v = y[d:]
        Gam = christoffel_at(m, z)
        return np.concatenate([v, -np.einsum("kij,i,j->k", Gam, v, v)])

    rtol = min(energy_rtol, 1e-9)
    y0 = np.concatenate([z0, v0])
    s_out = np.linspace(0.0, 1.0, out_n + 1)
    for _ in range(max_refine + 1):
        sol = solve_ivp(rhs, (0.0, 1.0), y0, method="DOP853", rtol=rtol,
                        atol=rtol * scale, t_eval=s_out)
        if not sol.success:
            raise NonConvergenceError(f"geodesic integration failed: {sol.message}")
        traj = sol.y[:d].T
        vel = sol.y[d:].T
        en = lorentz_form(m, traj, vel, vel)
        if np.max(np.abs(en - e0)) <= energy_rtol * (1.0 + abs(e0)):
            return traj, vel, out_n
        rtol *= 0.03
    raise NonConvergenceError("flow energy conservation stalled", {"rtol": rtol})


def exp_jacobian(m, traj, vel, jac_steps=None):
    """d exp_p(v) / dv at s=1 via the coordinate matrix Jacobi system.

    ``traj``/``vel`` sample the geodesic on a uniform grid; stage values come
    from their splines.  Columns are Jacobi fields with zeta(0)=0 and
    D_s zeta(0) = coordinate basis vectors.  The Jacobi grid is capped: an
    approximate endpoint derivative is fine for Newton, the residual is exact.
    """
    flow_steps = len(traj) - 1
    d = traj.shape[1]
    s = np.linspace(0.0, 1.0, flow_steps + 1)
    zsp = CubicSpline(s, traj, axis=0)
    vsp = CubicSpline(s, vel, axis=0)
    steps = jac_steps or min(flow_steps, 1024)
    h = 1.0 / steps

    stage_s = []
    for j in range(steps):
        a = j * h
        stage_s += [a, a + 0.5 * h, a + h]
    stage_s = np.asarray(stage_s)
    zs = zsp(stage_s)
    vs = vsp(stage_s)
    Gam = christoffel_at(m, zs)
    R = curvature_tensor(m, zs)

    def rhs(idx, Z, H):
        G, Rt, v = Gam[idx], R[idx], vs[idx]
        dZ = H - np.einsum("kij,i,ja->ka", G, v, Z)
        dH = -np.einsum("lkij,ia,j,k->la", Rt, Z, v, v) - np.einsum("kij,i,ja->ka", G, v, H)
        return dZ, dH

    Z = np.zeros((d, d))
    H = np.eye(d)
    for j in range(steps):
        i0 = 3 * j
        k1 = rhs(i0, Z, H)
        k2 = rhs(i0 + 1, Z + 0.5 * h * k1[0], H + 0.5 * h * k1[1])
        k3 = rhs(i0 + 1, Z + 0.5 * h * k2[0], H + 0.5 * h * k2[1])
        k4 = rhs(i0 + 2, Z + h * k3[0], H + h * k3[1])
        Z = Z + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        H = H + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return Z


def project_to_constraint(m, z0, v, epsilon):
    """Shift v along the time axis so that <v,v> = -epsilon^2, keeping it future."""
    G = m.metric(z0[:-1], z0[-1])
    Y = np.zeros(len(z0))
    Y[-1] = 1.0
    a = float(G[-1, -1])
    b = 2.0 * float(G[-1, :] @ v)
    c = float(v @ G @ v) + epsilon**2
    disc = b * b - 4 * a * c
    if disc < 0:
        raise FamilyConstructionError("cannot project onto the causal constraint")
    delta = -2.0 * c / (b - np.sqrt(disc))  # root continuous in c at c=0
    return v + delta * Y


def solve_connector(
    m,
    p_z,
    x_target,
    epsilon,
    v_init,
    steps=64,
    energy_rtol=1e-8,
    ftol=1e-11,
    max_iter=30,
    out_samples=256,
    budget=150,
):
    """Newton-solve exp_p(v) land on the vertical line at ``x_target`` with
    <v,v> = -epsilon^2.  Returns (v, curve, diagnostics).

    Iterations run at the (adaptive, energy-controlled) step count; the
    returned curve comes from one final integration fine enough for the
    output grid.
    """
    p_z = np.asarray(p_z, float)
    d = len(p_z)
    n = d - 1
    scale = 1.0 + np.linalg.norm(np.asarray(x_target) - p_z[:-1])
    v = np.asarray(v_init, float).copy()
    spent = [0]

    def traj_budgeted(vv, st):
        # one unit per 64-step block keeps stiff escalations bounded
        traj, vel, st = _energy_controlled_trajectory(m, p_z, vv, st, energy_rtol)
        spent[0] += max(st // 64, 1)
        if spent[0] > budget:
            raise NonConvergenceError("connector evaluation budget exhausted",
                                      {"budget": budget})
        return traj, vel, st

    G0 = m.metric(p_z[:-1], p_z[-1])

    def residual(vv, traj):
        F = np.empty(d)
        F[:n] = traj[-1][:n] - x_target
        F[n] = float(vv @ G0 @ vv) + epsilon**2
        return F

    def scaled_norm(F):
        return float(np.linalg.norm(np.concatenate([F[:n] / scale, [F[n] / scale**2]])))

    traj, vel, steps = traj_budgeted(v, steps)
    F = residual(v, traj)
    fnorm = scaled_norm(F)
    it = 0
    while fnorm > ftol and it < max_iter:
        J = np.empty((d, d))
        J[:n] = exp_jacobian(m, traj, vel)[:n]
        J[n] = 2.0 * (G0 @ v)
        try:
            dv = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as exc:
            raise NonConvergenceError("singular endpoint Jacobian (conjugate endpoint?)",
                                      {"iteration": it}) from exc
        lam = 1.0
        for _ in range(20):
            try:
                traj_n, vel_n, steps = traj_budgeted(v + lam * dv, steps)
                F_n = residual(v + lam * dv, traj_n)
            except (DomainExitError, MetricDomainError):
                lam *= 0.5
                continue
            if scaled_norm(F_n) < fnorm:
                break
            lam *= 0.5
        else:
            raise NonConvergenceError("connector line search stalled",
                                      {"iteration": it, "fnorm": fnorm})
        v = v + lam * dv
        traj, vel, F = traj_n, vel_n, F_n
        fnorm = scaled_norm(F)
        it += 1
    if fnorm > ftol:
        raise NonConvergenceError("connector Newton did not converge",
                                  {"iterations": it, "fnorm": fnorm})
    fine = ((max(steps, out_samples) + out_samples - 1) // out_samples) * out_samples
    traj, vel, fine = _energy_controlled_trajectory(m, p_z, v, fine, energy_rtol)
    stride = (len(traj) - 1) // out_samples
    zs = traj[::stride]
    vs = vel[::stride]
    s = np.linspace(0.0, 1.0, len(zs))
    curve = DiscreteCurve(
        s=s, x=zs[:, :n], t=zs[:, n], xdot=vs[:, :n], tdot=vs[:, n],
        epsilon=float(epsilon), metric_name=m.name,
    )
    record_curve_diagnostics(m, curve)
    return v, curve, {"iterations": it, "fnorm": float(fnorm), "steps": fine}


def geodesic_residual(m, curve: DiscreteCurve):
    """max_s of the Riemannian norm of D_s zdot along the curve.

    The acceleration uses the spline derivative of the stored node velocities
    (not the second derivative of positions), which keeps the discretization
    floor of the measure well below the tolerances used by the flow.
    """
    zd = curve.zdot
    zdd = CubicSpline(curve.s, zd, axis=0)(curve.s, 1)
    Gam = christoffel_at(m, curve.z)
    acc = zdd + np.einsum("skij,si,sj->sk", Gam, zd, zd)
    from .geometry import riemann_form

    val = riemann_form(m, curve.z, acc, acc)
    return float(np.sqrt(np.max(np.maximum(val, 0.0))))


def record_from_connector(m, gamma, v, curve, diag, epsilon, tolerance, provenance):
    from .curves import arrival_time

    tau = arrival_time(curve, gamma, tol=1e-6)
    return GeodesicRecord(
        curve=curve,
        epsilon=float(epsilon),
        tau=float(tau),
        residual=geodesic_residual(m, curve),
        tolerance=float(tolerance),
        metric_name=m.name,
        provenance=provenance,
        diagnostics=dict(diag),
    )
