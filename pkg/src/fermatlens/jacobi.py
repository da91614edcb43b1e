"""Jacobi fields, conjugate points, geometric index, and the Hessian index.

The matrix Jacobi system is integrated in a parallel-propagated orthonormal
frame along the geodesic: the frame equation and the second-order system
ride one RK4 scan with curvature evaluated at precomputed stage points.
Conjugate points are rank drops of the endpoint matrix of the basis solutions
restricted to the zdot-orthogonal complement (the full matrix for null
geodesics, where that complement is degenerate).
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq, minimize_scalar

from .errors import DegenerateDetectionError, IndeterminateIndexError
from .curves import arrival_time
from .geometry import christoffel_at, curvature_tensor, lorentz_form
from .metrics import ChartMetric
from .records import GeodesicRecord


def lorentz_gram_schmidt(G, first):
    """Orthonormal frame columns (timelike first, spacelike rest) for the
    metric matrix G, starting from the timelike vector ``first``."""
    d = len(G)
    sq = float(first @ G @ first)
    if sq >= 0:
        raise ValueError("frame seed must be timelike")
    cols = [first / np.sqrt(-sq)]
    signs = [-1.0]
    for k in range(d):
        v = np.zeros(d)
        v[k] = 1.0
        for e, sg in zip(cols, signs):
            v = v - sg * (e @ G @ v) * e
        nrm = float(v @ G @ v)
        if nrm > 1e-12:
            cols.append(v / np.sqrt(nrm))
            signs.append(1.0)
        if len(cols) == d:
            break
    if len(cols) < d:
        raise ValueError("could not complete the frame")
    return np.column_stack(cols)


class JacobiData:
    """Frame and basis Jacobi solutions along a geodesic record's curve.

    Attributes: s (fine grid), E (frame columns), C / Cd (frame components of
    the matrix solution with C(0)=0, Cd(0)=I), eta (frame signature diag).
    """

    def __init__(self, s, E, C, Cd, eta, zdot0):
        self.s = s
        self.E = E
        self.C = C
        self.Cd = Cd
        self.eta = eta
        self.zdot0 = zdot0


def _stage_tensors(m, curve, substeps):
    N = (len(curve.s) - 1) * substeps
    h = 1.0 / N
    nodes = np.linspace(0.0, 1.0, N + 1)
    mids = nodes[:-1] + 0.5 * h
    params = np.concatenate([nodes, mids])
    sp = curve.spline()
    zs = sp(params)
    vsp = CubicSpline(curve.s, curve.zdot, axis=0)
    vs = vsp(params)
    Gam = christoffel_at(m, zs)
    R = curvature_tensor(m, zs)
    return N, h, nodes, (zs, vs, Gam, R)


def integrate_jacobi_system(m: ChartMetric, record: GeodesicRecord, substeps=2) -> JacobiData:
    """Integrate frame transport and the matrix Jacobi equation along the record."""
    curve = record.curve
    d = curve.n + 1
    N, h, nodes, (zs, vs, Gam, R) = _stage_tensors(m, curve, substeps)
    z0 = curve.z[0]
    v0 = curve.zdot[0]
    G0 = m.metric(z0[:-1], z0[-1])
    if record.epsilon > 0:
        E0 = lorentz_gram_schmidt(G0, v0)
    else:
        Y = np.zeros(d)
        Y[-1] = 1.0
        E0 = lorentz_gram_schmidt(G0, Y)
    eta = np.ones(d)
    eta[0] = -1.0

    Gmats = m.metric(zs[..., :-1], zs[..., -1])

    def rhs(idx, E, C, Cd):
        Gm, Rt, v, Gmat = Gam[idx], R[idx], vs[idx], Gmats[idx]
        dE = -np.einsum("kij,i,ja->ka", Gm, v, E)
        # curvature applied to frame columns, then frame components
        P = np.einsum("lkij,ia,j,k->la", Rt, E, v, v)  # R(E_a, zdot) zdot
        K = E.T @ Gmat @ P  # <E_c, R(E_a,zdot)zdot> with Lorentz metric
        Mmat = (K.T / eta).T  # eta^{-1} K
        return dE, Cd, -Mmat @ C

    E = E0.copy()
    C = np.zeros((d, d))
    Cd = np.eye(d)
    Es = np.empty((N + 1, d, d))
    Cs = np.empty((N + 1, d, d))
    Cds = np.empty((N + 1, d, d))
    Es[0], Cs[0], Cds[0] = E, C, Cd
    for j in range(N):
        ia, imid = j, N + 1 + j
        k1 = rhs(ia, E, C, Cd)
        k2 = rhs(imid, E + 0.5 * h * k1[0], C + 0.5 * h * k1[1], Cd + 0.5 * h * k1[2])
        k3 = rhs(imid, E + 0.5 * h * k2[0], C + 0.5 * h * k2[1], Cd + 0.5 * h * k2[2])
        k4 = rhs(ia + 1, E + h * k3[0], C + h * k3[1], Cd + h * k3[2])
        E = E + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        C = C + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        Cd = Cd + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        Es[j + 1], Cs[j + 1], Cds[j + 1] = E, C, Cd
    return JacobiData(nodes, Es, Cs, Cds, eta, v0)


def jacobi_integrate(m: ChartMetric, record: GeodesicRecord, zeta0, dzeta0, substeps=2):
    """Solve the Jacobi equation along the record with initial value zeta0 and
    initial covariant derivative dzeta0 (coordinate components).  Returns the
    field sampled on the fine grid, shape (len(s), d), plus the grid."""
    data = integrate_jacobi_system(m, record, substeps=substeps)
    E0 = data.E[0]
    c0 = np.linalg.solve(E0, np.asarray(zeta0, float))
    cd0 = np.linalg.solve(E0, np.asarray(dzeta0, float))
    # frame components of the solution: c(s) = C(s) cd0 + D(s) c0, where D is
    # the companion solution with D(0)=I, Dd(0)=0; recover it by linearity of
    # the combined system: integrate once more only when c0 is nonzero.
    if np.allclose(c0, 0.0):
        coeffs = data.C @ cd0
    else:
        coeffs = _jacobi_with_value(m, record, data, c0, cd0)
    field = np.einsum("sda,sa->sd", data.E, coeffs)
    return data.s, field


def _jacobi_with_value(m, record, data, c0, cd0, substeps=2):
    curve = record.curve
    N, h, nodes, (zs, vs, Gam, R) = _stage_tensors(m, record.curve, substeps)
    Gmats = m.metric(zs[..., :-1], zs[..., -1])
    eta = data.eta

    def rhs(idx, E, c, cd):
        Gm, Rt, v, Gmat = Gam[idx], R[idx], vs[idx], Gmats[idx]
        dE = -np.einsum("kij,i,ja->ka", Gm, v, E)
        P = np.einsum("lkij,ia,j,k->la", Rt, E, v, v)
        K = E.T @ Gmat @ P
        Mmat = (K.T / eta).T
        return dE, cd, -Mmat @ c

    E = data.E[0].copy()
    c = c0.copy()
    cd = cd0.copy()
    out = np.empty((N + 1, len(c0)))
    out[0] = c
    for j in range(N):
        ia, imid = j, N + 1 + j
        k1 = rhs(ia, E, c, cd)
        k2 = rhs(imid, E + 0.5 * h * k1[0], c + 0.5 * h * k1[1], cd + 0.5 * h * k1[2])
        k3 = rhs(imid, E + 0.5 * h * k2[0], c + 0.5 * h * k2[1], cd + 0.5 * h * k2[2])
        k4 = rhs(ia + 1, E + h * k3[0], c + h * k3[1], cd + h * k3[2])
        E = E + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        c = c + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        cd = cd + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        out[j + 1] = c
    return out


def _detector_matrix(data: JacobiData, timelike: bool):
    """Endpoint matrices restricted to the zdot-complement for timelike records
    (the frame is adapted, so that is the lower-right block); full for null."""
    return data.C[:, 1:, 1:] if timelike else data.C


def conjugate_points(m: ChartMetric, record: GeodesicRecord, substeps=2,
                     zero_band=1e-7, s_tol=1e-8, dwell=6):
    """Locate parameters where the Jacobi endpoint matrix drops rank.

    Returns a list of (s, multiplicity).  Detection tracks the smallest
    singular value (local minima under the zero band) and determinant sign
    changes, refined by bisection / scalar minimization to ``s_tol``.  A
    singular value dwelling below the band over ``dwell`` consecutive fine
    nodes raises DegenerateDetectionError.
    """
    data = integrate_jacobi_system(m, record, substeps=substeps)
    Cm = _detector_matrix(data, record.epsilon > 0)
    s = data.s
    svals = np.linalg.svd(Cm, compute_uv=False)
    smin = svals[..., -1]
    scale = np.maximum.accumulate(np.linalg.norm(Cm.reshape(len(s), -1), axis=1))
    scale = np.maximum(scale, 1e-30)
    band = zero_band * scale
    dets = np.linalg.det(Cm)

    below = smin[1:] < band[1:]
    run = 0
    for flag in below:
        run = run + 1 if flag else 0
        if run >= dwell:
            raise DegenerateDetectionError(
                "smallest singular value dwells below the zero band; refine the grid"
            )

    # spline models for refinement between fine nodes
    det_sp = CubicSpline(s, dets)
    smin_sp = CubicSpline(s, smin)

    found = []

    def multiplicity_at(s_star):
        i = min(int(round(s_star / (s[1] - s[0]))), len(s) - 1)
        C_star = _interp_matrix(Cm, s, s_star)
        sv = np.linalg.svd(C_star, compute_uv=False)
        return int(np.sum(sv < zero_band * max(np.linalg.norm(C_star), 1e-30)))

    # determinant sign changes (odd multiplicities)
    for i in range(1, len(s) - 1):
        if dets[i] == 0.0:
            continue
        if np.sign(dets[i]) != np.sign(dets[i + 1]) and s[i] > 0:
            s_star = brentq(det_sp, s[i], s[i + 1], xtol=s_tol)
            mult = max(multiplicity_at(s_star), 1)
            found.append((float(s_star), mult))
    # smallest-singular-value dips without a sign change (even multiplicities)
    for i in range(1, len(s) - 1):
        if smin[i] < smin[i - 1] and smin[i] < smin[i + 1] and smin[i] < band[i]:
            res = minimize_scalar(smin_sp, bounds=(s[i - 1], s[i + 1]), method="bounded",
                                  options={"xatol": s_tol})
            s_star = float(res.x)
            if any(abs(s_star - f[0]) < 4 * (s[1] - s[0]) for f in found):
                continue
            mult = multiplicity_at(s_star)
            if mult > 0:
                found.append((s_star, mult))
    # endpoint check: sigma_min at s = 1
    if smin[-1] < band[-1] and not any(abs(1.0 - f[0]) < 2 * (s[1] - s[0]) for f in found):
        found.append((1.0, max(multiplicity_at(1.0), 1)))
    found.sort()
    return found


def _interp_matrix(Cm, s, s_star):
    sp = CubicSpline(s, Cm.reshape(len(s), -1))
    return sp(s_star).reshape(Cm.shape[1:])


def geometric_index(record: GeodesicRecord, endpoint_tol=1e-6):
    """Sum of conjugate-point multiplicities on (0, 1].  The record must carry
    conjugate_points; an endpoint conjugate within ``endpoint_tol`` of s=1
    flags the record degenerate (excluded from Morse bookkeeping)."""
    if record.conjugate_points is None:
        raise ValueError("compute conjugate_points first")
    mu = 0
    degenerate = False
    for s_star, mult in record.conjugate_points:
        if s_star <= 0.0:
            continue
        mu += int(mult)
        if abs(s_star - 1.0) <= endpoint_tol:
            degenerate = True
    return mu, degenerate


def index_record(m: ChartMetric, record: GeodesicRecord, substeps=2) -> GeodesicRecord:
    """Fill conjugate points and the geometric index on a record."""
    pts = conjugate_points(m, record, substeps=substeps)
    probe = record.with_index(pts, 0)
    mu, degenerate = geometric_index(probe)
    return record.with_index(pts, mu, degenerate)


def admissible_projection(m: ChartMetric, record: GeodesicRecord, V):
    """Map a field V along the curve into the admissible class by adding the
    tangential compensation V + <V, zdot> zdot / eps^2 (timelike records)."""
    eps = record.epsilon
    if eps <= 0:
        raise ValueError("projection divides by eps^2; timelike records only")
    curve = record.curve
    zdot = curve.zdot
    Vz = lorentz_form(m, curve.z, np.asarray(V, float), zdot)
    return V + (Vz / eps**2)[:, None] * zdot


def hessian_index(m: ChartMetric, record: GeodesicRecord, gamma, K=32,
                  substeps=2, zero_band=1e-9):
    """Galerkin count of negative directions of the arrival-time Hessian.

    Basis: Fourier-sine profiles on the parallel spacelike frame legs (which
    satisfy the admissibility condition <D_s zeta, zdot> = 0 exactly, making
    the tangential compensation vanish).  The kinetic block is analytic; the
    curvature block is Simpson-integrated on the fine grid.  Timelike records
    only.  Raises IndeterminateIndexError when an eigenvalue falls inside the
    zero band.
    """
    if record.epsilon <= 0:
        raise ValueError("hessian index is defined for timelike records (eps > 0)")
    curve = record.curve
    d = curve.n + 1
    data = integrate_jacobi_system(m, record, substeps=substeps)
    s = data.s
    N = len(s) - 1
    # curvature form on the spacelike frame legs: K_ab(s) = <R(E_a, zdot)zdot, E_b>
    vsp = CubicSpline(curve.s, curve.zdot, axis=0)
    vs = vsp(s)
    zs = curve.spline()(s)
    R = curvature_tensor(m, zs)
    G = m.metric(zs[..., :-1], zs[..., -1])
    P = np.einsum("slkij,sia,sj,sk->sla", R, data.E, vs, vs)
    Kab = np.einsum("slb,slc,sca->sba", data.E, G, P)[:, 1:, 1:]

    # arrival prefactor: -1 / <gammadot(tau), zdot(1)>, required negative pairing
    tau = arrival_time(curve, gamma, tol=1e-6)
    gdot = np.asarray(gamma.velocity(tau), float)
    pair = float(lorentz_form(m, curve.z[-1], gdot, curve.zdot[-1]))
    if pair >= 0:
        raise ValueError("worldline pairing <gammadot, zdot(1)> must be negative")
    pref = -1.0 / pair

    nperp = d - 1
    kmax = (K + nperp - 1) // nperp
    basis = [(k, a) for k in range(1, kmax + 1) for a in range(nperp)][:K]
    sins = {k: np.sin(k * np.pi * s) for k in range(1, kmax + 1)}
    w = _simpson_weights(N, s[1] - s[0])
    Gm = np.zeros((K, K))
    for i, (k, a) in enumerate(basis):
        for j, (l, b) in enumerate(basis):
            if j < i:
                continue
            val = 0.0
            if k == l and a == b:
                val += 0.5 * (k * np.pi) ** 2
            val -= float(np.sum(w * sins[k] * sins[l] * Kab[:, a, b]))
            Gm[i, j] = Gm[j, i] = pref * val
    evals = np.linalg.eigvalsh(Gm)
    scale = np.max(np.abs(evals))
    if np.any(np.abs(evals) < zero_band * scale):
        raise IndeterminateIndexError(
            "Hessian eigenvalue inside the zero band; increase K or refine the grid"
        )
    return int(np.sum(evals < -zero_band * scale))


def _simpson_weights(N, h):
    if N % 2 != 0:
        raise ValueError("Simpson weights need an even interval count")
    w = np.ones(N + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (h / 3.0)
