"""Arrival-time shortening flow: local minimizers chained through vertical lines.

One sweep re-anchors the curve at equal Riemannian arc marks, drops a vertical
line (integral curve of the time axis) through each anchor, and replaces every
sub-arc by the discrete arrival-time minimizer toward the next vertical line;
the alternate sweep does the same through the sub-arc midpoints on the shifted
half-partition, which is what removes corners at the anchor breakpoints.

The segment objective is the polyline lift shared with ``curves``: chord
velocities per grid interval and interval-wise Simpson of the time rate.  The
value the optimizer decreases is bit-identical to the arrival time recorded on
the rebuilt curve, so the sweep-to-sweep tau history is exactly monotone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import (
    CurveConstraintError,
    DomainExitError,
    LocalityError,
    MetricDomainError,
    NonConvergenceError,
)
from .curves import (
    DiscreteCurve,
    VerticalWorldline,
    arc_parameters,
    arrival_time,
    lift_curve,
)
from .geometry import Event
from .metrics import ChartMetric
from .records import GeodesicRecord
from .shooting import geodesic_residual, record_from_connector, solve_connector


# -- segment objective: value and analytic gradient -----------------------------


def _stage_terms(m: ChartMetric, x, w, epsilon, want_grad):
    """Time rate f(x, w) at stage points and, optionally, (df/dx, df/dw).

    f = u + S with u = <G/b, w>, q = <(a/b) w, w>, S = sqrt(q + u^2 + eps^2/b).
    """
    t = np.zeros(x.shape[:-1])
    a = m.alpha(x, t)
    g = m.shift(x, t)
    b = m.lapse(x, t)
    aw = np.einsum("...ij,...j->...i", a, w)
    u = np.einsum("...i,...i->...", g, w) / b
    q = np.einsum("...i,...i->...", aw, w) / b
    S = np.sqrt(q + u * u + epsilon**2 / b)
    f = u + S
    if not want_grad:
        return f, None, None
    n = m.n
    da = m.alpha_grad(x, t)[..., :n]
    dg = m.shift_grad(x, t)[..., :n]
    db = m.lapse_grad(x, t)[..., :n]
    # d/dx of u, q, eps^2/b
    u_x = (np.einsum("...ia,...i->...a", dg, w) - u[..., None] * db) / b[..., None]
    q_x = (np.einsum("...ija,...i,...j->...a", da, w, w) - q[..., None] * db) / b[..., None]
    e_x = -(epsilon**2) * db / (b * b)[..., None]
    f_x = u_x + (q_x + 2.0 * u[..., None] * u_x + e_x) / (2.0 * S[..., None])
    f_w = g / b[..., None] + (aw / b[..., None] + u[..., None] * g / b[..., None]) / S[..., None]
    return f, f_x, f_w


def segment_value_grad(m: ChartMetric, X, h, epsilon, want_grad=True, mode="arrival"):
    """Polyline-Simpson functional of a segment and its gradient in the nodes.

    ``mode="arrival"`` is the lifted duration (interval-wise Simpson of the
    time rate, bit-identical to the sampled lift).  ``mode="energy"`` is the
    Simpson rule on rate^2 / 2: for null segments the arrival functional is
    reparameterization invariant and its discrete minimizers are degenerate
    (nodes may pile up); the energy has the same minimizing path with the node
    distribution pinned at constant rate, so it serves as the preconditioner.

    X has shape (M+1, n); the gradient covers all nodes (callers slice the
    interior).  Static metrics only; the catalog qualifies.
    """
    if m.time_dependent:
        raise NotImplementedError("segment optimizer requires a static metric")
    M = len(X) - 1
    w = np.diff(X, axis=0) / h
    if epsilon == 0.0 and mode == "arrival":
        speeds = np.linalg.norm(w, axis=1)
        if np.min(speeds) <= 1e-13 * (1.0 + np.max(speeds)):
            raise CurveConstraintError("zero-velocity sub-arc is degenerate for a null segment")
    mid = 0.5 * (X[:-1] + X[1:])
    stages = np.concatenate([X[:-1], mid, X[1:]], axis=0)
    wall = np.concatenate([w, w, w], axis=0)
    f, f_x, f_w = _stage_terms(m, stages, wall, epsilon, want_grad)
    if mode == "energy":
        if want_grad:
            f_x = f[..., None] * f_x
            f_w = f[..., None] * f_w
        f = 0.5 * f * f
    fa, fm, fb = f[:M], f[M : 2 * M], f[2 * M :]
    value = float(np.sum((h / 6.0) * (fa + 4.0 * fm + fb)))
    if not want_grad:
        return value, None
    fxa, fxm, fxb = f_x[:M], f_x[M : 2 * M], f_x[2 * M :]
    fwa, fwm, fwb = f_w[:M], f_w[M : 2 * M], f_w[2 * M :]
    fw_sum = fwa + 4.0 * fwm + fwb
    grad = np.zeros_like(X)
    # interval j contributes to nodes j and j+1
    grad[:-1] += (h / 6.0) * (fxa + 2.0 * fxm) - fw_sum / 6.0
    grad[1:] += (h / 6.0) * (fxb + 2.0 * fxm) + fw_sum / 6.0
    return value, grad


def _interior_grad(m, X, h, epsilon, mode="arrival"):
    value, grad = segment_value_grad(m, X, h, epsilon, mode=mode)
    return value, grad[1:-1].ravel()


def _colored_hessian(m, X, h, epsilon, delta, mode="arrival"):
    """Finite differences of the analytic gradient; the objective couples only
    adjacent nodes, so three node colors recover the full block-tridiagonal."""
    M = len(X) - 1
    n = X.shape[1]
    dim = (M - 1) * n
    H = np.zeros((dim, dim))
    for color in range(3):
        nodes = np.arange(1, M)[(np.arange(1, M) - 1) % 3 == color]
        if len(nodes) == 0:
            continue
        for a in range(n):
            Xp = X.copy()
            Xp[nodes, a] += delta
            _, gp = _interior_grad(m, Xp, h, epsilon, mode)
            Xm = X.copy()
            Xm[nodes, a] -= delta
            _, gm = _interior_grad(m, Xm, h, epsilon, mode)
            col = (gp - gm) / (2.0 * delta)
            for k in nodes:
                rows = np.arange(max(k - 1, 1), min(k + 1, M - 1) + 1)
                for r in rows:
                    H[(r - 1) * n : r * n, (k - 1) * n + a] = col[(r - 1) * n : r * n]
    return 0.5 * (H + H.T)


@dataclass
class SegmentResult:
    X: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    hessian_pd: bool


def _transversal_bases(X):
    """Per-interior-node orthonormal bases of the complement of the local chord
    direction.  Null segments are optimized in these coordinates: sliding the
    nodes along the path is gauge for the arrival functional at epsilon = 0."""
    w = np.diff(X, axis=0)
    tang = w[:-1] + w[1:]
    norms = np.linalg.norm(tang, axis=1, keepdims=True)
    tang = tang / np.where(norms > 0, norms, 1.0)
    bases = []
    for tk in tang:
        _, _, Vt = np.linalg.svd(tk[None, :])
        bases.append(Vt[1:].T)  # n x (n-1)
    return bases


def _reduce(bases, g, H):
    n = bases[0].shape[0]
    r = bases[0].shape[1]
    K = len(bases)
    B = np.zeros((K * n, K * r))
    for k, bk in enumerate(bases):
        B[k * n : (k + 1) * n, k * r : (k + 1) * r] = bk
    return B, B.T @ g, B.T @ H @ B


def _levenberg_newton(m, X0, h, epsilon, mode, gtol, max_iter, transversal):
    """Levenberg-damped Newton on the segment functional.

    ``transversal`` restricts steps to the complement of the local chord
    directions (the gauge reduction used when certifying null stationarity).
    Returns (X, value, grad_norm, iterations, hessian_pd, converged).
    """
    X = np.asarray(X0, float).copy()
    M = len(X) - 1

    def grad_norm(Xc, gc):
        if not transversal:
            return float(np.linalg.norm(gc))
        bases = _transversal_bases(Xc)
        gk = gc.reshape(M - 1, -1)
        return float(np.sqrt(sum(np.sum((bk.T @ gi) ** 2) for bk, gi in zip(bases, gk))))

    value, g = _interior_grad(m, X, h, epsilon, mode)
    hessian_pd = False
    lam = 1e-3
    it = 0
    gn = grad_norm(X, g)
    for it in range(max_iter):
        gn = grad_norm(X, g)
        if gn <= gtol:
            return X, value, gn, it, hessian_pd, True
        delta = 1e-6 * (1.0 + float(np.abs(X).max()))
        H = _colored_hessian(m, X, h, epsilon, delta, mode)
        if transversal:
            B, gr, Hr = _reduce(_transversal_bases(X), g, H)
        else:
            gr, Hr = g, H
        scale = max(float(np.abs(np.diag(Hr)).max()), 1e-30)
        eye = np.eye(len(Hr))
        accepted = False
        for _ in range(30):
            try:
                cf = cho_factor(Hr + lam * scale * eye, lower=True)
                step_r = cho_solve(cf, -gr)
            except np.linalg.LinAlgError:
                lam = max(4.0 * lam, 1e-12)
                continue
            step = B @ step_r if transversal else step_r
            Xn = X.copy()
            Xn[1:-1] += step.reshape(M - 1, -1)
            try:
                vn, gn_vec = _interior_grad(m, Xn, h, epsilon, mode)
            except (MetricDomainError, DomainExitError, CurveConstraintError):
                lam = max(4.0 * lam, 1e-12)
                continue
            # epsilon band: keep moving once the decrease drops below float
            # resolution near the minimum
            if np.isfinite(vn) and vn <= value + 8e-16 * (1.0 + abs(value)):
                hessian_pd = lam < 1e-8
                X, value, g = Xn, vn, gn_vec
                lam = max(lam * 0.25, 1e-14)
                accepted = True
                break
            lam = max(4.0 * lam, 1e-12)
        if not accepted:
            break
    gn = grad_norm(X, g)
    return X, value, gn, it, hessian_pd, gn <= gtol


def minimize_segment(
    m: ChartMetric,
    seed: np.ndarray,
    h: float,
    epsilon: float,
    gtol: float = 1e-8,
    max_iter: int = 80,
) -> SegmentResult:
    """Damped Newton on the segment arrival objective with fixed endpoints.

    Timelike segments (epsilon > 0) are nondegenerate and are solved directly.
    Null segments run two phases: the rate-squared energy pins the node
    distribution (the arrival functional alone is reparameterization invariant
    and lets nodes pile up), then transversal Newton steps certify first-order
    stationarity of the arrival functional itself.  Raises LocalityError when
    stationarity cannot be certified; callers treat that as "refine the
    partition".
    """
    X = np.asarray(seed, float).copy()
    M = len(X) - 1
    if M < 2:
        value, _ = segment_value_grad(m, X, h, epsilon, want_grad=False)
        return SegmentResult(X, value, 0.0, 0, True)
    if epsilon > 0.0:
        X, value, gn, it, pd, ok = _levenberg_newton(
            m, X, h, epsilon, "arrival", gtol, max_iter, transversal=False
        )
        if not ok:
            raise LocalityError(f"segment optimizer stalled (|grad| = {gn:.3g})")
        return SegmentResult(X, value, gn, it, pd)
    # null case: energy preconditioner, then transversal arrival polish
    e0, _ = segment_value_grad(m, X, h, epsilon, want_grad=False, mode="energy")
    gtol_energy = max(gtol, 1e-12 * (1.0 + abs(e0)))
    X, _, _, it1, _, _ = _levenberg_newton(
        m, X, h, epsilon, "energy", gtol_energy, max_iter, transversal=False
    )
    X, value, gn, it2, pd, ok = _levenberg_newton(
        m, X, h, epsilon, "arrival", gtol, 25, transversal=True
    )
    if not ok:
        raise LocalityError(f"segment optimizer stalled (|grad| = {gn:.3g})")
    return SegmentResult(X, value, gn, it1 + it2, pd)


def local_minimizer(
    m: ChartMetric,
    q: Event,
    delta: VerticalWorldline,
    interval,
    epsilon: float,
    seed_x: np.ndarray,
    gtol: float = 1e-8,
) -> DiscreteCurve:
    """Arrival-time minimizer from the event q to the vertical line ``delta``
    over the parameter interval, seeded by a spatial path (samples, first at
    q's spatial point, last at the line's anchor).  Returns the lifted segment.
    """
    a, b = interval
    seed = np.asarray(seed_x, float).copy()
    seed[0] = q.x
    seed[-1] = delta.x0
    h = (b - a) / (len(seed) - 1)
    res = minimize_segment(m, seed, h, epsilon, gtol=gtol)
    s = np.linspace(a, b, len(seed))
    return lift_curve(m, res.X, q.t, epsilon, s=s)


# -- sweeps ----------------------------------------------------------------------


@dataclass
class ShorteningState:
    """Mutable bookkeeping for the alternating sweeps."""

    metric: ChartMetric
    gamma: VerticalWorldline
    curve: DiscreteCurve
    partition_n: int
    epsilon: float
    stage: str = "eta1"  # which sweep runs next
    tau_history: list = field(default_factory=list)
    anchors: np.ndarray | None = None
    no_progress: bool = False
    gtol: float = 1e-8
    polish_drift_frac: float = 0.25

    def tau(self):
        return arrival_time(self.curve, self.gamma, tol=1e-5)


def _chain_segments(m, curve, epsilon, boundaries, window_params, targets, t0, gtol):
    """Run the chained local minimizations and return the rebuilt node array.

    ``boundaries``: global node indices delimiting the segments.
    ``window_params``: parameters on the input curve seeding each segment.
    ``targets``: spatial endpoint for each segment (last one is the worldline
    anchor).  The start of each segment is the previous optimized endpoint.
    """
    h = curve.s[1] - curve.s[0]
    xsp = curve.spline()
    X_full = np.empty_like(curve.x)
    start = curve.x[0].copy()
    pieces = []
    for j in range(len(boundaries) - 1):
        lo, hi = boundaries[j], boundaries[j + 1]
        Mj = hi - lo
        w_lo, w_hi = window_params[j], window_params[j + 1]
        seed = xsp(np.linspace(w_lo, w_hi, Mj + 1))[:, :-1]
        seed[0] = start
        seed[-1] = targets[j]
        res = minimize_segment(m, seed, h, epsilon, gtol=gtol)
        pieces.append(res)
        X_full[lo : hi + 1] = res.X
        start = res.X[-1]
    return X_full, pieces


def _rebuild(m, curve, gamma, epsilon, X_full):
    new = lift_curve(m, X_full, curve.t[0], epsilon, s=curve.s)
    return new, arrival_time(new, gamma, tol=1e-5)


def _accept_sweep(state, tau0, new_curve, tau1):
    """Keep the rebuilt curve only on strict progress beyond float jitter, so
    an exact geodesic (e.g. a polished one) is a stable fixed point of the
    sweeps and the recorded tau history is exactly non-increasing."""
    if tau1 <= tau0 - 1e-14 * (1.0 + abs(tau0)):
        state.curve = new_curve
        state.no_progress = False
        state.tau_history.append(tau1)
    else:
        state.no_progress = True
        state.tau_history.append(tau0)
    return state


def eta1_sweep(state: ShorteningState) -> ShorteningState:
    """Anchor sweep: equal-arc anchors, vertical lines, chained minimizers."""
    m, curve, gamma = state.metric, state.curve, state.gamma
    N = state.partition_n
    M = (len(curve.s) - 1) // N
    tau0 = state.tau()
    params, _ = arc_parameters(m, curve, N)
    xsp = curve.spline()
    anchors = xsp(params)[:, :-1]
    boundaries = [i * M for i in range(N + 1)]
    targets = [anchors[i] for i in range(1, N)] + [gamma.x0]
    X_full, pieces = _chain_segments(
        m, curve, state.epsilon, boundaries, params, targets, curve.t[0], state.gtol
    )
    new_curve, tau1 = _rebuild(m, curve, gamma, state.epsilon, X_full)
    state = _accept_sweep(state, tau0, new_curve, tau1)
    state.anchors = anchors
    state.stage = "eta2"
    return state


def eta2_sweep(state: ShorteningState) -> ShorteningState:
    """Midpoint sweep on the half-shifted partition; removes breakpoint corners."""
    if state.stage != "eta2":
        raise ValueError("eta2_sweep expects an eta1-type state")
    m, curve, gamma = state.metric, state.curve, state.gamma
    N = state.partition_n
    Ng = len(curve.s) - 1
    M = Ng // N
    Mh = M // 2
    tau0 = state.tau()
    # midpoints by arc within each eta1 cell
    mid_params = np.empty(N)
    for i in range(N):
        lo, hi = i * M, (i + 1) * M
        sub = DiscreteCurve(
            s=curve.s[lo : hi + 1],
            x=curve.x[lo : hi + 1],
            t=curve.t[lo : hi + 1],
            xdot=curve.xdot[lo : hi + 1],
            tdot=curve.tdot[lo : hi + 1],
            epsilon=curve.epsilon,
            metric_name=curve.metric_name,
        )
        p2, _ = arc_parameters(m, sub, 2)
        mid_params[i] = p2[1]
    xsp = curve.spline()
    midpoints = xsp(mid_params)[:, :-1]
    boundaries = [0, Mh] + [Mh + i * M for i in range(1, N)] + [Ng]
    window_params = np.concatenate([[0.0], mid_params, [1.0]])
    targets = [midpoints[i] for i in range(N)] + [gamma.x0]
    X_full, pieces = _chain_segments(
        m, curve, state.epsilon, boundaries, window_params, targets, curve.t[0], state.gtol
    )
    new_curve, tau1 = _rebuild(m, curve, gamma, state.epsilon, X_full)
    state = _accept_sweep(state, tau0, new_curve, tau1)
    state.stage = "eta1"
    return state


# -- full flow ---------------------------------------------------------------------


def shorten_to_geodesic(
    m: ChartMetric,
    z0: DiscreteCurve,
    gamma: VerticalWorldline,
    epsilon: float,
    tol: float = 1e-6,
    partition_n: int = 8,
    max_rounds: int = 200,
    n_max: int = 32,
    polish: bool = True,
    gtol: float = 1e-8,
    polish_drift_frac: float = 0.25,
    trace: list | None = None,
) -> GeodesicRecord:
    """Alternate eta1/eta2 sweeps until the arrival time stalls per round and
    the geodesic residual passes, then return the converged record.

    The sweeps alone approach the geodesic at a slow geometric rate (anchor
    averaging damps the lowest transverse mode weakly), so once a round has
    brought the curve near a geodesic the endpoint Newton solver is attempted;
    when it converges to a nearby connector with no larger arrival time, its
    flow-grade curve is spliced into the state.  The splice never raises the
    recorded tau and the sweeps leave it fixed, so the stopping criterion is
    certified by the sweeps themselves.  On a LocalityError the partition is
    doubled, up to ``n_max``.  ``trace`` collects rows of
    (sweep, tau, geodesic residual, constraint residual) when given.
    """
    state = ShorteningState(
        metric=m, gamma=gamma, curve=z0, partition_n=partition_n, epsilon=epsilon,
        gtol=gtol, polish_drift_frac=polish_drift_frac,
    )
    tau_prev = state.tau()
    state.tau_history.append(tau_prev)
    sweep_count = 0
    spliced = False
    decrease, resid = np.inf, np.inf
    for round_i in range(max_rounds):
        try:
            state = eta1_sweep(state)
            state = eta2_sweep(state)
        except LocalityError:
            if state.partition_n * 2 > n_max:
                raise
            ng = len(state.curve.s) - 1
            if ng % (2 * state.partition_n * 2) != 0:
                raise
            state.partition_n *= 2
            state.stage = "eta1"
            continue
        tau_now = state.tau_history[-1]
        resid = geodesic_residual(m, state.curve)
        if trace is not None:
            trace.append((sweep_count, tau_now, resid, state.curve.constraint_residual))
        sweep_count += 2
        decrease = tau_prev - tau_now
        tau_prev = tau_now
        if decrease <= tol and resid <= 100.0 * tol:
            break
        if polish and not spliced:
            pol = _attempt_polish(m, gamma, state, tau_now)
            if pol is not None:
                pol_curve, pol_tau = pol
                state.curve = pol_curve
                state.tau_history.append(pol_tau)
                tau_prev = pol_tau
                spliced = True
    else:
        raise NonConvergenceError(
            "shortening did not converge",
            {
                "tau_plateau": decrease <= tol,
                "residual_plateau": resid <= 100.0 * tol,
                "tau": tau_prev,
                "residual": resid,
                "rounds": max_rounds,
            },
        )
    return GeodesicRecord(
        curve=state.curve,
        epsilon=float(epsilon),
        tau=float(tau_prev),
        residual=float(resid),
        tolerance=float(100.0 * tol),
        metric_name=m.name,
        provenance="shortening",
        diagnostics={
            "rounds": round_i + 1,
            "partition_n": state.partition_n,
            "newton_spliced": spliced,
            "tau_history": [float(t) for t in state.tau_history],
        },
    )


def _attempt_polish(m, gamma, state, tau_now):
    """Try the endpoint Newton solver from the current curve.

    Accepted only when the connector stays in the same neighborhood (bounded
    spatial drift) and does not increase the recorded arrival time; returns
    (curve, tau) or None.
    """
    curve = state.curve
    v0 = curve.spline()(0.0, 1)
    try:
        v, pol_curve, diag = solve_connector(
            m,
            curve.z[0],
            gamma.x0,
            state.epsilon,
            v0,
            out_samples=len(curve.s) - 1,
        )
    except (NonConvergenceError, DomainExitError, MetricDomainError, CurveConstraintError):
        return None
    drift = np.max(np.linalg.norm(pol_curve.x - curve.x, axis=1))
    scale = 1.0 + np.max(np.linalg.norm(curve.x, axis=1))
    if drift > state.polish_drift_frac * scale:
        return None
    pol_tau = arrival_time(pol_curve, gamma, tol=1e-6)
    if pol_tau > tau_now + 1e-12 * (1.0 + abs(tau_now)):
        return None
    return pol_curve, float(pol_tau)
