"""Scenario orchestration: shooting oracle, Morse bookkeeping, full runs.

The oracle shoots a direction grid of causal rays from the source event,
flags near-approaches to the receiver worldline, polishes every candidate
with the endpoint Newton solver, and deduplicates.  It is the independent
route against which the shortening flow is cross-validated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DomainExitError,
    MetricDomainError,
    NonConvergenceError,
    ScenarioError,
)
from .curves import VerticalWorldline, arrival_time, curve_to_csv, random_admissible_curve
from .geometry import Event, integrate_geodesics, lorentz_form
from .jacobi import hessian_index, index_record
from .limits import epsilon_family
from .metrics import ChartMetric, make_metric
from .records import GeodesicRecord, save_record
from .shooting import project_to_constraint, record_from_connector, solve_connector
from .shortening import shorten_to_geodesic


# -- direction grids ---------------------------------------------------------------


def icosphere_directions(level: int):
    """Vertices of the level-times-subdivided icosahedron, on the unit sphere.

    Level 4 gives 2562 directions.
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.asarray(v, float) / np.linalg.norm(v) for v in verts]
    cache = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            w = verts[i] + verts[j]
            verts.append(w / np.linalg.norm(w))
            cache[key] = len(verts) - 1
        return cache[key]

    for _ in range(level):
        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.asarray(verts)


def circle_directions(level: int):
    """Uniform direction grid on the circle; level 4 gives 256 directions."""
    count = 16 * 2**level
    angles = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False)
    return np.column_stack([np.cos(angles), np.sin(angles)])


def direction_grid(n: int, level: int, rng=None):
    """Direction grid for the spatial dimension, with a fixed random rotation
    so no grid point sits exactly on a scenario axis."""
    if n == 3:
        dirs = icosphere_directions(level)
    elif n == 2:
        dirs = circle_directions(level)
    else:
        raise ScenarioError(f"no direction grid for spatial dimension {n}")
    rng = rng or np.random.default_rng(12345)
    A = rng.normal(size=(n, n))
    Q, _ = np.linalg.qr(A)
    return dirs @ Q.T


# -- oracle -------------------------------------------------------------------------


def _initial_velocities(m, p_z, dirs, epsilon):
    """Initial v = (c u, 1) with <v,v> = -eps^2 and future orientation."""
    x, t = p_z[:-1], p_z[-1]
    a = m.alpha(x, t)
    g = m.shift(x, t)
    b = float(m.lapse(x, t))
    if b <= epsilon**2:
        raise ScenarioError("epsilon too large for the source lapse")
    au = np.einsum("ij,bj->bi", a, dirs)
    quad_a = np.einsum("bi,bi->b", au, dirs)
    quad_b = 2.0 * dirs @ g
    quad_c = -(b - epsilon**2)
    disc = quad_b**2 - 4.0 * quad_a * quad_c
    c = (-quad_b + np.sqrt(disc)) / (2.0 * quad_a)
    v = np.concatenate([c[:, None] * dirs, np.ones((len(dirs), 1))], axis=1)
    G = m.metric(x, t)
    margin = v @ G[-1]
    return v[margin < 0]


def _candidate_parameters(x_traj, death, x_target, threshold):
    """Local minima (in step index) of the distance to the target spatial
    point, below the threshold, within the live part of the trajectory."""
    T = x_traj.shape[0] - 1
    dist = np.linalg.norm(x_traj - x_target, axis=-1)
    out = []
    B = x_traj.shape[1]
    for b in range(B):
        last = min(death[b], T)
        if last < 2:
            continue
        db = dist[: last + 1, b]
        interior = np.flatnonzero(
            (db[1:-1] <= db[:-2]) & (db[1:-1] <= db[2:]) & (db[1:-1] < threshold)
        )
        for i in interior + 1:
            out.append((b, i))
        if db[last] < threshold:  # ray ends near the line
            out.append((b, last))
    return out


def shooting_oracle(
    m: ChartMetric,
    p: Event,
    gamma: VerticalWorldline,
    epsilon: float,
    level: int = 4,
    tau_cutoff: float = np.inf,
    grid_n: int = 256,
    detect_steps: int = 1024,
    threshold_frac: float = 0.35,
    dedup_frac: float = 1e-2,
    record_tolerance: float = 1e-4,
    rng=None,
) -> list[GeodesicRecord]:
    """Enumerate connecting geodesics by direction-grid shooting plus Newton.

    Rays are integrated in one batch at moderate fixed steps for detection;
    every near-approach seeds the endpoint solver at the rescaled initial
    velocity.  Misses are a resolution matter: raise ``level`` to check.
    """
    dirs = direction_grid(m.n, level, rng=rng)
    p_z = p.z
    v0 = _initial_velocities(m, p_z, dirs, epsilon)
    scale = float(np.linalg.norm(gamma.x0 - p.x))
    s_max = 1.5 * min(tau_cutoff if np.isfinite(tau_cutoff) else 4.0 * scale, 1e4 * scale)
    traj, vel, death = integrate_geodesics(
        m, np.broadcast_to(p_z, v0.shape).copy(), v0, s_max, detect_steps
    )
    dist = np.linalg.norm(traj[..., :-1] - gamma.x0, axis=-1)
    cands = _candidate_parameters(traj[..., :-1], death, gamma.x0, threshold_frac * scale)
    cands = _thin_candidates(cands, v0, dist, detect_steps, m.n, level)
    records = []
    for b, i in cands:
        s_bar = (i / detect_steps) * s_max
        if s_bar <= 0:
            continue
        v_seed = project_to_constraint(m, p_z, s_bar * v0[b], epsilon)
        try:
            v_sol, curve, diag = solve_connector(
                m, p_z, gamma.x0, epsilon, v_seed, out_samples=grid_n
            )
        except (NonConvergenceError, DomainExitError, MetricDomainError):
            continue
        try:
            rec = record_from_connector(
                m, gamma, v_sol, curve, diag, epsilon, record_tolerance, "oracle"
            )
        except Exception:
            continue
        if rec.tau <= 0 or rec.tau > tau_cutoff:
            continue
        records.append(rec)
    return deduplicate_records(records, dedup_frac * max(scale, 1.0))


def _thin_candidates(cands, v0, dist, detect_steps, n, level):
    """One Newton seed per (direction, crossing) cluster: neighbors of the same
    near-approach across adjacent grid directions are redundant."""
    if not cands:
        return cands
    spacing = 1.1 / 2**level if n == 3 else 2.2 * np.pi / (16 * 2**level)
    scored = sorted(cands, key=lambda bi: dist[bi[1], bi[0]])
    kept = []
    for b, i in scored:
        u = v0[b][:-1] / np.linalg.norm(v0[b][:-1])
        dup = False
        for bk, ik in kept:
            uk = v0[bk][:-1] / np.linalg.norm(v0[bk][:-1])
            ang = np.arccos(np.clip(u @ uk, -1.0, 1.0))
            if ang < 2.5 * spacing and abs(i - ik) < 0.15 * detect_steps + 3:
                dup = True
                break
        if not dup:
            kept.append((b, i))
    return kept


def deduplicate_records(records, radius):
    """Cluster records by the sup distance of their curves; keep lowest tau."""
    kept = []
    for rec in sorted(records, key=lambda r: r.tau):
        dup = False
        for other in kept:
            d = np.max(np.linalg.norm(rec.curve.x - other.curve.x, axis=1))
            if d < radius and abs(rec.tau - other.tau) < max(radius, 1e-6):
                dup = True
                break
        if not dup:
            kept.append(rec)
    return kept


# -- Morse bookkeeping ----------------------------------------------------------------


@dataclass
class MorseReport:
    """Coefficientwise solution of the Morse relation for a geodesic set."""

    counts: list
    betti: list
    series: list
    feasible: bool
    alternating_sum: int
    poincare_at_minus_one: int

    def to_dict(self):
        return {
            "index_counts": self.counts,
            "betti": self.betti,
            "canceling_series": self.series,
            "feasible": self.feasible,
            "alternating_sum": self.alternating_sum,
            "poincare_at_minus_one": self.poincare_at_minus_one,
        }


def morse_check(records, betti) -> MorseReport:
    """Solve sum_z r^mu(z) = P(r) + (1+r) S(r) coefficientwise over the integers.

    Feasible when every S coefficient is a nonnegative integer and the
    division terminates exactly.  Also evaluates both sides at r = -1, where
    the S term drops out (the odd-image count corollary when P(-1) = 1).
    Refuses records flagged with a conjugate endpoint.
    """
    for rec in records:
        if rec.mu is None:
            raise ValueError("records must carry geometric indices")
        if rec.degenerate_endpoint:
            raise ValueError("degenerate record (endpoint conjugate); Morse check refused")
    betti = [int(b) for b in betti]
    mu_max = max((rec.mu for rec in records), default=0)
    deg = max(mu_max, len(betti) - 1) + 1
    counts = [0] * (deg + 1)
    for rec in records:
        counts[rec.mu] += 1
    P = betti + [0] * (deg + 1 - len(betti))
    S = []
    feasible = True
    carry = 0
    for k in range(deg + 1):
        sk = counts[k] - P[k] - carry
        S.append(sk)
        if sk < 0:
            feasible = False
        carry = sk
    if carry != 0:
        feasible = False
    while S and S[-1] == 0:
        S.pop()
    alt = sum((-1) ** rec.mu for rec in records)
    p_minus = sum((-1) ** q * b for q, b in enumerate(betti))
    if alt != p_minus:
        feasible = False
    return MorseReport(
        counts=counts,
        betti=betti,
        series=S,
        feasible=feasible,
        alternating_sum=alt,
        poincare_at_minus_one=p_minus,
    )


# -- scenarios ---------------------------------------------------------------------


_SOLVER_DEFAULTS = {
    "grid_n": 256,
    "partition_n": 8,
    "tol": 1e-6,
    "oracle_level": 4,
    "detect_steps": 1024,
    "seeds": 3,
    "rng_seed": 7,
    "eps0": 0.4,
    "family_k": 8,
    "cross_c0_tol": 1e-3,
    "cross_tau_tol": 1e-5,
}


@dataclass
class Scenario:
    """A lensing scenario: metric, source event, receiver worldline, cutoffs."""

    metric: ChartMetric
    p: Event
    gamma: VerticalWorldline
    epsilon_list: list
    tau_cutoff: float
    solver: dict
    betti: list | None = None
    name: str = ""

    def validate(self):
        if np.allclose(self.p.x, self.gamma.x0):
            raise ScenarioError("the source event must not lie on the worldline")
        if not np.isfinite(self.tau_cutoff):
            raise ScenarioError("tau cutoff must be finite")
        for eps in self.epsilon_list:
            if eps < 0:
                raise ScenarioError("epsilon labels must be nonnegative")
        self.metric.validate_points(self.p.x, self.p.t)
        return self


def load_scenario(path) -> Scenario:
    raw = json.loads(Path(path).read_text())
    return scenario_from_dict(raw, name=Path(path).stem)


def scenario_from_dict(raw: dict, name="") -> Scenario:
    allowed = {"metric", "p", "gamma", "epsilon_list", "tau_cutoff", "solver", "betti"}
    unknown = set(raw) - allowed
    if unknown:
        raise ScenarioError(f"unknown scenario fields: {sorted(unknown)}")
    for key in ("metric", "p", "gamma", "epsilon_list", "tau_cutoff"):
        if key not in raw:
            raise ScenarioError(f"scenario is missing the {key!r} field")
    mspec = raw["metric"]
    if set(mspec) - {"name", "params"}:
        raise ScenarioError("metric spec allows only name and params")
    params = dict(mspec.get("params", {}))
    if "chart_box" in (raw.get("solver") or {}):
        params["box"] = raw["solver"]["chart_box"]
    metric = make_metric(mspec["name"], params)
    p = Event(x=raw["p"]["x"], t=raw["p"].get("t", 0.0))
    gamma = VerticalWorldline(raw["gamma"]["x"], raw["gamma"].get("t0", 0.0))
    solver = dict(_SOLVER_DEFAULTS)
    user_solver = dict(raw.get("solver", {}))
    user_solver.pop("chart_box", None)
    unknown = set(user_solver) - set(_SOLVER_DEFAULTS)
    if unknown:
        raise ScenarioError(f"unknown solver settings: {sorted(unknown)}")
    solver.update(user_solver)
    sc = Scenario(
        metric=metric,
        p=p,
        gamma=gamma,
        epsilon_list=[float(e) for e in raw["epsilon_list"]],
        tau_cutoff=float(raw["tau_cutoff"]),
        solver=solver,
        betti=raw.get("betti"),
        name=name,
    )
    return sc.validate()


# -- cross-validation and the full run -------------------------------------------------


def cross_validate(m, oracle_records, gamma, epsilon, solver):
    """Refine every oracle hit by the shortening flow and match the outcome.

    Returns match rows with the sup-distance and arrival-time discrepancy; a
    row fails when either exceeds the configured tolerance.
    """
    rows = []
    for rec in oracle_records:
        short = shorten_to_geodesic(
            m,
            rec.curve,
            gamma,
            epsilon,
            tol=solver["tol"],
            partition_n=solver["partition_n"],
            polish_drift_frac=0.1,
        )
        c0 = float(np.max(np.linalg.norm(short.curve.x - rec.curve.x, axis=1)))
        dtau = abs(short.tau - rec.tau)
        rows.append(
            {
                "tau_oracle": rec.tau,
                "tau_shortening": short.tau,
                "c0_distance": c0,
                "dtau": dtau,
                "ok": bool(c0 <= solver["cross_c0_tol"] and dtau <= solver["cross_tau_tol"]),
            }
        )
    return rows


def run_scenario(sc: Scenario, out_dir=None, trace=False):
    """Oracle sweep, shortening cross-validation, index pass, Morse check, and
    (when the scenario carries both null and timelike labels) epsilon families.

    Returns the report dict; artifacts are emitted under ``out_dir`` when set.
    """
    m = sc.metric
    rng = np.random.default_rng(sc.solver["rng_seed"])
    report = {"scenario": sc.name, "metric": m.describe(), "epsilons": {}, "status": "ok"}
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    all_records = {}
    for eps in sc.epsilon_list:
        oracle = shooting_oracle(
            m,
            sc.p,
            sc.gamma,
            eps,
            level=sc.solver["oracle_level"],
            tau_cutoff=sc.tau_cutoff,
            grid_n=sc.solver["grid_n"],
            detect_steps=sc.solver["detect_steps"],
            rng=np.random.default_rng(sc.solver["rng_seed"]),
        )
        oracle = [index_record(m, rec) for rec in oracle]
        for rec in oracle:
            if rec.epsilon > 0:
                try:
                    rec.diagnostics["hessian_index"] = hessian_index(m, rec, sc.gamma)
                except Exception as exc:  # reported, not fatal
                    rec.diagnostics["hessian_index_error"] = str(exc)
        matches = cross_validate(m, oracle, sc.gamma, eps, sc.solver)
        entry = {
            "count": len(oracle),
            "taus": [rec.tau for rec in oracle],
            "indices": [rec.mu for rec in oracle],
            "cross_validation": matches,
        }
        if sc.betti is not None and oracle:
            morse = morse_check(oracle, sc.betti)
            entry["morse"] = morse.to_dict()
            if not morse.feasible:
                report["status"] = "morse-infeasible"
        if not all(row["ok"] for row in matches):
            report["status"] = "cross-validation-failed"
        report["epsilons"][str(eps)] = entry
        all_records[eps] = oracle
        if out_dir:
            for i, rec in enumerate(oracle):
                save_record(rec, out_dir / f"{sc.name}_eps{eps}_img{i}.json",
                            metric_params=m.params())
    if 0.0 in all_records and any(e > 0 for e in sc.epsilon_list):
        families = []
        for i, base in enumerate(all_records[0.0]):
            if base.degenerate_endpoint:
                continue
            fam = epsilon_family(
                m, base, sc.solver["eps0"], sc.solver["family_k"], sc.gamma
            )
            families.append(fam.report())
            if out_dir:
                (out_dir / f"{sc.name}_family{i}.json").write_text(
                    json.dumps(fam.report(), indent=2)
                )
        report["families"] = families
    if out_dir:
        (out_dir / f"{sc.name}_report.json").write_text(json.dumps(report, indent=2))
    return report


def solve_scenario(sc: Scenario, epsilon=None, out_dir=None, trace=False):
    """Shortening-first solve: random seeds plus oracle seeds per epsilon."""
    m = sc.metric
    rng = np.random.default_rng(sc.solver["rng_seed"])
    eps_list = [epsilon] if epsilon is not None else sc.epsilon_list
    results = {}
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for eps in eps_list:
        records = []
        traces = []
        for k in range(sc.solver["seeds"]):
            z0 = random_admissible_curve(
                m, sc.p, sc.gamma, eps, rng, n=sc.solver["grid_n"]
            )
            rows = [] if trace else None
            rec = shorten_to_geodesic(
                m, z0, sc.gamma, eps,
                tol=sc.solver["tol"], partition_n=sc.solver["partition_n"],
                trace=rows,
            )
            records.append(rec)
            if trace:
                traces.append(rows)
        records = deduplicate_records(
            records, 1e-2 * max(float(np.linalg.norm(sc.gamma.x0 - sc.p.x)), 1.0)
        )
        records = [index_record(m, rec) for rec in records]
        results[eps] = records
        if out_dir:
            for i, rec in enumerate(records):
                save_record(rec, out_dir / f"{sc.name}_solve_eps{eps}_{i}.json",
                            metric_params=m.params())
            if trace:
                for k, rows in enumerate(traces):
                    path = out_dir / f"{sc.name}_trace_eps{eps}_seed{k}.csv"
                    with open(path, "w") as fh:
                        fh.write("sweep,tau,geodesic_residual,constraint_residual\n")
                        for row in rows:
                            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    return results
