"""Converged-geodesic records and their JSON serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .curves import DiscreteCurve, curve_from_csv, curve_to_csv


@dataclass(eq=False)
class GeodesicRecord:
    """A converged geodesic together with its arrival time and index data.

    ``conjugate_points`` and ``mu`` stay None until the index pass fills them;
    ``hessian_index`` is only computed for timelike records (epsilon > 0).
    """

    curve: DiscreteCurve
    epsilon: float
    tau: float
    residual: float
    tolerance: float
    metric_name: str = ""
    provenance: str = ""
    conjugate_points: list | None = None
    mu: int | None = None
    hessian_index: int | None = None
    degenerate_endpoint: bool = False
    diagnostics: dict = field(default_factory=dict)

    def with_index(self, conjugate_points, mu, degenerate_endpoint=False, hessian_index=None):
        return replace(
            self,
            conjugate_points=[(float(s), int(k)) for s, k in conjugate_points],
            mu=int(mu),
            degenerate_endpoint=bool(degenerate_endpoint),
            hessian_index=None if hessian_index is None else int(hessian_index),
        )

    def initial_velocity(self):
        return self.curve.zdot[0].copy()


def save_record(record: GeodesicRecord, path, metric_params=None):
    """Write the record as JSON with the curve CSV referenced by relative path."""
    path = Path(path)
    csv_path = path.with_suffix(".curve.csv")
    curve_to_csv(record.curve, csv_path, tolerances={"record": record.tolerance})
    payload = {
        "tau": record.tau,
        "epsilon": record.epsilon,
        "mu": record.mu,
        "conjugate_points": record.conjugate_points,
        "residuals": {
            "geodesic": record.residual,
            "constraint": record.curve.constraint_residual,
        },
        "tolerance": record.tolerance,
        "metric": {"name": record.metric_name, "params": metric_params or {}},
        "provenance": record.provenance,
        "degenerate_endpoint": record.degenerate_endpoint,
        "hessian_index": record.hessian_index,
        "curve_csv": csv_path.name,
        "diagnostics": {k: _plain(v) for k, v in record.diagnostics.items()},
    }
    path.write_text(json.dumps(payload, indent=2))
    return path


def load_record(m, path):
    path = Path(path)
    payload = json.loads(path.read_text())
    curve = curve_from_csv(m, path.parent / payload["curve_csv"])
    return GeodesicRecord(
        curve=curve,
        epsilon=float(payload["epsilon"]),
        tau=float(payload["tau"]),
        residual=float(payload["residuals"]["geodesic"]),
        tolerance=float(payload["tolerance"]),
        metric_name=payload["metric"]["name"],
        provenance=payload.get("provenance", ""),
        conjugate_points=payload.get("conjugate_points"),
        mu=payload.get("mu"),
        hessian_index=payload.get("hessian_index"),
        degenerate_endpoint=payload.get("degenerate_endpoint", False),
    ), payload


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v
