"""CSV and manifest persistence with deterministic formatting.

Floats are written with 17 significant digits so equal arrays produce
byte-identical files; manifests are written atomically (tmp + rename) as
the last action of a run.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) if not isinstance(v, str) else v for v in row) + "\n")
    return path


def write_density_csv(path, grid, values):
    return write_csv(path, ["theta", "value"], zip(grid.nodes, values))


def write_trajectory_csv(path, snapshots):
    rows = []
    for snap in snapshots:
        for theta, q in zip(snap.grid.nodes, snap.values):
            rows.append((snap.time, theta, q))
    return write_csv(path, ["t", "theta", "q"], rows)


def write_phases_csv(path, snapshots, n: int):
    header = ["t"] + [f"theta_{i + 1}" for i in range(n)]
    rows = [(t, *phases) for t, phases in snapshots]
    return write_csv(path, header, rows)


def write_histogram_csv(path, fields):
    rows = []
    for field in fields:
        for theta, d in zip(field.grid.nodes, field.values):
            rows.append((field.time, theta, d))
    return write_csv(path, ["t", "theta", "density"], rows)


def write_controls_csv(path, controls):
    rows = []
    for k in range(controls.n_knots):
        t = controls.t_edges[k]
        for c, theta in enumerate(controls.grid.nodes):
            rows.append((t, theta, controls.u1[k, c], controls.u2[k, c]))
    return write_csv(path, ["t", "theta", "u1", "u2"], rows)


def write_opt_log_csv(path, history):
    rows = []
    for rec in history:
        cost = rec["cost"]
        rows.append((rec["iter"], cost.total, cost.running, cost.terminal,
                     cost.effort, rec["grad_norm"], rec["step"]))
    return write_csv(path, ["iter", "J_total", "J_r", "J_t", "J_u",
                            "grad_norm", "step"], rows)


def write_rate_csv(path, result):
    rows = []
    for n in result.n_values:
        for seed_idx, dist in enumerate(result.per_seed[n]):
            rows.append((n, seed_idx, dist))
    return write_csv(path, ["N", "seed", "distance"], rows)


def write_ckp_csv(path, series):
    rows = zip(series.times, series.entropy, series.l1, series.slack)
    return write_csv(path, ["t", "H", "L1", "slack"], rows)


def write_gamma_csv(path, result):
    rows = [(r["N"], r["J_N"], r["J"], r["gap"], r["route"], str(r["pair"]))
            for r in result.records]
    return write_csv(path, ["N", "JN", "J", "gap", "route", "pair"], rows)


def write_wrapped_csv(path, result):
    return write_csv(path, ["t", "discrepancy"],
                     zip(result.times, result.discrepancies))


def write_manifest(out_dir, payload) -> Path:
    out_dir = Path(out_dir)
    target = out_dir / "manifest.json"
    tmp = out_dir / ".manifest.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=json_default)
        fh.write("\n")
    os.replace(tmp, target)
    return target


def json_default(obj):
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()
