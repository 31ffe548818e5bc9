"""Weighted operating-point sets and simultaneous backward reduction.

A time series of minute-resolution feeder states becomes a uniformly
weighted scenario set; backward reduction then repeatedly deletes the
scenario with the smallest probability-weighted distance to its nearest
neighbour, handing its weight to that neighbour, until the target count
remains.  Distances are Euclidean over per-dimension standardized features.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .powerflow import LoadState, ScenarioPoint

_LOAD_FIELDS = ("Pd0", "Qd0", "alphaP", "betaP", "gammaP", "alphaQ", "betaQ", "gammaQ")


class TimeSeriesError(ValueError):
    """Ragged or malformed time-series input."""


@dataclass(frozen=True)
class TimeSeries:
    """Ordered feeder states, one per ``step_minutes``.  Every step must
    carry the same load and inverter keys."""

    steps: tuple[ScenarioPoint, ...]
    step_minutes: float = 1.0

    def __post_init__(self) -> None:
        if not self.steps:
            raise TimeSeriesError("time series is empty")
        ref = self.steps[0]
        load_keys = set(ref.loads)
        inv_keys = set(ref.inv_p)
        for t, st in enumerate(self.steps):
            if set(st.loads) != load_keys or set(st.inv_p) != inv_keys:
                raise TimeSeriesError(f"step {t} carries different load/inverter fields")

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class ScenarioSet:
    """Reduced or raw scenario collection.  Weights sum to one, no two
    retained points are identical, and the normalization vector fixes the
    distance metric used during reduction."""

    points: tuple[ScenarioPoint, ...]
    norm: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.points:
            raise ValueError("scenario set must contain at least one point")
        total = sum(p.weight for p in self.points)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {total!r}, expected 1")
        seen = set()
        for p in self.points:
            key = p.identity_tuple()
            if key in seen:
                raise ValueError("scenario set contains identical points")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.points])

    def centroid(self) -> ScenarioPoint:
        """Probability-weighted mean operating point (not a member point)."""
        load_ids = sorted(self.points[0].loads)
        inv_ids = sorted(self.points[0].inv_p)
        w = self.weights
        loads = {}
        for lid in load_ids:
            arrs = np.array([p.loads[lid].as_tuple() for p in self.points])
            mean = tuple(float(x) for x in (w[:, None] * arrs).sum(axis=0))
            loads[lid] = LoadState(*mean)
        inv_p = {iid: float(sum(p.weight * p.inv_p[iid] for p in self.points)) for iid in inv_ids}
        inv_q = {iid: float(sum(p.weight * p.q_base(iid) for p in self.points)) for iid in inv_ids}
        return ScenarioPoint(weight=1.0, loads=loads, inv_p=inv_p, inv_q=inv_q)


# ---------------------------------------------------------------------------
# features and distances
# ---------------------------------------------------------------------------


def feature_vector(p: ScenarioPoint) -> np.ndarray:
    """All load fields plus inverter active powers, in sorted key order."""
    parts: list[float] = []
    for lid in sorted(p.loads):
        parts.extend(p.loads[lid].as_tuple())
    for iid in sorted(p.inv_p):
        parts.append(p.inv_p[iid])
    return np.array(parts)


def feature_matrix(points: Sequence[ScenarioPoint]) -> np.ndarray:
    return np.array([feature_vector(p) for p in points])


def normalization(points: Sequence[ScenarioPoint]) -> np.ndarray:
    """Per-dimension sample standard deviation; dimensions with no variance
    scale by one so they do not blow up the metric."""
    feats = feature_matrix(points)
    std = feats.std(axis=0)
    std[std == 0.0] = 1.0
    return std


def scenario_distance(a: ScenarioPoint, b: ScenarioPoint, norm: np.ndarray | None = None) -> float:
    fa, fb = feature_vector(a), feature_vector(b)
    if fa.shape != fb.shape:
        raise ValueError(f"feature dimensions differ: {fa.shape} vs {fb.shape}")
    d = fa - fb
    if norm is not None:
        d = d / norm
    return float(np.sqrt((d * d).sum()))


# ---------------------------------------------------------------------------
# construction and reduction
# ---------------------------------------------------------------------------


def build_scenarios(ts: TimeSeries) -> ScenarioSet:
    """One scenario per time step at uniform weight.  Steps with identical
    content collapse into one point carrying the combined weight, keeping the
    no-duplicates invariant."""
    t = len(ts)
    merged: dict[tuple, int] = {}
    points: list[ScenarioPoint] = []
    weights: list[float] = []
    for st in ts.steps:
        key = st.identity_tuple()
        if key in merged:
            weights[merged[key]] += 1.0 / t
        else:
            merged[key] = len(points)
            points.append(st)
            weights.append(1.0 / t)
    out = tuple(
        ScenarioPoint(weight=w, loads=p.loads, inv_p=p.inv_p, inv_q=p.inv_q)
        for p, w in zip(points, weights)
    )
    norm = normalization(out)
    return ScenarioSet(points=out, norm=norm,
                       provenance={"source_steps": t, "step_minutes": ts.step_minutes})


def reduce_scenarios(ss: ScenarioSet, target: int) -> ScenarioSet:
    """Greedy backward reduction to ``target`` points.

    Each step deletes the scenario with the smallest weight-times-nearest-
    neighbour-distance (ties broken toward the lowest original index) and
    transfers its weight to its nearest surviving neighbour.
    """
    n = len(ss)
    if not (1 <= target <= n):
        raise ValueError(f"target {target} outside [1, {n}]")
    if target == n:
        return ss
    norm = ss.norm if ss.norm is not None else normalization(ss.points)
    feats = feature_matrix(ss.points) / norm
    # row-wise pairwise distances; direct differences so ties resolve the
    # same way as a naive recomputation
    dist = np.empty((n, n))
    for i in range(n):
        dist[i] = np.sqrt(((feats - feats[i]) ** 2).sum(axis=1))
    np.fill_diagonal(dist, np.inf)

    w = ss.weights.copy()
    alive = np.ones(n, dtype=bool)
    nn_dist = dist.min(axis=1)
    nn_idx = dist.argmin(axis=1)
    trace: list[dict] = []

    for _ in range(n - target):
        cost = np.where(alive, w * nn_dist, np.inf)
        victim = int(cost.argmin())          # argmin returns the lowest index on ties
        heir = int(nn_idx[victim])
        w[heir] += w[victim]
        w[victim] = 0.0
        alive[victim] = False
        trace.append({"deleted": victim, "absorbed_by": heir, "cost": float(cost[victim])})
        # refresh nearest-neighbour info for points that pointed at the victim
        stale = np.flatnonzero(alive & (nn_idx == victim))
        for i in stale:
            row = np.where(alive, dist[i], np.inf)
            row[i] = np.inf
            nn_idx[i] = int(row.argmin())
            nn_dist[i] = float(row[nn_idx[i]])

    keep = np.flatnonzero(alive)
    points = tuple(
        ScenarioPoint(weight=float(w[i]), loads=ss.points[i].loads,
                      inv_p=ss.points[i].inv_p, inv_q=ss.points[i].inv_q)
        for i in keep
    )
    prov = dict(ss.provenance)
    prov["reduction_trace"] = trace
    prov["kept_original_indices"] = [int(i) for i in keep]
    return ScenarioSet(points=points, norm=norm, provenance=prov)


# ---------------------------------------------------------------------------
# CSV time series and JSON scenario-set interchange
# ---------------------------------------------------------------------------


def timeseries_to_csv(ts: TimeSeries) -> str:
    ref = ts.steps[0]
    load_ids = sorted(ref.loads)
    inv_ids = sorted(ref.inv_p)
    cols = ["step"]
    for lid in load_ids:
        cols.extend(f"{lid}.{f}" for f in _LOAD_FIELDS)
    cols.extend(f"{iid}.Pg" for iid in inv_ids)
    cols.extend(f"{iid}.Qg" for iid in inv_ids if ref.inv_q)
    buf = io.StringIO()
    wr = csv.writer(buf)
    wr.writerow(cols)
    for t, st in enumerate(ts.steps):
        row: list = [t]
        for lid in load_ids:
            row.extend(f"{x:.10g}" for x in st.loads[lid].as_tuple())
        row.extend(f"{st.inv_p[iid]:.10g}" for iid in inv_ids)
        if ref.inv_q:
            row.extend(f"{st.q_base(iid):.10g}" for iid in inv_ids)
        wr.writerow(row)
    return buf.getvalue()


def timeseries_from_csv(text: str, step_minutes: float = 1.0) -> TimeSeries:
    rd = csv.reader(io.StringIO(text))
    header = next(rd, None)
    if not header:
        raise TimeSeriesError("empty CSV")
    load_cols: dict[str, dict[str, int]] = {}
    pg_cols: dict[str, int] = {}
    qg_cols: dict[str, int] = {}
    for idx, col in enumerate(header):
        if col == "step":
            continue
        parts = col.rsplit(".", 1)
        if len(parts) != 2:
            raise TimeSeriesError(f"unrecognized column {col!r}")
        head, fieldname = parts
        if fieldname == "Pg":
            pg_cols[head] = idx
        elif fieldname == "Qg":
            qg_cols[head] = idx
        elif fieldname in _LOAD_FIELDS:
            load_cols.setdefault(head, {})[fieldname] = idx
        else:
            raise TimeSeriesError(f"unrecognized column {col!r}")
    for lid, fields in load_cols.items():
        missing = [f for f in _LOAD_FIELDS if f not in fields]
        if missing:
            raise TimeSeriesError(f"load {lid!r} misses columns {missing}")

    steps: list[ScenarioPoint] = []
    for ln, row in enumerate(rd):
        if not row:
            continue
        try:
            loads = {
                lid: LoadState(*(float(row[fields[f]]) for f in _LOAD_FIELDS))
                for lid, fields in load_cols.items()
            }
            inv_p = {iid: float(row[i]) for iid, i in pg_cols.items()}
            inv_q = {iid: float(row[i]) for iid, i in qg_cols.items()}
        except (IndexError, ValueError) as exc:
            raise TimeSeriesError(f"row {ln}: {exc}") from exc
        steps.append(ScenarioPoint(weight=0.0, loads=loads, inv_p=inv_p, inv_q=inv_q))
    return TimeSeries(steps=tuple(steps), step_minutes=step_minutes)


def scenario_set_to_dict(ss: ScenarioSet) -> dict:
    return {
        "points": [
            {
                "weight": p.weight,
                "loads": {lid: list(st.as_tuple()) for lid, st in sorted(p.loads.items())},
                "inv_p": dict(sorted(p.inv_p.items())),
                "inv_q": dict(sorted(p.inv_q.items())),
            }
            for p in ss.points
        ],
        "norm": None if ss.norm is None else [float(x) for x in ss.norm],
        "provenance": ss.provenance,
    }


def scenario_set_from_dict(d: Mapping) -> ScenarioSet:
    points = tuple(
        ScenarioPoint(
            weight=float(p["weight"]),
            loads={lid: LoadState(*vals) for lid, vals in p["loads"].items()},
            inv_p={k: float(v) for k, v in p["inv_p"].items()},
            inv_q={k: float(v) for k, v in p.get("inv_q", {}).items()},
        )
        for p in d["points"]
    )
    norm = None if d.get("norm") is None else np.array(d["norm"])
    return ScenarioSet(points=points, norm=norm, provenance=dict(d.get("provenance", {})))


def save_scenario_set(ss: ScenarioSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_set_to_dict(ss), indent=1, sort_keys=True))


def load_scenario_set(path: str | Path) -> ScenarioSet:
    return scenario_set_from_dict(json.loads(Path(path).read_text()))


def scenario_set_checksum(ss: ScenarioSet) -> str:
    blob = json.dumps(scenario_set_to_dict(ss), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
