"""Volt-var curve extraction, evaluation, quality gates and clamping.

A curve maps a locally measured PCC voltage to a reactive-power adjustment,
dQ = slope * (V - intercept).  Curves come from regressing the per-scenario
optimal adjustments (stage two) against the uncontrolled base voltages
(stage three); the intercept should land close to the inverter's target
voltage, and the slope must be negative so low voltage draws injection.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .netmodel import CapabilitySpec, ContingencyId, NetworkModel, feasible_q_interval
from .opf import Objective, OptimalVoltages, StageTwoResult, stage1_optimal_voltages, stage2_all_scenarios
from .powerflow import ScenarioPoint, compiled, solve_power_flow
from .scenarios import ScenarioSet

R2_FLOOR = 0.70
REL_ERROR_LIMIT = 0.01
OUTLIER_T = 2.5


class FitError(ValueError):
    """Regression input is unusable (too few or degenerate points)."""


@dataclass(frozen=True)
class VVC:
    """One inverter's affine volt-var rule with its fit metadata."""

    inverter: str
    slope: float              # kVAr per pu
    intercept: float          # pu voltage where dQ = 0 (nan when undefined)
    r_squared: float
    rel_error: float          # |intercept - target| / target
    n_points: int
    outliers_removed: int = 0
    flags: tuple[str, ...] = ()

    @property
    def intercept_defined(self) -> bool:
        return math.isfinite(self.intercept)

    def to_dict(self) -> dict:
        return {
            "inv": self.inverter,
            "m": self.slope,
            "c": None if not self.intercept_defined else self.intercept,
            "r2": self.r_squared,
            "rel_error": self.rel_error,
            "n_points": self.n_points,
            "outliers_removed": self.outliers_removed,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "VVC":
        return cls(
            inverter=d["inv"],
            slope=float(d["m"]),
            intercept=(math.nan if d.get("c") is None else float(d["c"])),
            r_squared=float(d.get("r2", math.nan)),
            rel_error=float(d.get("rel_error", math.nan)),
            n_points=int(d.get("n_points", 0)),
            outliers_removed=int(d.get("outliers_removed", 0)),
            flags=tuple(d.get("flags", ())),
        )


def evaluate_vvc(v: VVC, v_meas: float) -> float:
    """dQ = slope * (v_meas - intercept), kVAr; positive injects."""
    if not v.intercept_defined:
        raise ValueError(f"curve for {v.inverter} has no defined intercept")
    return v.slope * (v_meas - v.intercept)


# ---------------------------------------------------------------------------
# stage three: base voltages
# ---------------------------------------------------------------------------


def stage3_base_voltages(m: NetworkModel, ss: ScenarioSet) -> dict[tuple[str, int], float]:
    """PCC voltage magnitudes with no reactive adjustment, one power flow per
    scenario at the baseline reactive output.  Keys are (inverter, scenario
    index)."""
    c = compiled(m)
    out: dict[tuple[str, int], float] = {}
    for si, point in enumerate(ss.points):
        sol = solve_power_flow(m, point)
        mags = np.abs(sol.v_pu[c.inv_bus, c.inv_phase])
        for k, inv_id in enumerate(c.inv_ids):
            out[(inv_id, si)] = float(mags[k])
    return out


# ---------------------------------------------------------------------------
# stage four: regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitOptions:
    r2_floor: float = R2_FLOOR
    outlier_t: float = OUTLIER_T
    rel_error_limit: float = REL_ERROR_LIMIT


def _ols(v: np.ndarray, dq: np.ndarray) -> tuple[float, float, float, np.ndarray]:
    """Least squares dq = a*v + b; returns (a, b, r2, residuals)."""
    x = np.column_stack([v, np.ones_like(v)])
    coef, *_ = np.linalg.lstsq(x, dq, rcond=None)
    a, b = float(coef[0]), float(coef[1])
    resid = dq - (a * v + b)
    ss_res = float((resid**2).sum())
    ss_tot = float(((dq - dq.mean()) ** 2).sum())
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res <= 1e-18 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return a, b, r2, resid


def _studentized(v: np.ndarray, resid: np.ndarray) -> np.ndarray:
    n = len(v)
    dof = n - 2
    sigma2 = float((resid**2).sum()) / dof if dof > 0 else 0.0
    if sigma2 <= 0:
        return np.zeros(n)
    vbar = v.mean()
    svv = float(((v - vbar) ** 2).sum())
    lev = 1.0 / n + (v - vbar) ** 2 / svv
    denom = np.sqrt(np.maximum(sigma2 * (1.0 - lev), 1e-300))
    return resid / denom


def stage4_fit_vvc(
    points: Sequence[tuple[float, float]],
    vopt: float,
    opts: FitOptions = FitOptions(),
    inverter: str = "",
) -> VVC:
    """Fit dQ = m*(V - c) by ordinary least squares over (base voltage,
    optimal adjustment) pairs.  If the fit misses the R^2 floor, points with
    a studentized residual beyond the threshold are dropped and the fit is
    repeated once; quality gates are flagged, never enforced."""
    if len(points) < 3:
        raise FitError(f"need at least 3 points, got {len(points)}")
    v = np.array([p[0] for p in points], dtype=float)
    dq = np.array([p[1] for p in points], dtype=float)
    if float(v.max() - v.min()) < 1e-12:
        raise FitError("all voltages identical; slope is undefined")

    a, b, r2, resid = _ols(v, dq)
    removed = 0
    if r2 < opts.r2_floor and len(v) > 3:
        t = np.abs(_studentized(v, resid))
        keep = t <= opts.outlier_t
        if keep.sum() >= 3 and keep.sum() < len(v):
            removed = int(len(v) - keep.sum())
            v, dq = v[keep], dq[keep]
            if float(v.max() - v.min()) >= 1e-12:
                a, b, r2, resid = _ols(v, dq)

    flags: list[str] = []
    if abs(a) < 1e-9:
        c = math.nan
        flags.append("intercept_undefined")
    else:
        c = -b / a
    if a >= 0:
        flags.append("slope_not_negative")
    rel = abs(c - vopt) / abs(vopt) if math.isfinite(c) and vopt else math.nan
    if not math.isfinite(rel) or rel > opts.rel_error_limit:
        flags.append("intercept_off_target")
    if r2 < opts.r2_floor:
        flags.append("low_r2")
    return VVC(
        inverter=inverter,
        slope=a,
        intercept=c,
        r_squared=r2,
        rel_error=rel,
        n_points=int(len(v)),
        outliers_removed=removed,
        flags=tuple(flags),
    )


# ---------------------------------------------------------------------------
# quality
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QualityReport:
    inverter: str
    rel_error: float
    r_squared: float
    slope: float
    rel_error_ok: bool
    r2_ok: bool
    slope_ok: bool

    @property
    def ok(self) -> bool:
        return self.rel_error_ok and self.r2_ok and self.slope_ok

    def to_dict(self) -> dict:
        return {
            "inv": self.inverter, "rel_error": self.rel_error, "r2": self.r_squared,
            "slope": self.slope, "rel_error_ok": self.rel_error_ok,
            "r2_ok": self.r2_ok, "slope_ok": self.slope_ok, "ok": self.ok,
        }


def vvc_quality(v: VVC, vopt: float, opts: FitOptions = FitOptions()) -> QualityReport:
    rel = abs(v.intercept - vopt) / abs(vopt) if v.intercept_defined and vopt else math.inf
    return QualityReport(
        inverter=v.inverter,
        rel_error=rel,
        r_squared=v.r_squared,
        slope=v.slope,
        rel_error_ok=rel <= opts.rel_error_limit,
        r2_ok=v.r_squared >= opts.r2_floor,
        slope_ok=v.slope < 0,
    )


# ---------------------------------------------------------------------------
# stage five: operational clamping
# ---------------------------------------------------------------------------


def clamp_q(caps: CapabilitySpec, p_kw: float, q_req: float) -> float:
    """Clip a requested reactive power to the inverter's feasible interval
    for the given signed active power.  Under a fixed-power-factor mode the
    request is ignored and the locked value returned."""
    lo, hi = feasible_q_interval(caps, p_kw)
    return min(max(q_req, lo), hi)


# ---------------------------------------------------------------------------
# full extraction pipeline (stages one to four)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VVCSet:
    """Extraction product for one network configuration: curves per
    inverter, the stage-one targets, and the raw fit points."""

    contingency: ContingencyId
    objective: Objective
    curves: Mapping[str, VVC]
    vopt: OptimalVoltages
    stage2: StageTwoResult
    fit_points: Mapping[str, tuple[tuple[float, float], ...]]

    def quality(self, opts: FitOptions = FitOptions()) -> list[QualityReport]:
        return [vvc_quality(c, self.vopt.voltages[i], opts) for i, c in sorted(self.curves.items())]

    def to_dict(self) -> dict:
        return {
            "contingency": self.contingency.key,
            "objective": self.objective.kind,
            "curves": [self.curves[i].to_dict() for i in sorted(self.curves)],
            "vopt": self.vopt.to_dict(),
            "stage2": self.stage2.to_dict(),
            "fit_points": {i: [list(p) for p in pts] for i, pts in sorted(self.fit_points.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "VVCSet":
        curves = {c["inv"]: VVC.from_dict(c) for c in d["curves"]}
        return cls(
            contingency=ContingencyId.from_key(d["contingency"]),
            objective=Objective(d["objective"]),
            curves=curves,
            vopt=OptimalVoltages.from_dict(d["vopt"]),
            stage2=StageTwoResult.from_dict(d["stage2"]),
            fit_points={i: tuple(tuple(p) for p in pts) for i, pts in d.get("fit_points", {}).items()},
        )


def extract_vvc_set(
    m: NetworkModel,
    ss: ScenarioSet,
    obj: Objective,
    caps: Mapping[str, CapabilitySpec] | None = None,
    fit_opts: FitOptions = FitOptions(),
    contingency: ContingencyId = ContingencyId.intact(),
) -> VVCSet:
    """Run stages one to four on an already-contingencified model."""
    vopt = stage1_optimal_voltages(m, ss, obj)
    stage2 = stage2_all_scenarios(m, ss, vopt, caps=caps)
    base = stage3_base_voltages(m, ss)
    curves: dict[str, VVC] = {}
    fit_points: dict[str, tuple[tuple[float, float], ...]] = {}
    for inv_id in m.inverter_ids:
        pts = tuple(
            (base[(inv_id, si)], stage2.dq[si][inv_id]) for si in range(len(ss.points))
        )
        fit_points[inv_id] = pts
        curves[inv_id] = stage4_fit_vvc(pts, vopt.voltages[inv_id], fit_opts, inverter=inv_id)
    return VVCSet(
        contingency=contingency,
        objective=obj,
        curves=curves,
        vopt=vopt,
        stage2=stage2,
        fit_points=fit_points,
    )


def save_vvc_set(vs: VVCSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(vs.to_dict(), indent=1, sort_keys=True))


def load_vvc_set(path: str | Path) -> VVCSet:
    return VVCSet.from_dict(json.loads(Path(path).read_text()))
