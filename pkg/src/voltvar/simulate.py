"""Closed-loop time-series evaluation of reactive-power control policies.

Each minute: measure PCC voltages with the previous minute's reactive
dispatch still applied, let every available inverter derive its adjustment
from its curve (or fixed-power-factor rule), clamp through the capability
envelope and re-solve.  Control is single-pass by default, mirroring a
deployment without supervisory iteration; an optional damped fixed-point
mode repeats the measure/act cycle inside one step.

Reports aggregate losses into energy, unbalance into a time average, and
count limit violations, so runs under different policies compare directly.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .netmodel import (
    CapabilityMode,
    ContingencyId,
    NetworkModel,
    apply_contingency,
    network_checksum,
    with_mode,
)
from .opf import Objective
from .powerflow import (
    PowerFlowDivergence,
    ScenarioPoint,
    SolveOptions,
    check_limits,
    compiled,
    line_losses,
    mean_bus_vuf,
    solve_power_flow,
    thevenin_impedance,
)
from .resilience import VVCBank, classify_configuration
from .scenarios import TimeSeries
from .vvc import VVC, clamp_q, evaluate_vvc


class ScheduleError(ValueError):
    """Availability intervals do not partition the horizon."""


class SimulationError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoControl:
    """Inverters run at their scenario baseline reactive power."""

    caps_mode: CapabilityMode = CapabilityMode()

    label = "no_control"

    def describe(self) -> str:
        return self.label


@dataclass(frozen=True)
class FixedPF:
    """Reactive power locked to the active power at a set power factor;
    sign +1 injects (leading), -1 absorbs (lagging)."""

    pf: float
    sign: int

    label = "fixed_pf"

    def __post_init__(self) -> None:
        if not (0 < self.pf <= 1) or self.sign not in (-1, 1):
            raise ValueError("fixed power factor needs pf in (0, 1] and sign +-1")

    def describe(self) -> str:
        tag = {1: "lead", -1: "lag"}[self.sign]
        return f"fixed_pf_{self.pf:g}_{tag}"

    @property
    def caps_mode(self) -> CapabilityMode:
        return CapabilityMode(kind="fixed_pf", pf=self.pf, sign=self.sign)


@dataclass(frozen=True)
class StaticVVC:
    """One fixed curve per inverter, never re-tuned after extraction."""

    curves: Mapping[str, VVC]
    caps_mode: CapabilityMode = CapabilityMode()
    label: str = "static_vvc"

    def describe(self) -> str:
        return f"{self.label}[{self.caps_mode.kind}]"


@dataclass(frozen=True)
class ResilientVVC:
    """Bank-backed curves: the live configuration is identified from
    measured charge-point impedances and the matching row is applied.
    An unknown match falls back to the intact row (with a warning count)."""

    bank: VVCBank
    caps_mode: CapabilityMode = CapabilityMode()
    classifier_tol: float = 0.05
    label: str = "resilient_vvc"

    def describe(self) -> str:
        return f"{self.label}[{self.caps_mode.kind}]"


ControlPolicy = NoControl | FixedPF | StaticVVC | ResilientVVC


# ---------------------------------------------------------------------------
# availability schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AvailabilitySchedule:
    """Piecewise-constant contingency state: (start, end, contingency) with
    half-open step intervals that must partition [0, horizon)."""

    entries: tuple[tuple[int, int, ContingencyId], ...]

    def __post_init__(self) -> None:
        if not self.entries:
            raise ScheduleError("schedule is empty")
        pos = self.entries[0][0]
        if pos != 0:
            raise ScheduleError("schedule must start at step 0")
        for start, end, _ in self.entries:
            if start != pos or end <= start:
                raise ScheduleError("schedule intervals must be contiguous and nonempty")
            pos = end

    @property
    def horizon(self) -> int:
        return self.entries[-1][1]

    def contingency_at(self, step: int) -> ContingencyId:
        for start, end, cid in self.entries:
            if start <= step < end:
                return cid
        raise ScheduleError(f"step {step} outside schedule horizon {self.horizon}")

    @classmethod
    def always(cls, cid: ContingencyId, horizon: int) -> "AvailabilitySchedule":
        return cls(entries=((0, horizon, cid),))

    @classmethod
    def rotating_daily(
        cls,
        m: NetworkModel,
        days: int = 7,
        steps_per_day: int = 1440,
        always_available: Sequence[str] = (),
    ) -> "AvailabilitySchedule":
        """One inverter out per day, cycling through every unit not in
        ``always_available``."""
        pool = [i for i in m.inverter_ids if i not in set(always_available)]
        if not pool:
            raise ScheduleError("no inverters left to rotate through")
        entries = []
        for d in range(days):
            cid = ContingencyId.inverter_out(pool[d % len(pool)])
            entries.append((d * steps_per_day, (d + 1) * steps_per_day, cid))
        return cls(entries=tuple(entries))


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepOptions:
    iterate: bool = False      # damped measure/act fixed point inside the step
    max_rounds: int = 10
    damping: float = 0.5
    pf_tol: float = 1e-9


@dataclass(frozen=True, eq=False)
class StepResult:
    v_pu: np.ndarray
    q_final: dict[str, float]
    p_inv: dict[str, float]
    loss_kw: float
    vuf_pct: float
    n_violations: int
    balance_residual_kw: float
    unknown_classification: bool = False


def _policy_q_request(
    policy: ControlPolicy,
    inv_id: str,
    v_meas: float,
    p_kw: float,
    curves: Mapping[str, VVC] | None,
    q_base: float,
) -> float:
    if isinstance(policy, NoControl):
        return q_base
    if isinstance(policy, FixedPF):
        return policy.sign * math.tan(math.acos(policy.pf)) * abs(p_kw)
    assert curves is not None
    curve = curves.get(inv_id)
    if curve is None or not curve.intercept_defined or curve.slope >= 0:
        return q_base        # uncommissionable curve: hold the baseline
    return q_base + evaluate_vvc(curve, v_meas)


def _resolve_curves(
    policy: ControlPolicy,
    m_c: NetworkModel,
    scenario: ScenarioPoint,
) -> tuple[Mapping[str, VVC] | None, bool]:
    """Curves for the live configuration; the resilient policy measures
    impedances at every surviving charge point and classifies them."""
    if isinstance(policy, StaticVVC):
        return policy.curves, False
    if isinstance(policy, ResilientVVC):
        z_meas = {
            inv.id: thevenin_impedance(m_c, inv.bus, inv.phase, scenario=scenario)
            for inv in m_c.inverters
        }
        cid = classify_configuration(z_meas, policy.bank, tol=policy.classifier_tol)
        if cid is None:
            return policy.bank.row(ContingencyId.intact()).curves, True
        return policy.bank.row(cid).curves, False
    return None, False


def step(
    m: NetworkModel,
    s_t: ScenarioPoint,
    policy: ControlPolicy,
    cid: ContingencyId = ContingencyId.intact(),
    prev_q: Mapping[str, float] | None = None,
    opts: StepOptions = StepOptions(),
    v_warm: np.ndarray | None = None,
    curves_override: Mapping[str, VVC] | None = None,
) -> StepResult:
    """One control interval: measure at the previous dispatch, act, re-solve."""
    m_c = apply_contingency(m, cid)
    c = compiled(m_c)
    solve_opts = SolveOptions(tol=opts.pf_tol, v_init=v_warm)

    q_prev = {i: (prev_q.get(i, 0.0) if prev_q else 0.0) for i in m_c.inverter_ids}
    measured = solve_power_flow(m_c, s_t, q_set=q_prev, opts=solve_opts)

    unknown = False
    if curves_override is not None:
        curves: Mapping[str, VVC] | None = curves_override
    else:
        curves, unknown = _resolve_curves(policy, m_c, s_t)

    q_final: dict[str, float] = {}
    rounds = opts.max_rounds if opts.iterate else 1
    sol = measured
    for round_no in range(rounds):
        new_q: dict[str, float] = {}
        for k, inv in enumerate(m_c.inverters):
            v_meas = float(np.abs(sol.v_pu[c.inv_bus[k], c.inv_phase[k]]))
            p_kw = s_t.inv_p[inv.id]
            q_req = _policy_q_request(policy, inv.id, v_meas, p_kw, curves, s_t.q_base(inv.id))
            caps = with_mode(inv.capability, policy.caps_mode)
            new_q[inv.id] = clamp_q(caps, p_kw, q_req)
        if opts.iterate and q_final:
            new_q = {i: q_final[i] + opts.damping * (new_q[i] - q_final[i]) for i in new_q}
        converged = q_final and max(abs(new_q[i] - q_final[i]) for i in new_q) < 1e-6
        q_final = new_q
        sol = solve_power_flow(m_c, s_t, q_set=q_final, opts=SolveOptions(
            tol=opts.pf_tol, v_init=sol.v_pu * c.v_base))
        if converged:
            break

    _, loss = line_losses(sol, m_c)
    balance = float(
        sol.source_power.real + sol.inv_s.real.sum() - sol.load_s.real.sum() - loss
    )
    return StepResult(
        v_pu=sol.v_pu,
        q_final=q_final,
        p_inv={i: s_t.inv_p[i] for i in m_c.inverter_ids},
        loss_kw=loss,
        vuf_pct=mean_bus_vuf(sol, m_c),
        n_violations=len(check_limits(sol, m_c)),
        balance_residual_kw=balance,
        unknown_classification=unknown,
    )


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SimulationReport:
    policy: str
    feeder_checksum: str
    n_steps: int
    step_minutes: float
    energy_loss_kwh: float
    avg_vuf_pct: float
    violation_count: int
    unknown_classifications: int
    loss_kw: np.ndarray                 # per step
    vuf_pct: np.ndarray                 # per step
    v_min_pu: np.ndarray                # per step
    v_max_pu: np.ndarray                # per step
    q_trace: dict[str, np.ndarray]      # inverter -> per-step kVAr
    p_trace: dict[str, np.ndarray]
    contingency_keys: list[str]
    metadata: dict = field(default_factory=dict)

    def summary_dict(self) -> dict:
        return {
            "policy": self.policy,
            "feeder_checksum": self.feeder_checksum,
            "n_steps": self.n_steps,
            "step_minutes": self.step_minutes,
            "energy_loss_kwh": self.energy_loss_kwh,
            "avg_vuf_pct": self.avg_vuf_pct,
            "violation_count": self.violation_count,
            "unknown_classifications": self.unknown_classifications,
            "metadata": self.metadata,
        }


def run_timeseries(
    m: NetworkModel,
    ts: TimeSeries,
    policy: ControlPolicy,
    sched: AvailabilitySchedule | None = None,
    opts: StepOptions = StepOptions(),
    skip_divergent: bool = False,
) -> SimulationReport:
    """Sequential minute loop; reactive state carries across steps and the
    resilient policy re-identifies the configuration whenever the schedule
    moves to a new interval, measuring at that interval's mean state."""
    n = len(ts)
    if sched is None:
        sched = AvailabilitySchedule.always(ContingencyId.intact(), n)
    if sched.horizon < n:
        raise ScheduleError(f"schedule horizon {sched.horizon} shorter than series {n}")

    loss = np.zeros(n)
    vuf = np.zeros(n)
    vmin = np.zeros(n)
    vmax = np.zeros(n)
    q_trace = {i: np.zeros(n) for i in m.inverter_ids}
    p_trace = {i: np.zeros(n) for i in m.inverter_ids}
    cids: list[str] = []
    violations = 0
    unknown_count = 0
    skipped: list[int] = []

    prev_q: dict[str, float] = {}
    v_warm: np.ndarray | None = None
    current_key: str | None = None
    interval_curves: Mapping[str, VVC] | None = None

    for t in range(n):
        cid = sched.contingency_at(t)
        if cid.key != current_key:
            current_key = cid.key
            prev_q = {}
            v_warm = None
            interval_curves = None
            if isinstance(policy, ResilientVVC):
                m_c = apply_contingency(m, cid)
                ref = _interval_mean_point(ts, sched, t)
                interval_curves, unk = _resolve_curves(policy, m_c, ref)
                if unk:
                    unknown_count += 1
        cids.append(cid.key)
        try:
            res = step(m, ts.steps[t], policy, cid, prev_q=prev_q, opts=opts,
                       v_warm=v_warm, curves_override=interval_curves)
        except PowerFlowDivergence as exc:
            if skip_divergent:
                skipped.append(t)
                loss[t] = math.nan
                vuf[t] = math.nan
                continue
            raise SimulationError(str(exc), t) from exc
        prev_q = res.q_final
        v_warm = res.v_pu * compiled(apply_contingency(m, cid)).v_base
        loss[t] = res.loss_kw
        vuf[t] = res.vuf_pct
        vmag = np.abs(res.v_pu)
        vmin[t] = float(vmag.min())
        vmax[t] = float(vmag.max())
        violations += res.n_violations
        for i, q in res.q_final.items():
            q_trace[i][t] = q
        for i, p in res.p_inv.items():
            p_trace[i][t] = p

    ok = ~np.isnan(loss)
    dt_h = ts.step_minutes / 60.0
    return SimulationReport(
        policy=policy.describe(),
        feeder_checksum=network_checksum(m),
        n_steps=n,
        step_minutes=ts.step_minutes,
        energy_loss_kwh=float(loss[ok].sum() * dt_h),
        avg_vuf_pct=float(vuf[ok].mean()) if ok.any() else 0.0,
        violation_count=violations,
        unknown_classifications=unknown_count,
        loss_kw=loss,
        vuf_pct=vuf,
        v_min_pu=vmin,
        v_max_pu=vmax,
        q_trace=q_trace,
        p_trace=p_trace,
        contingency_keys=cids,
        metadata={"skipped_steps": skipped},
    )


def _interval_mean_point(ts: TimeSeries, sched: AvailabilitySchedule, t: int) -> ScenarioPoint:
    """Mean operating point of the schedule interval containing step t; the
    online classifier works from averaged measurements, not a single minute."""
    for start, end, _ in sched.entries:
        if start <= t < end:
            break
    end = min(end, len(ts))
    span = ts.steps[start:end]
    load_ids = sorted(span[0].loads)
    inv_ids = sorted(span[0].inv_p)
    from .powerflow import LoadState
    loads = {}
    for lid in load_ids:
        arr = np.array([p.loads[lid].as_tuple() for p in span])
        loads[lid] = LoadState(*(float(x) for x in arr.mean(axis=0)))
    inv_p = {i: float(np.mean([p.inv_p[i] for p in span])) for i in inv_ids}
    inv_q = {i: float(np.mean([p.q_base(i) for p in span])) for i in inv_ids}
    return ScenarioPoint(weight=1.0, loads=loads, inv_p=inv_p, inv_q=inv_q)


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeltaReport:
    """b relative to a.  ``*_delta_pct`` is the signed change (b-a)/a; the
    ``*_improvement_pct`` fields flip the sign so positive means b better."""

    loss_delta_kwh: float
    loss_delta_pct: float
    vuf_delta_pct_points: float
    vuf_delta_pct: float

    @property
    def loss_improvement_pct(self) -> float:
        return -self.loss_delta_pct

    @property
    def vuf_improvement_pct(self) -> float:
        return -self.vuf_delta_pct

    def to_dict(self) -> dict:
        return {
            "loss_delta_kwh": self.loss_delta_kwh,
            "loss_delta_pct": self.loss_delta_pct,
            "vuf_delta_pct_points": self.vuf_delta_pct_points,
            "vuf_delta_pct": self.vuf_delta_pct,
            "loss_improvement_pct": self.loss_improvement_pct,
            "vuf_improvement_pct": self.vuf_improvement_pct,
        }


def compare_reports(a: SimulationReport, b: SimulationReport) -> DeltaReport:
    if a.n_steps != b.n_steps or a.step_minutes != b.step_minutes:
        raise ValueError("reports cover different horizons")
    if a.feeder_checksum != b.feeder_checksum:
        raise ValueError("reports come from different feeders")
    return DeltaReport(
        loss_delta_kwh=b.energy_loss_kwh - a.energy_loss_kwh,
        loss_delta_pct=100.0 * (b.energy_loss_kwh - a.energy_loss_kwh) / a.energy_loss_kwh,
        vuf_delta_pct_points=b.avg_vuf_pct - a.avg_vuf_pct,
        vuf_delta_pct=100.0 * (b.avg_vuf_pct - a.avg_vuf_pct) / a.avg_vuf_pct,
    )


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def report_to_csv(rep: SimulationReport) -> str:
    inv_ids = sorted(rep.q_trace)
    buf = io.StringIO()
    wr = csv.writer(buf)
    wr.writerow(["step", "contingency", "loss_kw", "vuf_pct", "v_min_pu", "v_max_pu"]
                + [f"{i}.q_kvar" for i in inv_ids] + [f"{i}.p_kw" for i in inv_ids])
    for t in range(rep.n_steps):
        wr.writerow(
            [t, rep.contingency_keys[t], f"{rep.loss_kw[t]:.9g}", f"{rep.vuf_pct[t]:.9g}",
             f"{rep.v_min_pu[t]:.9g}", f"{rep.v_max_pu[t]:.9g}"]
            + [f"{rep.q_trace[i][t]:.9g}" for i in inv_ids]
            + [f"{rep.p_trace[i][t]:.9g}" for i in inv_ids]
        )
    return buf.getvalue()


def save_report(rep: SimulationReport, csv_path: str | Path, json_path: str | Path) -> None:
    Path(csv_path).write_text(report_to_csv(rep))
    Path(json_path).write_text(json.dumps(rep.summary_dict(), indent=1, sort_keys=True))
