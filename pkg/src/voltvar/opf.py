"""Multi-scenario optimal-voltage search and per-scenario reactive dispatch.

Both stages are simulation-constrained: every candidate is evaluated through
the full nonlinear power flow, so the network equations hold exactly at each
point.  The optimizer is a bounded derivative-free coordinate search with a
shrinking step; stage one additionally multi-starts from fixed seeds.

Stage one finds one target voltage per inverter, valid across all scenarios,
by pinning each PCC voltage magnitude to the candidate target with the
inverter's reactive power as an unlimited implicit slack.  Stage two then
finds, scenario by scenario, the bounded reactive-power adjustments that pull
the PCC voltages as close as possible to those targets.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .netmodel import CapabilitySpec, NetworkModel, feasible_q_interval
from .powerflow import (
    PHASES,
    PowerFlowDivergence,
    PowerFlowSolution,
    ScenarioPoint,
    SolveOptions,
    compiled,
    line_losses,
    mean_bus_vuf,
    solve_power_flow,
)
from .scenarios import ScenarioSet

PENALTY_WEIGHT = 1e4
VIOLATION_REPORT_THRESHOLD = 1e-6


class StageError(RuntimeError):
    """An optimization stage could not produce a usable result."""


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Objective:
    """What the stage-one search minimizes, evaluated on a solved power flow.

    kind:
      unbalance  mean over three-phase buses of the voltage unbalance factor [%]
      loss       total four-conductor resistive loss [kW]
      deviation  mean |  |V| - 1 pu | over all bus phases
    """

    kind: str = "unbalance"

    KINDS = ("unbalance", "loss", "deviation")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown objective {self.kind!r}")


def objective_value(sol: PowerFlowSolution, m: NetworkModel, obj: Objective) -> float:
    if obj.kind == "unbalance":
        return mean_bus_vuf(sol, m)
    if obj.kind == "loss":
        return line_losses(sol, m)[1]
    return float(np.mean(np.abs(np.abs(sol.v_pu) - 1.0)))


def limit_violation_residual(sol: PowerFlowSolution, m: NetworkModel) -> float:
    """Sum of squared constraint violations: voltage excursions in pu and
    conductor overloads as a fraction of ampacity."""
    c = compiled(m)
    vmag = np.abs(sol.v_pu)
    under = np.maximum(c.v_min[:, None] - vmag, 0.0) * c.phase_mask
    over_v = np.maximum(vmag - c.v_max[:, None], 0.0) * c.phase_mask
    total = float((under**2).sum() + (over_v**2).sum())
    over_i = (np.abs(sol.i_line) - c.ampacity[:, None]) / c.ampacity[:, None]
    total += float((np.maximum(over_i, 0.0) ** 2).sum())
    return total


# ---------------------------------------------------------------------------
# coordinate search
# ---------------------------------------------------------------------------


@dataclass
class SearchResult:
    x: np.ndarray
    fun: float
    n_eval: int


def coordinate_search(
    f: Callable[[np.ndarray], float],
    x0: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    step0: float,
    step_min: float,
    shrink: float = 0.5,
    cache: dict | None = None,
) -> SearchResult:
    """Bounded coordinate/pattern search with a shrinking step.

    Exploratory passes probe +-step along each axis and keep strict
    improvements; a successful pass is followed by pattern moves along the
    accumulated direction (Hooke-Jeeves), which avoids crawling down long
    valleys one step at a time.  Fully deterministic; the step halves when
    no move helps and the search stops below ``step_min``.  A shared
    ``cache`` lets multiple starts reuse objective evaluations.
    """
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    if cache is None:
        cache = {}

    def ev(pt: np.ndarray) -> float:
        key = tuple(round(float(v), 12) for v in pt)
        if key not in cache:
            cache[key] = f(pt)
        return cache[key]

    def explore(base: np.ndarray, f_base: float, step: float) -> tuple[np.ndarray, float]:
        pt = base.copy()
        val = f_base
        for d in range(len(pt)):
            for sign in (1.0, -1.0):
                trial = pt.copy()
                trial[d] = min(max(trial[d] + sign * step, lower[d]), upper[d])
                if trial[d] == pt[d]:
                    continue
                v = ev(trial)
                if v < val - 1e-15:
                    pt, val = trial, v
                    break
        return pt, val

    f_x = ev(x)
    step = step0
    while step >= step_min:
        x_new, f_new = explore(x, f_x, step)
        if f_new >= f_x - 1e-15:
            step *= shrink
            continue
        # pattern moves: keep doubling down the improving direction
        while True:
            pattern = np.clip(x_new + (x_new - x), lower, upper)
            x, f_x = x_new, f_new
            f_pat = ev(pattern)
            x_try, f_try = explore(pattern, f_pat, step)
            if f_try < f_x - 1e-15:
                x_new, f_new = x_try, f_try
            else:
                break
    return SearchResult(x=x, fun=f_x, n_eval=len(cache))


# ---------------------------------------------------------------------------
# PCC-voltage-pinned power flow (stage-one inner problem)
# ---------------------------------------------------------------------------


@dataclass
class PinnedSolve:
    sol: PowerFlowSolution
    q: np.ndarray
    residual: float          # max | |V_pcc| - target | in pu


class _PinnedSolver:
    """Quasi-Newton driver: adjusts the inverter reactive vector until every
    PCC voltage magnitude matches its target.  The voltage/Q sensitivity
    matrix is estimated once per scenario by finite differences and reused;
    warm starts carry across calls."""

    def __init__(self, m: NetworkModel, tol: float = 1e-6, max_rounds: int = 40):
        self.m = m
        self.c = compiled(m)
        self.tol = tol
        self.max_rounds = max_rounds
        # "unlimited" support still has to respect feeder loadability; well
        # beyond any operational envelope but keeps candidates solvable
        self.q_cap = 2.5 * np.array([m.inverter(i).capability.s_kva for i in self.c.inv_ids])
        self._jac: dict[int, np.ndarray] = {}
        self._warm_q: dict[int, np.ndarray] = {}
        self._warm_v: dict[int, np.ndarray] = {}

    def _pcc_mags(self, sol: PowerFlowSolution) -> np.ndarray:
        return np.abs(sol.v_pu[self.c.inv_bus, self.c.inv_phase])

    def _solve(self, s: ScenarioPoint, q: np.ndarray, key: int) -> PowerFlowSolution:
        opts = SolveOptions(v_init=self._warm_v.get(key))
        sol = solve_power_flow(self.m, s, opts=opts, q_vec=q)
        self._warm_v[key] = sol.v_pu * self.c.v_base
        return sol

    def _jacobian(self, s: ScenarioPoint, key: int, q0: np.ndarray) -> np.ndarray:
        n = len(self.c.inv_ids)
        base = self._pcc_mags(self._solve(s, q0, key))
        jac = np.empty((n, n))
        dq = 1.0  # kVAr probe
        for j in range(n):
            q = q0.copy()
            q[j] += dq
            jac[:, j] = (self._pcc_mags(self._solve(s, q, key)) - base) / dq
        return jac

    def solve(self, s: ScenarioPoint, targets: np.ndarray, key: int) -> PinnedSolve:
        n = len(self.c.inv_ids)
        if n == 0:
            sol = self._solve(s, np.zeros(0), key)
            return PinnedSolve(sol=sol, q=np.zeros(0), residual=0.0)
        q = self._warm_q.get(key, np.zeros(n)).copy()
        if key not in self._jac:
            self._jac[key] = self._jacobian(s, key, np.zeros(n))
        jac = self._jac[key]
        try:
            sol = self._solve(s, q, key)
        except PowerFlowDivergence:
            self._warm_v.pop(key, None)
            q = np.zeros(n)
            sol = self._solve(s, q, key)
        mags = self._pcc_mags(sol)
        err = targets - mags
        best_sol, best_q, best_res = sol, q.copy(), float(np.max(np.abs(err)))
        stall = 0
        step_cap = 30.0  # kVAr per round, keeps candidates inside the solvable region
        for _ in range(self.max_rounds):
            if best_res <= self.tol:
                break
            try:
                dq = np.linalg.solve(jac, err)
            except np.linalg.LinAlgError:
                dq, *_ = np.linalg.lstsq(jac, err, rcond=None)
            big = float(np.max(np.abs(dq)))
            if big > step_cap:
                dq = dq * (step_cap / big)
            q_try = np.clip(q + dq, -self.q_cap, self.q_cap)
            sol = None
            for _attempt in range(6):
                try:
                    sol = self._solve(s, q_try, key)
                    break
                except PowerFlowDivergence:
                    self._warm_v.pop(key, None)  # poisoned warm start
                    q_try = (q_try + best_q) / 2.0
            if sol is None:
                q = best_q.copy()
                break
            mags_new = self._pcc_mags(sol)
            dq_taken = q_try - q
            denom = float(dq_taken @ dq_taken)
            if denom > 1e-16:
                # Broyden secant update keeps the sensitivity current at the
                # operating point without extra probing solves
                jac = jac + np.outer((mags_new - mags) - jac @ dq_taken, dq_taken) / denom
                self._jac[key] = jac
            q, mags = q_try, mags_new
            err = targets - mags
            res = float(np.max(np.abs(err)))
            if res < best_res - 1e-12:
                best_sol, best_q, best_res = sol, q.copy(), res
                stall = 0
            else:
                stall += 1
                if stall >= 4:
                    break  # saturated or degenerate: accept the best effort
        self._warm_q[key] = best_q
        return PinnedSolve(sol=best_sol, q=best_q, residual=best_res)


# ---------------------------------------------------------------------------
# stage one
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimalVoltages:
    """One scenario-independent target voltage per inverter, in pu."""

    voltages: Mapping[str, float]
    objective: Objective
    achieved: float
    diagnostics: dict = field(default_factory=dict)

    def vector(self, inv_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.voltages[i] for i in inv_ids])

    def to_dict(self) -> dict:
        return {
            "objective": self.objective.kind,
            "achieved": self.achieved,
            "voltages": dict(sorted(self.voltages.items())),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "OptimalVoltages":
        return cls(
            voltages={k: float(v) for k, v in d["voltages"].items()},
            objective=Objective(d.get("objective", "unbalance")),
            achieved=float(d.get("achieved", math.nan)),
            diagnostics=dict(d.get("diagnostics", {})),
        )


STAGE1_SEEDS = (0.98, 1.00, 1.02)
STAGE1_STEP0 = 0.01
STAGE1_STEP_MIN = 1e-4


def stage1_optimal_voltages(
    m: NetworkModel,
    ss: ScenarioSet,
    obj: Objective,
    seeds: Sequence[float] = STAGE1_SEEDS,
    pin_tol: float = 1e-6,
) -> OptimalVoltages:
    """Search the per-inverter target-voltage vector that minimizes the
    probability-weighted objective over all scenarios, with unlimited
    reactive support enforcing each PCC at its target.  Voltage/current
    limits enter as a quadratic penalty inside each scenario term."""
    c = compiled(m)
    inv_ids = list(c.inv_ids)
    if not inv_ids:
        raise StageError("stage one needs at least one inverter")
    lower = np.array([m.bus(m.inverter(i).bus).v_min for i in inv_ids])
    upper = np.array([m.bus(m.inverter(i).bus).v_max for i in inv_ids])
    solver = _PinnedSolver(m, tol=pin_tol)
    weights = ss.weights
    n_eval = 0
    worst_violation = 0.0

    def evaluate(x: np.ndarray) -> float:
        nonlocal n_eval, worst_violation
        n_eval += 1
        total = 0.0
        for si, point in enumerate(ss.points):
            pinned = solver.solve(point, x, key=si)
            viol = limit_violation_residual(pinned.sol, m)
            worst_violation = max(worst_violation, viol)
            f_s = objective_value(pinned.sol, m, obj) + PENALTY_WEIGHT * viol
            total += weights[si] * f_s
        return float(total)

    best: SearchResult | None = None
    seed_values: list[float] = []
    shared_cache: dict = {}
    for seed in seeds:
        x0 = np.full(len(inv_ids), seed)
        res = coordinate_search(evaluate, x0, lower, upper, STAGE1_STEP0, STAGE1_STEP_MIN,
                                cache=shared_cache)
        seed_values.append(res.fun)
        if best is None or res.fun < best.fun:
            best = res
    assert best is not None
    return OptimalVoltages(
        voltages=dict(zip(inv_ids, (float(v) for v in best.x))),
        objective=obj,
        achieved=best.fun,
        diagnostics={
            "n_obj_evals": n_eval,
            "seed_values": seed_values,
            "violation_reported": bool(worst_violation > VIOLATION_REPORT_THRESHOLD),
            "worst_violation": worst_violation,
        },
    )


# ---------------------------------------------------------------------------
# stage two
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageTwoResult:
    """Per-scenario reactive adjustments (kVAr) and achieved deviations."""

    dq: tuple[Mapping[str, float], ...]          # one map per scenario
    deviation: tuple[float, ...]                 # achieved objective per scenario
    feasible: tuple[bool, ...]

    def to_dict(self) -> dict:
        return {
            "dq": [dict(sorted(d.items())) for d in self.dq],
            "deviation": list(self.deviation),
            "feasible": list(self.feasible),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StageTwoResult":
        return cls(
            dq=tuple({k: float(v) for k, v in row.items()} for row in d["dq"]),
            deviation=tuple(float(v) for v in d["deviation"]),
            feasible=tuple(bool(v) for v in d["feasible"]),
        )


STAGE2_STEP_MIN = 1e-3   # kVAr
# Coupled inverters leave the deviation objective flat along some reactive
# directions; an infinitesimal effort term picks the least-effort point so
# each unit's optimum is a deterministic, regression-friendly function of the
# operating point.  Far too small to move a non-degenerate optimum.
STAGE2_EFFORT_TIEBREAK = 1e-8   # (pu^2 per kVAr^2)


_sens_cache: "weakref.WeakKeyDictionary[NetworkModel, np.ndarray]" = weakref.WeakKeyDictionary()


def _dv_dq_matrix(m: NetworkModel, s: ScenarioPoint) -> np.ndarray:
    """Finite-difference PCC-voltage/reactive-power sensitivity, estimated
    once per network (it barely moves with the operating point)."""
    cached = _sens_cache.get(m)
    if cached is not None:
        return cached
    c = compiled(m)
    n = len(c.inv_ids)
    base = solve_power_flow(m, s)
    mags0 = np.abs(base.v_pu[c.inv_bus, c.inv_phase])
    sens = np.zeros((n, n))
    dq = 1.0
    for j in range(n):
        q = np.array([s.q_base(i) for i in c.inv_ids])
        q[j] += dq
        sol = solve_power_flow(m, s, q_vec=q, opts=SolveOptions(v_init=base.v_pu * c.v_base))
        sens[:, j] = (np.abs(sol.v_pu[c.inv_bus, c.inv_phase]) - mags0) / dq
    _sens_cache[m] = sens
    return sens


def stage2_optimal_dq(
    m: NetworkModel,
    s: ScenarioPoint,
    vopt: OptimalVoltages,
    caps: Mapping[str, CapabilitySpec] | None = None,
    v_init: np.ndarray | None = None,
) -> dict[str, float]:
    """Minimize the summed squared PCC-voltage deviation from the targets
    over the box of feasible reactive adjustments.  The box intersects the
    apparent-power circle, the power-factor envelope and the absolute cap of
    each inverter's capability; candidates are projected, never penalized.

    The search starts from the clipped least-norm linear estimate of the
    required adjustment, so when several dispatches reach the same deviation
    the returned one is the deterministic least-effort point.
    """
    c = compiled(m)
    inv_ids = list(c.inv_ids)
    if not inv_ids:
        return {}
    missing = [i for i in inv_ids if i not in vopt.voltages]
    if missing:
        raise StageError(f"targets missing for inverters {missing}")
    specs = {i: (caps[i] if caps and i in caps else m.inverter(i).capability) for i in inv_ids}
    lo = np.empty(len(inv_ids))
    hi = np.empty(len(inv_ids))
    for k, i in enumerate(inv_ids):
        q_lo, q_hi = feasible_q_interval(specs[i], s.inv_p[i])
        base = s.q_base(i)
        lo[k], hi[k] = q_lo - base, q_hi - base
    targets = vopt.vector(inv_ids)

    warm = {"v": v_init}
    failures = 0
    q_base_vec = np.array([s.q_base(i) for i in inv_ids])

    def evaluate(dq: np.ndarray) -> float:
        nonlocal failures
        try:
            sol = solve_power_flow(m, s, opts=SolveOptions(v_init=warm["v"]),
                                   q_vec=q_base_vec + dq)
        except PowerFlowDivergence:
            failures += 1
            return math.inf
        warm["v"] = sol.v_pu * c.v_base
        pcc = np.abs(sol.v_pu[c.inv_bus, c.inv_phase])
        viol = limit_violation_residual(sol, m)
        return float(((pcc - targets) ** 2).sum() + PENALTY_WEIGHT * viol
                     + STAGE2_EFFORT_TIEBREAK * (dq @ dq))

    try:
        base_sol = solve_power_flow(m, s, q_vec=q_base_vec)
    except PowerFlowDivergence as exc:
        raise StageError(f"power flow diverged at the baseline point: {exc}") from exc
    mags = np.abs(base_sol.v_pu[c.inv_bus, c.inv_phase])
    sens = _dv_dq_matrix(m, s)
    dq0, *_ = np.linalg.lstsq(sens, targets - mags, rcond=1e-3)
    x0 = np.clip(dq0, lo, hi)
    span = float(np.max(hi - lo))
    step0 = max(span / 4.0, STAGE2_STEP_MIN)
    res = coordinate_search(evaluate, x0, lo, hi, step0, STAGE2_STEP_MIN)
    if not math.isfinite(res.fun):
        raise StageError("power flow diverged at every stage-two candidate")
    return {i: float(res.x[k]) for k, i in enumerate(inv_ids)}


def stage2_all_scenarios(
    m: NetworkModel,
    ss: ScenarioSet,
    vopt: OptimalVoltages,
    caps: Mapping[str, CapabilitySpec] | None = None,
) -> StageTwoResult:
    c = compiled(m)
    dqs: list[dict[str, float]] = []
    devs: list[float] = []
    feas: list[bool] = []
    for point in ss.points:
        dq = stage2_optimal_dq(m, point, vopt, caps=caps)
        q_map = {i: point.q_base(i) + dq[i] for i in dq}
        sol = solve_power_flow(m, point, q_set=q_map)
        pcc = np.abs(sol.v_pu[c.inv_bus, c.inv_phase])
        devs.append(float(((pcc - vopt.vector(list(c.inv_ids))) ** 2).sum()))
        ok = True
        for i in dq:
            spec = caps[i] if caps and i in caps else m.inverter(i).capability
            q_lo, q_hi = feasible_q_interval(spec, point.inv_p[i])
            total = point.q_base(i) + dq[i]
            if not (q_lo - 1e-9 <= total <= q_hi + 1e-9):
                ok = False
        feas.append(ok)
        dqs.append(dq)
    return StageTwoResult(dq=tuple(dqs), deviation=tuple(devs), feasible=tuple(feas))
