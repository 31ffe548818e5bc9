"""Unbalanced three-phase-plus-neutral power flow on radial feeders.

The solver is a backward/forward current-injection sweep.  Voltages are
phase-to-neutral phasors; the drop over a line span for phase k is the
difference of the phase-conductor and neutral-conductor drops,

    dV_kn = R_kk * I_k - R_nn * I_n
            + j * sum_rho (X_k,rho - X_n,rho) * I_rho     rho in {a,b,c,n}

with the neutral current fixed by construction to I_n = -(I_a + I_b + I_c)
(return-current convention; the neutral is grounded at the source only).
Off-diagonal resistances, if present in the data, do not enter the drop.
This form conserves power exactly against four-conductor R|I|^2 losses.

Loads are re-evaluated through their ZIP law at every iteration, inverters
inject signed P plus an assigned Q at their phase.  All internal arithmetic
is in volts/amperes/ohms; reported voltages are per unit.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .netmodel import CONDUCTORS, PHASES, NetworkModel, ZIPLoad

_ALPHA = complex(-0.5, math.sqrt(3.0) / 2.0)  # 1 /_ 120 degrees


class PowerFlowDivergence(RuntimeError):
    """Sweep failed to reach the voltage tolerance (overload / infeasible case)."""

    def __init__(self, message: str, iterations: int = 0, mismatch: float = float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.mismatch = mismatch


# ---------------------------------------------------------------------------
# operating-point types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LoadState:
    """Per-scenario state of one load: nominal demand plus ZIP coefficients."""

    pd0: float
    qd0: float
    z_p: float = 0.0
    i_p: float = 0.0
    p_p: float = 1.0
    z_q: float = 0.0
    i_q: float = 0.0
    p_q: float = 1.0

    def as_tuple(self) -> tuple[float, ...]:
        return (self.pd0, self.qd0, self.z_p, self.i_p, self.p_p, self.z_q, self.i_q, self.p_q)


@dataclass(frozen=True)
class ScenarioPoint:
    """One weighted operating point: per-load ZIP state keyed by load id
    (``bus.phase``) and per-inverter signed active power / baseline reactive
    power, both in kW / kVAr."""

    weight: float
    loads: Mapping[str, LoadState]
    inv_p: Mapping[str, float]
    inv_q: Mapping[str, float] = field(default_factory=dict)

    def q_base(self, inv_id: str) -> float:
        return self.inv_q.get(inv_id, 0.0)

    def identity_tuple(self) -> tuple:
        """Hashable content view ignoring the weight; used for dedup."""
        return (
            tuple(sorted((k, v.as_tuple()) for k, v in self.loads.items())),
            tuple(sorted(self.inv_p.items())),
            tuple(sorted(self.inv_q.items())),
        )


def zip_demand(z: ZIPLoad | LoadState, v_pu: float, v0: float | None = None) -> tuple[float, float]:
    """Demand (P, Q) in kW/kVAr of a ZIP load at voltage ``v_pu``."""
    if v_pu <= 0:
        raise ValueError("voltage must be positive")
    ref = v0 if v0 is not None else getattr(z, "v0", 1.0)
    x = v_pu / ref
    p = z.pd0 * (z.z_p * x * x + z.i_p * x + z.p_p)
    q = z.qd0 * (z.z_q * x * x + z.i_q * x + z.p_q)
    return p, q


# ---------------------------------------------------------------------------
# compiled network (cached per model instance)
# ---------------------------------------------------------------------------


class _Compiled:
    """Index arrays and BFS ordering for the sweep, built once per model."""

    def __init__(self, m: NetworkModel):
        self.bus_ids = [b.id for b in m.buses]
        self.bus_index = {b: i for i, b in enumerate(self.bus_ids)}
        self.n_bus = len(self.bus_ids)
        root = self.bus_index[m.source.bus]
        self.root = root

        # orient lines away from the source and order them by BFS depth
        adj: dict[int, list[tuple[int, int]]] = {i: [] for i in range(self.n_bus)}
        for li, l in enumerate(m.lines):
            a, b = self.bus_index[l.from_bus], self.bus_index[l.to_bus]
            adj[a].append((b, li))
            adj[b].append((a, li))
        order: list[int] = []        # line indices, BFS order
        from_idx: list[int] = []
        to_idx: list[int] = []
        seen = {root}
        frontier = [root]
        while frontier:
            nxt: list[int] = []
            for b in frontier:
                for nb, li in adj[b]:
                    if nb in seen:
                        continue
                    seen.add(nb)
                    order.append(li)
                    from_idx.append(b)
                    to_idx.append(nb)
                    nxt.append(nb)
            frontier = nxt
        if len(seen) != self.n_bus:
            missing = [self.bus_ids[i] for i in range(self.n_bus) if i not in seen]
            raise ValueError(f"buses unreachable from the source: {missing}")
        self.line_order = order
        self.from_idx = np.array(from_idx, dtype=np.intp)
        self.to_idx = np.array(to_idx, dtype=np.intp)
        self.n_line = len(order)

        # per-line effective drop matrix (3x4): diag R + j X row, order a,b,c,n
        zs = [np.asarray(m.lines[li].z_ohm, dtype=complex) for li in order]
        self.z_eff = np.array([self._drop_matrix(z) for z in zs])
        self.r_diag = np.array([np.real(np.diag(z)) for z in zs])        # (n_line, 4)
        self.ampacity = np.array([m.lines[li].ampacity for li in order])
        self.line_ids = [m.lines[li].id for li in order]
        self.z_src = self._drop_matrix(np.asarray(m.source.z_series_ohm, dtype=complex))

        self.v_base = m.bases.v_base
        self.v_source = m.source.phase_voltages(self.v_base)             # volts, (3,)

        self.load_ids = list(m.load_ids)
        self.load_bus = np.array([self.bus_index[ld.bus] for ld in m.loads], dtype=np.intp)
        self.load_phase = np.array([PHASES.index(ld.phase) for ld in m.loads], dtype=np.intp)
        self.load_v0 = np.array([ld.zip.v0 for ld in m.loads])
        self.inv_ids = list(m.inverter_ids)
        self.inv_bus = np.array([self.bus_index[i.bus] for i in m.inverters], dtype=np.intp)
        self.inv_phase = np.array([PHASES.index(i.phase) for i in m.inverters], dtype=np.intp)
        self.three_phase_buses = np.array(
            [i for i, b in enumerate(m.buses) if all(p in b.phases for p in PHASES)], dtype=np.intp
        )
        self.v_min = np.array([b.v_min for b in m.buses])
        self.v_max = np.array([b.v_max for b in m.buses])
        self.phase_mask = np.array([[p in b.phases for p in PHASES] for b in m.buses])

        # constant nodal system (series network + slack Norton source); None
        # when a branch impedance is singular, which forces pure sweeps
        try:
            self.y_net, self.rhs_src = self._nodal_network()
        except np.linalg.LinAlgError:
            self.y_net, self.rhs_src = None, None
        self._jac_buf = np.zeros((6 * self.n_bus, 6 * self.n_bus))
        self._scenario_cache: dict[int, tuple] = {}
        self._scenario_refs: dict[int, object] = {}

    def _nodal_network(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.n_bus
        y_net = np.zeros((3 * n, 3 * n), dtype=complex)
        rhs = np.zeros(3 * n, dtype=complex)

        def z3(z_eff: np.ndarray) -> np.ndarray:
            return z_eff[:, :3] - z_eff[:, 3][:, None] @ np.ones((1, 3))

        for li in range(self.n_line):
            y = np.linalg.inv(z3(self.z_eff[li]))
            a, b = self.from_idx[li], self.to_idx[li]
            sa, sb = slice(3 * a, 3 * a + 3), slice(3 * b, 3 * b + 3)
            y_net[sa, sa] += y
            y_net[sb, sb] += y
            y_net[sa, sb] -= y
            y_net[sb, sa] -= y
        y_src = np.linalg.inv(z3(self.z_src))
        sr = slice(3 * self.root, 3 * self.root + 3)
        y_net[sr, sr] += y_src
        rhs[sr] += y_src @ self.v_source
        return y_net, rhs

    @staticmethod
    def _drop_matrix(z: np.ndarray) -> np.ndarray:
        """(3, 4) map from conductor currents to phase-to-neutral drops:
        phase row minus neutral row, resistances on the diagonal only."""
        x = np.imag(z)
        r = np.real(np.diag(z))
        out = 1j * (x[:3, :] - x[3, :][None, :])
        out[np.arange(3), np.arange(3)] += r[:3]
        out[:, 3] -= r[3]
        return out


_compiled_cache: "weakref.WeakKeyDictionary[NetworkModel, _Compiled]" = weakref.WeakKeyDictionary()


def compiled(m: NetworkModel) -> _Compiled:
    c = _compiled_cache.get(m)
    if c is None:
        c = _Compiled(m)
        _compiled_cache[m] = c
    return c


# ---------------------------------------------------------------------------
# solution
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    """Converged sweep state.

    v_pu        (n_bus, 3) complex phase-to-neutral voltages, per unit
    i_line      (n_line, 4) complex conductor currents in amperes, ordered
                like the compiled BFS line order (ids in ``line_ids``)
    load_s      (n_load,) complex consumed kW + j kVAr at the solved voltage
    inv_s       (n_inv,) complex injected kW + j kVAr
    """

    v_pu: np.ndarray
    i_line: np.ndarray
    line_ids: tuple[str, ...]
    bus_ids: tuple[str, ...]
    load_s: np.ndarray
    inv_s: np.ndarray
    source_power: complex      # net kW + j kVAr entering the root bus
    iterations: int
    mismatch: float

    def v_mag(self, bus_idx: int, phase_idx: int) -> float:
        return float(abs(self.v_pu[bus_idx, phase_idx]))


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-9          # pu, max |dV| between sweeps
    max_iter: int = 100
    v_init: np.ndarray | None = None


def _scenario_arrays(c: _Compiled, s: ScenarioPoint):
    """Numeric views of a scenario for this network, cached by identity."""
    key = id(s)
    hit = c._scenario_cache.get(key)
    if hit is not None:
        return hit
    missing = [lid for lid in c.load_ids if lid not in s.loads]
    if missing:
        raise KeyError(f"scenario misses load states for {missing}")
    missing_inv = [iid for iid in c.inv_ids if iid not in s.inv_p]
    if missing_inv:
        raise KeyError(f"scenario misses inverter powers for {missing_inv}")
    pd0 = np.array([s.loads[lid].pd0 for lid in c.load_ids])
    qd0 = np.array([s.loads[lid].qd0 for lid in c.load_ids])
    zp = np.array([(s.loads[lid].z_p, s.loads[lid].i_p, s.loads[lid].p_p) for lid in c.load_ids])
    zq = np.array([(s.loads[lid].z_q, s.loads[lid].i_q, s.loads[lid].p_q) for lid in c.load_ids])
    p_eff = np.array([s.inv_p[i] for i in c.inv_ids])
    q_base = np.array([s.q_base(i) for i in c.inv_ids])
    out = (pd0, qd0, zp, zq, p_eff, q_base)
    c._scenario_cache[key] = out
    c._scenario_refs[key] = s    # pin the id while cached
    if len(c._scenario_cache) > 50000:
        c._scenario_cache.clear()
        c._scenario_refs.clear()
    return out


def solve_power_flow(
    m: NetworkModel,
    s: ScenarioPoint,
    q_set: Mapping[str, float] | None = None,
    opts: SolveOptions | None = None,
    extra_injection: Mapping[tuple[str, str], complex] | None = None,
    linearized: "LinearizedShunts | None" = None,
    q_vec: np.ndarray | None = None,
) -> PowerFlowSolution:
    """Backward/forward sweep for one operating point.

    ``q_set`` assigns total reactive power per inverter id (kVAr, positive
    injects); inverters not listed run at the scenario baseline.  ``q_vec``
    is the equivalent fast path: total reactive power for every inverter in
    compiled order.  ``extra_injection`` adds a fixed current phasor
    (amperes) injected into a (bus, phase); used for driving-point impedance
    probing.  ``linearized`` replaces all shunt elements by fixed admittances
    (see :func:`linearize_shunts`), making the network linear.
    """
    c = compiled(m)
    opts = opts or SolveOptions()
    if q_set:
        unknown = set(q_set) - set(c.inv_ids)
        if unknown:
            raise KeyError(f"q_set names unknown inverters: {sorted(unknown)}")

    if linearized is None:
        pd0, qd0, zp, zq, p_eff, q_base = _scenario_arrays(c, s)
        if q_vec is not None:
            q_eff = np.asarray(q_vec, dtype=float)
        elif q_set:
            q_eff = np.array([
                (q_set[i] if i in q_set else q_base[k]) for k, i in enumerate(c.inv_ids)
            ])
        else:
            q_eff = q_base
        inv_s_kva = (p_eff + 1j * q_eff)
    else:
        pd0 = qd0 = zp = zq = None
        inv_s_kva = np.zeros(len(c.inv_ids), dtype=complex)

    extra_i = np.zeros((c.n_bus, 3), dtype=complex)
    if extra_injection:
        for (bus, phase), amp in extra_injection.items():
            extra_i[c.bus_index[bus], PHASES.index(phase)] += amp

    v = opts.v_init.copy() if opts.v_init is not None else np.tile(c.v_source, (c.n_bus, 1))
    v_base = c.v_base
    tol_volts = opts.tol * v_base
    i_line3 = np.zeros((c.n_line, 3), dtype=complex)
    order = range(c.n_line)
    rev = range(c.n_line - 1, -1, -1)

    iterations = 0
    mismatch = math.inf

    # inner accelerator: Newton iteration on the nodal current balance in
    # real coordinates; quadratic convergence, then sweeps finish the state
    if c.y_net is not None and c.n_bus:
        v_acc, used, ok = _newton_accelerate(
            c, v, extra_i, linearized, pd0, qd0, zp, zq, inv_s_kva,
            tol_volts, opts.max_iter - 2)
        iterations += used
        if ok:
            v = v_acc

    # finishing sweeps: rebuild line currents and voltages from the network
    # equations so KCL/KVL hold by construction in the reported state
    while iterations < opts.max_iter:
        iterations += 1
        # nodal injection currents (consumption positive), amperes
        i_inj = -extra_i.copy()
        if linearized is None:
            vl = v[c.load_bus, c.load_phase]
            x = np.abs(vl) / (v_base * c.load_v0)
            p = pd0 * (zp[:, 0] * x * x + zp[:, 1] * x + zp[:, 2])
            q = qd0 * (zq[:, 0] * x * x + zq[:, 1] * x + zq[:, 2])
            with np.errstate(divide="raise", invalid="raise"):
                try:
                    i_ld = np.conj((p + 1j * q) * 1000.0 / vl)
                    vi = v[c.inv_bus, c.inv_phase]
                    i_iv = np.conj(inv_s_kva * 1000.0 / vi)
                except FloatingPointError as exc:
                    raise PowerFlowDivergence("voltage collapsed to zero during sweep",
                                              iterations, mismatch) from exc
            np.add.at(i_inj, (c.load_bus, c.load_phase), i_ld)
            np.add.at(i_inj, (c.inv_bus, c.inv_phase), -i_iv)
        else:
            i_inj += linearized.y_shunt * v

        # backward: accumulate line currents from the leaves toward the root
        acc = i_inj.copy()
        for li in rev:
            row = acc[c.to_idx[li]]
            i_line3[li] = row
            acc[c.from_idx[li]] += row

        # forward: propagate voltage drops from the slack
        i_root4 = np.empty(4, dtype=complex)
        i_root4[:3] = acc[c.root]
        i_root4[3] = -acc[c.root].sum()
        v_new = np.empty_like(v)
        v_new[c.root] = c.v_source - c.z_src @ i_root4
        i4 = np.empty(4, dtype=complex)
        for li in order:
            i4[:3] = i_line3[li]
            i4[3] = -i_line3[li].sum()
            v_new[c.to_idx[li]] = v_new[c.from_idx[li]] - c.z_eff[li] @ i4
        mismatch = float(np.max(np.abs(v_new - v))) if c.n_bus else 0.0
        v = v_new
        if not np.all(np.isfinite(v)):
            raise PowerFlowDivergence("sweep produced non-finite voltages", iterations, mismatch)
        if mismatch <= tol_volts:
            break
    else:
        raise PowerFlowDivergence(
            f"no convergence after {opts.max_iter} iterations (mismatch {mismatch / v_base:.3e} pu)",
            opts.max_iter, mismatch / v_base)
    if mismatch > tol_volts:
        raise PowerFlowDivergence(
            f"no convergence after {iterations} iterations (mismatch {mismatch / v_base:.3e} pu)",
            iterations, mismatch / v_base)

    i_full = np.concatenate([i_line3, -i_line3.sum(axis=1, keepdims=True)], axis=1)
    if linearized is None:
        vl = v[c.load_bus, c.load_phase]
        x = np.abs(vl) / (v_base * c.load_v0)
        load_s = (pd0 * (zp[:, 0] * x * x + zp[:, 1] * x + zp[:, 2])
                  + 1j * qd0 * (zq[:, 0] * x * x + zq[:, 1] * x + zq[:, 2]))
        inv_s = inv_s_kva.copy()
    else:
        vl = v[c.load_bus, c.load_phase] if len(c.load_bus) else np.zeros(0, complex)
        load_s = np.zeros(len(c.load_ids), dtype=complex)
        inv_s = np.zeros(len(c.inv_ids), dtype=complex)

    source_power = (v[c.root] * np.conj(
        _root_current(c, extra_i, v, linearized, pd0, qd0, zp, zq, inv_s_kva))).sum() / 1000.0
    return PowerFlowSolution(
        v_pu=v / v_base,
        i_line=i_full,
        line_ids=tuple(c.line_ids),
        bus_ids=tuple(c.bus_ids),
        load_s=load_s,
        inv_s=inv_s,
        source_power=complex(source_power),
        iterations=iterations,
        mismatch=mismatch / v_base,
    )


def _newton_accelerate(c, v0, extra_i, linearized, pd0, qd0, zp, zq, inv_s_kva,
                       tol_volts, budget) -> tuple[np.ndarray, int, bool]:
    """Newton iteration on G(V) = Y_net V + I_shunt(V) - rhs = 0.

    The shunt current at a node is conj(S(|V|)) / conj(V); its Wirtinger
    derivatives give 2x2 real blocks, so the update solves a real 6n system.
    Returns (voltages, iterations used, converged-like flag); on any
    breakdown the caller's sweep loop takes over from the best iterate.
    """
    n3 = 3 * c.n_bus
    v = v0.reshape(-1).copy()
    rhs = c.rhs_src + extra_i.reshape(-1)
    k_load = 1.0 / (c.v_base * c.load_v0)
    load_flat = c.load_bus * 3 + c.load_phase
    inv_flat = c.inv_bus * 3 + c.inv_phase
    floor = (0.02 * c.v_base) ** 2

    def residual_and_diag(vf):
        """Complex residual plus diagonal Wirtinger terms (a, b) of dI/dV."""
        g = c.y_net @ vf - rhs
        a_d = np.zeros(n3, dtype=complex)
        b_d = np.zeros(n3, dtype=complex)
        if linearized is not None:
            y = linearized.y_shunt.reshape(-1)
            g = g + y * vf
            a_d += y
            return g, a_d, b_d
        if len(load_flat):
            vl = vf[load_flat]
            u2 = (vl * vl.conj()).real
            if np.any(u2 < floor):
                raise PowerFlowDivergence("voltage collapsed during iteration", 0, math.inf)
            u = np.sqrt(u2)
            x = u * k_load
            p = pd0 * (zp[:, 0] * x * x + zp[:, 1] * x + zp[:, 2]) * 1000.0
            q = qd0 * (zq[:, 0] * x * x + zq[:, 1] * x + zq[:, 2]) * 1000.0
            dp = pd0 * (2.0 * zp[:, 0] * x + zp[:, 1]) * k_load * 1000.0
            dq = qd0 * (2.0 * zq[:, 0] * x + zq[:, 1]) * k_load * 1000.0
            s_conj = p - 1j * q
            ds_conj = dp - 1j * dq
            i_ld = s_conj / vl.conj()
            np.add.at(g, load_flat, i_ld)
            np.add.at(a_d, load_flat, ds_conj / (2.0 * u))
            np.add.at(b_d, load_flat,
                      ds_conj * vl / (2.0 * u * vl.conj()) - s_conj / (vl.conj() ** 2))
        if len(inv_flat):
            vi = vf[inv_flat]
            u2 = (vi * vi.conj()).real
            if np.any(u2 < floor):
                raise PowerFlowDivergence("voltage collapsed during iteration", 0, math.inf)
            s_conj = np.conj(inv_s_kva * 1000.0)
            np.add.at(g, inv_flat, -s_conj / vi.conj())
            np.add.at(b_d, inv_flat, s_conj / (vi.conj() ** 2))
        return g, a_d, b_d

    used = 0
    try:
        g, a_d, b_d = residual_and_diag(v)
    except PowerFlowDivergence:
        return v0, 0, False
    res = float(np.max(np.abs(g)))
    jac = c._jac_buf
    didx = np.arange(n3)
    for _ in range(min(budget, 25)):
        if used >= budget:
            break
        used += 1
        jac[:n3, :n3] = c.y_net.real
        jac[:n3, n3:] = -c.y_net.imag
        jac[n3:, :n3] = c.y_net.imag
        jac[n3:, n3:] = c.y_net.real
        apb = a_d + b_d
        amb = a_d - b_d
        jac[didx, didx] += apb.real
        jac[didx, n3 + didx] -= amb.imag
        jac[n3 + didx, didx] += apb.imag
        jac[n3 + didx, n3 + didx] += amb.real
        try:
            step = np.linalg.solve(jac, -np.concatenate([g.real, g.imag]))
        except np.linalg.LinAlgError:
            return v.reshape(c.n_bus, 3), used, used > 1
        dv = step[:n3] + 1j * step[n3:]
        scale = 1.0
        for _damp in range(5):
            v_try = v + scale * dv
            try:
                g_try, a_try, b_try = residual_and_diag(v_try)
            except PowerFlowDivergence:
                scale *= 0.5
                continue
            res_try = float(np.max(np.abs(g_try)))
            if res_try < res or res_try < 1e-9:
                break
            scale *= 0.5
        else:
            return v.reshape(c.n_bus, 3), used, used > 1
        moved = float(np.max(np.abs(v_try - v)))
        v, g, a_d, b_d, res = v_try, g_try, a_try, b_try, res_try
        if not np.all(np.isfinite(v)):
            return v0, used, False
        if moved <= 0.5 * tol_volts and scale == 1.0:
            return v.reshape(c.n_bus, 3), used, True
    return v.reshape(c.n_bus, 3), used, True


def _root_current(c: _Compiled, extra_i, v, linearized, pd0, qd0, zp, zq, inv_s_kva):
    """Total current delivered into the network at the root bus."""
    i_inj = -extra_i.copy()
    if linearized is None:
        vl = v[c.load_bus, c.load_phase]
        x = np.abs(vl) / (c.v_base * c.load_v0)
        p = pd0 * (zp[:, 0] * x * x + zp[:, 1] * x + zp[:, 2])
        q = qd0 * (zq[:, 0] * x * x + zq[:, 1] * x + zq[:, 2])
        i_ld = np.conj((p + 1j * q) * 1000.0 / vl)
        vi = v[c.inv_bus, c.inv_phase]
        i_iv = np.conj(inv_s_kva * 1000.0 / vi)
        np.add.at(i_inj, (c.load_bus, c.load_phase), i_ld)
        np.add.at(i_inj, (c.inv_bus, c.inv_phase), -i_iv)
    else:
        i_inj += linearized.y_shunt * v
    acc = i_inj.copy()
    for li in range(c.n_line - 1, -1, -1):
        acc[c.from_idx[li]] += acc[c.to_idx[li]]
    return acc[c.root]


# ---------------------------------------------------------------------------
# limit checking, losses, unbalance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str          # "undervoltage" | "overvoltage" | "overcurrent"
    subject: str       # "bus.phase" or "line.conductor"
    value: float
    limit: float


def check_limits(sol: PowerFlowSolution, m: NetworkModel) -> list[Violation]:
    """Every bus/phase voltage outside its band and every conductor above
    its ampacity."""
    c = compiled(m)
    out: list[Violation] = []
    vmag = np.abs(sol.v_pu)
    for bi, bus in enumerate(m.buses):
        for pi, ph in enumerate(PHASES):
            if ph not in bus.phases:
                continue
            v = float(vmag[bi, pi])
            if v < bus.v_min:
                out.append(Violation("undervoltage", f"{bus.id}.{ph}", v, bus.v_min))
            elif v > bus.v_max:
                out.append(Violation("overvoltage", f"{bus.id}.{ph}", v, bus.v_max))
    imag = np.abs(sol.i_line)
    for li in range(c.n_line):
        for ci, cond in enumerate(CONDUCTORS):
            i = float(imag[li, ci])
            if i > c.ampacity[li]:
                out.append(Violation("overcurrent", f"{c.line_ids[li]}.{cond}", i, float(c.ampacity[li])))
    return out


def line_losses(sol: PowerFlowSolution, m: NetworkModel) -> tuple[dict[str, float], float]:
    """Resistive losses: per-line kW over all four conductors, and the total."""
    c = compiled(m)
    per_cond = c.r_diag * np.abs(sol.i_line) ** 2 / 1000.0       # kW
    per_line = per_cond.sum(axis=1)
    return {c.line_ids[i]: float(per_line[i]) for i in range(c.n_line)}, float(per_line.sum())


def vuf(voltages: Iterable[complex]) -> float:
    """Voltage unbalance factor in percent: negative- over positive-sequence
    magnitude of the three phase-to-neutral phasors (order a, b, c)."""
    va, vb, vc = list(voltages)
    a = _ALPHA
    v1 = (va + a * vb + a * a * vc) / 3.0
    v2 = (va + a * a * vb + a * vc) / 3.0
    if abs(v1) == 0:
        raise ValueError("positive-sequence magnitude is zero; unbalance undefined")
    return 100.0 * abs(v2) / abs(v1)


def mean_bus_vuf(sol: PowerFlowSolution, m: NetworkModel) -> float:
    """Average unbalance over all three-phase buses."""
    c = compiled(m)
    vals = [vuf(sol.v_pu[bi]) for bi in c.three_phase_buses]
    return float(np.mean(vals)) if vals else 0.0


# ---------------------------------------------------------------------------
# driving-point impedance
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LinearizedShunts:
    """All shunt elements (loads and inverter injections) frozen to the
    admittances they present at a solved operating point."""

    y_shunt: np.ndarray      # (n_bus, 3) complex siemens, consumption positive


def _solve_linear(c: _Compiled, y_shunt: np.ndarray,
                  extra_injection: np.ndarray | None = None) -> np.ndarray:
    """Exact nodal solution of the linearized network in volts.

    With I_n = -(I_a + I_b + I_c), each line's 3x4 drop map collapses to an
    effective 3x3 series impedance, so the whole feeder assembles into a
    standard admittance system; robust regardless of shunt loading."""
    n = c.n_bus
    dim = 3 * n
    y_bus = np.zeros((dim, dim), dtype=complex)
    rhs = np.zeros(dim, dtype=complex)

    def z3(z_eff: np.ndarray) -> np.ndarray:
        return z_eff[:, :3] - z_eff[:, 3][:, None] @ np.ones((1, 3))

    def stamp_branch(a: int, b: int, z_eff: np.ndarray) -> None:
        y = np.linalg.inv(z3(z_eff))
        sa, sb = slice(3 * a, 3 * a + 3), slice(3 * b, 3 * b + 3)
        y_bus[sa, sa] += y
        y_bus[sb, sb] += y
        y_bus[sa, sb] -= y
        y_bus[sb, sa] -= y

    for li in range(c.n_line):
        stamp_branch(c.from_idx[li], c.to_idx[li], c.z_eff[li])
    # slack as a Norton source behind the transformer impedance
    y_src = np.linalg.inv(z3(c.z_src))
    sr = slice(3 * c.root, 3 * c.root + 3)
    y_bus[sr, sr] += y_src
    rhs[sr] += y_src @ c.v_source
    for bi in range(n):
        sl = slice(3 * bi, 3 * bi + 3)
        y_bus[sl, sl] += np.diag(y_shunt[bi])      # consumption-positive shunts draw current
    if extra_injection is not None:
        rhs += extra_injection.reshape(-1)
    v = np.linalg.solve(y_bus, rhs)
    return v.reshape(n, 3)


def linearize_shunts(m: NetworkModel, sol: PowerFlowSolution) -> LinearizedShunts:
    c = compiled(m)
    y = np.zeros((c.n_bus, 3), dtype=complex)
    v_volts = sol.v_pu * c.v_base
    if len(c.load_bus):
        vl = v_volts[c.load_bus, c.load_phase]
        y_ld = np.conj(sol.load_s * 1000.0) / np.abs(vl) ** 2
        np.add.at(y, (c.load_bus, c.load_phase), y_ld)
    if len(c.inv_bus):
        vi = v_volts[c.inv_bus, c.inv_phase]
        y_iv = np.conj(sol.inv_s * 1000.0) / np.abs(vi) ** 2
        np.add.at(y, (c.inv_bus, c.inv_phase), -y_iv)
    return LinearizedShunts(y_shunt=y)


def thevenin_impedance(
    m: NetworkModel,
    bus: str,
    phase: str,
    scenario: ScenarioPoint | None = None,
    q_set: Mapping[str, float] | None = None,
    delta_i: float = 0.1,
    opts: SolveOptions | None = None,
) -> complex:
    """Driving-point impedance in ohms seen into the network at (bus, phase).

    Two solves: the operating point is established (or taken as the no-load
    state when ``scenario`` is None), every shunt is frozen to its
    constant-impedance linearization, and a small current phasor ``delta_i``
    is injected; Z = dV / dI.  With linear shunts the result is exact and
    insensitive to the probe size.
    """
    c = compiled(m)
    if bus not in c.bus_index or phase not in PHASES:
        raise KeyError(f"unknown bus/phase {bus}.{phase}")
    if scenario is None:
        scenario = ScenarioPoint(
            weight=1.0,
            loads={lid: LoadState(0.0, 0.0) for lid in c.load_ids},
            inv_p={iid: 0.0 for iid in c.inv_ids},
        )
    base = solve_power_flow(m, scenario, q_set=q_set, opts=opts)
    lin = linearize_shunts(m, base)
    v_ref = _solve_linear(c, lin.y_shunt)
    probe = np.zeros((c.n_bus, 3), dtype=complex)
    bi, pi = c.bus_index[bus], PHASES.index(phase)
    probe[bi, pi] = complex(delta_i, 0.0)
    v_pert = _solve_linear(c, lin.y_shunt, extra_injection=probe)
    dv = v_pert[bi, pi] - v_ref[bi, pi]
    return dv / complex(delta_i, 0.0)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def solution_to_csv(sol: PowerFlowSolution, m: NetworkModel) -> str:
    """Two blocks: bus voltages (|V| pu, angle deg) and line currents
    (|I| A, loss kW) one row per conductor."""
    c = compiled(m)
    per_line, _ = line_losses(sol, m)
    per_cond = c.r_diag * np.abs(sol.i_line) ** 2 / 1000.0
    rows = ["element,conductor,quantity_1,quantity_2"]
    for bi, bid in enumerate(sol.bus_ids):
        for pi, ph in enumerate(PHASES):
            v = sol.v_pu[bi, pi]
            rows.append(f"{bid},{ph},{abs(v):.9f},{math.degrees(math.atan2(v.imag, v.real)):.6f}")
    for li, lid in enumerate(sol.line_ids):
        for ci, cond in enumerate(CONDUCTORS):
            rows.append(f"{lid},{cond},{abs(sol.i_line[li, ci]):.6f},{per_cond[li, ci]:.9f}")
    return "\n".join(rows) + "\n"
