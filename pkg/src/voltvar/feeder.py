"""Bundled synthetic LV feeder and minute-resolution demand synthesis.

The shipped test system is a 12-bus radial four-wire feeder: a transformer
busbar (which also carries an aggregate load standing in for a second feeder
on the same transformer), a five-bus main, and four spurs.  74 notional
customers spread unevenly over phases a/b/c make the system unbalanced, and
nine single-phase V2G charging stations sit at mid-to-far depths so that the
network seen from each charge point changes measurably when any one station
drops out.

The week generator layers diurnal shapes, weekday/weekend variation and
autocorrelated noise over per-load base demands; charging stations hold a
standby draw so the feeder always sees their presence.  Everything is
deterministic for a given seed.
"""

from __future__ import annotations

import math
import zlib
from pathlib import Path

import numpy as np

from .netmodel import (
    Bases,
    Bus,
    CapabilitySpec,
    Inverter,
    Line,
    Load,
    NetworkModel,
    SlackSource,
    ZIPLoad,
    load_network,
)
from .powerflow import LoadState, ScenarioPoint
from .scenarios import TimeSeries

DATA_DIR = Path(__file__).parent / "data"
FEEDER_FILE = DATA_DIR / "lv_feeder_12bus.json"

V_BASE = 230.0
S_BASE_KVA = 400.0

# (phase-diag r, x), (neutral r, x), phase-phase mutual x, phase-neutral mutual x  [ohm/km]
# reactance-rich overhead-style spans: the high series X keeps the impedance
# fingerprints and the volt-var leverage strong without the resistive drops a
# cable run of the same magnitude would cost; the neutral stays closely
# coupled to the phases so that reactive action on one phase barely disturbs
# the others (the decentralized loops must not fight through the return path)
_CABLES = {
    "heavy": ((0.320, 0.350), (0.360, 0.330), 0.280, 0.255),
    "mid": ((0.400, 0.600), (0.400, 0.580), 0.400, 0.375),
    "spur": ((0.550, 0.800), (0.500, 0.780), 0.500, 0.460),
}

#   line id: (from, to, cable, length km, ampacity A)
# two-segment trunk with nine private station spurs off its two junctions:
# every same-phase trio shares trunk up to a junction (so an outage reshapes
# what the partners measure) but each station owns its leg, which bounds how
# strongly the control loops interact
_LINES = [
    ("l01", "b0", "b1", "heavy", 0.24, 270.0),
    ("l12", "b1", "b2", "mid", 0.30, 180.0),
    ("s13", "b1", "b3", "mid", 0.22, 180.0),
    ("s14", "b1", "b4", "mid", 0.24, 180.0),
    ("s15", "b1", "b5", "mid", 0.22, 180.0),
    ("s16", "b1", "b6", "spur", 0.20, 120.0),
    ("s27", "b2", "b7", "mid", 0.24, 180.0),
    ("s28", "b2", "b8", "mid", 0.28, 180.0),
    ("s29", "b2", "b9", "mid", 0.22, 180.0),
    ("s2a", "b2", "b10", "mid", 0.26, 180.0),
    ("s2b", "b2", "b11", "spur", 0.24, 120.0),
]

# customers per (bus, phase); 74 in total
_CUSTOMERS = {
    ("b1", "a"): 3, ("b1", "b"): 3, ("b1", "c"): 3,
    ("b2", "a"): 3, ("b2", "b"): 2, ("b2", "c"): 3,
    ("b3", "a"): 4, ("b3", "c"): 2,
    ("b4", "b"): 4, ("b4", "a"): 2,
    ("b5", "c"): 4, ("b5", "b"): 2,
    ("b6", "a"): 3, ("b6", "b"): 3, ("b6", "c"): 3,
    ("b7", "a"): 4, ("b7", "b"): 2,
    ("b8", "b"): 4, ("b8", "c"): 2,
    ("b9", "c"): 4, ("b9", "a"): 2,
    ("b10", "a"): 4, ("b10", "c"): 3,
    ("b11", "b"): 4, ("b11", "a"): 4,
}

# aggregate for the parallel feeder hanging off the same transformer
_AGGREGATE = {("b0", "a"): 29, ("b0", "b"): 28, ("b0", "c"): 28}

KW_PER_CUSTOMER = 0.30

#   inverter id: (bus, phase); every station has a private spur, and each
#   same-phase trio spans both junctions so partners always share deep trunk
_STATIONS = {
    "inv1": ("b3", "a"),
    "inv2": ("b7", "a"),
    "inv3": ("b8", "a"),
    "inv4": ("b4", "b"),
    "inv5": ("b9", "b"),
    "inv6": ("b10", "b"),
    "inv7": ("b5", "c"),
    "inv8": ("b11", "c"),
    "inv9": ("b9", "c"),
}

STATION_S_KVA = 7.5
STATION_P_KW = 6.0
STATION_Q_MAX = 6.0


def _cable_matrix(kind: str, length_km: float) -> np.ndarray:
    (rp, xp), (rn, xn), xm, xmn = _CABLES[kind]
    z = np.zeros((4, 4), dtype=complex)
    for k in range(3):
        z[k, k] = (rp + 1j * xp) * length_km
    z[3, 3] = (rn + 1j * xn) * length_km
    for a in range(3):
        for b in range(3):
            if a != b:
                z[a, b] = 1j * xm * length_km
        z[a, 3] = z[3, a] = 1j * xmn * length_km
    return z


# per-phase demand skew; the feeder is meant to run visibly unbalanced
_PHASE_FACTOR = {"a": 1.02, "b": 0.98, "c": 1.00}


def _zip_for(bus: str, phase: str, aggregate: bool) -> ZIPLoad:
    # per-location mix from a stable hash; residential demand here is heavily
    # voltage-dependent and runs at a high power factor, so feeder loss falls
    # when voltages fall
    h = (zlib.crc32(f"{bus}.{phase}".encode()) % 997) / 997.0
    if aggregate:
        zp, ip = 0.30, 0.40
        pf = 0.97
    else:
        zp = 0.26 + 0.08 * h
        ip = 0.36 + 0.08 * ((h * 7) % 1.0)
        pf = 0.96 + 0.03 * ((h * 13) % 1.0)
    pp = 1.0 - zp - ip
    customers = (_AGGREGATE if aggregate else _CUSTOMERS)[(bus, phase)]
    pd0 = KW_PER_CUSTOMER * customers * _PHASE_FACTOR[phase]
    qd0 = pd0 * math.tan(math.acos(pf))
    zq = min(zp + 0.15, 0.75)
    return ZIPLoad(pd0=pd0, qd0=qd0, z_p=zp, i_p=ip, p_p=pp,
                   z_q=zq, i_q=ip, p_q=max(1.0 - zq - ip, 0.0),
                   v0=1.0).normalized()


def build_feeder() -> NetworkModel:
    """Construct the bundled 12-bus feeder from its fixed parameter tables.

    Buses hosting charging stations carry the narrower voltage band of their
    connection agreements; the rest of the feeder runs on the statutory one.
    """
    station_buses = {bus for bus, _ in _STATIONS.values()}
    buses = tuple(
        Bus(f"b{i}", v_min=0.93, v_max=1.01) if f"b{i}" in station_buses
        else Bus(f"b{i}", v_min=0.90, v_max=1.10)
        for i in range(12)
    )
    lines = tuple(
        Line(lid, a, b, _cable_matrix(kind, length), amp)
        for lid, a, b, kind, length, amp in _LINES
    )
    loads = tuple(
        Load(bus, phase, _zip_for(bus, phase, aggregate=False), customers=n)
        for (bus, phase), n in sorted(_CUSTOMERS.items())
    ) + tuple(
        Load(bus, phase, _zip_for(bus, phase, aggregate=True), customers=n)
        for (bus, phase), n in sorted(_AGGREGATE.items())
    )
    inverters = tuple(
        Inverter(
            inv_id, bus, phase,
            CapabilitySpec(s_kva=STATION_S_KVA, alpha_max=math.acos(0.82),
                           q_max_kvar=STATION_Q_MAX, q_fix_fraction=0.30),
        )
        for inv_id, (bus, phase) in sorted(_STATIONS.items())
    )
    # 400 kVA transformer, ~4 % impedance on its own base, X/R = 5
    z_tx = np.zeros((4, 4), dtype=complex)
    zb = 3 * V_BASE**2 / (S_BASE_KVA * 1000.0)
    zt = 0.04 * zb
    r_t = zt / math.sqrt(1 + 25.0)
    for k in range(4):
        z_tx[k, k] = complex(r_t, 5 * r_t)
    source = SlackSource(bus="b0", v_pu=1.045, angle_deg=0.0, z_series_ohm=z_tx)
    return NetworkModel(buses=buses, lines=lines, loads=loads, inverters=inverters,
                        source=source, bases=Bases(v_base=V_BASE, s_base_kva=S_BASE_KVA))


def load_bundled_feeder() -> NetworkModel:
    """The shipped fixture file (regenerate with scripts/make_feeder.py)."""
    return load_network(FEEDER_FILE)


# ---------------------------------------------------------------------------
# demand synthesis
# ---------------------------------------------------------------------------


def _diurnal_residential(minute_of_day: float, phase_shift_min: float) -> float:
    """Smooth double-peak residential shape, min ~0.45, max ~1.0."""
    t = (minute_of_day - phase_shift_min) / 1440.0 * 2 * math.pi
    return (0.68
            + 0.14 * math.sin(t - 2.4)
            + 0.18 * math.sin(2 * t - 1.1)
            + 0.04 * math.sin(3 * t))


def _diurnal_charging(minute_of_day: float) -> float:
    """Charging utilization: strong overnight block, midday shoulder, and a
    standby floor so a live station never vanishes from the feeder."""
    h = minute_of_day / 60.0
    overnight = math.exp(-0.5 * ((h - 1.5) / 3.4) ** 2) + math.exp(-0.5 * ((h - 23.5) / 2.5) ** 2)
    midday = 0.30 * math.exp(-0.5 * ((h - 13.0) / 3.0) ** 2)
    return min(0.48 + 0.42 * overnight + midday, 0.88)


def synthetic_week(
    m: NetworkModel,
    seed: int = 42,
    days: int = 7,
    step_minutes: float = 1.0,
) -> TimeSeries:
    """Minute-resolution feeder states for ``days`` days.

    Every load gets its own diurnal phase shift, power factor drift and
    autocorrelated multiplicative noise; ZIP mixes jitter around the feeder
    values.  Station draw is rated power times a charging-utilization shape,
    never below a standby floor and never above 95 % of the rating.
    """
    rng = np.random.default_rng(seed)
    n_steps = int(days * 1440 / step_minutes)
    load_ids = list(m.load_ids)
    inv_ids = list(m.inverter_ids)
    loads_by_id = {ld.id: ld for ld in m.loads}

    shifts = {lid: float(rng.uniform(-90, 90)) for lid in load_ids}
    noise_state = {lid: 0.0 for lid in load_ids}
    zip_jitter = {lid: 0.0 for lid in load_ids}
    ev_state = {iid: 0.0 for iid in inv_ids}
    rho, sigma = 0.97, 0.035
    rho_ev, sigma_ev = 0.985, 0.02

    steps: list[ScenarioPoint] = []
    for t in range(n_steps):
        minute = (t * step_minutes) % 1440.0
        day = int(t * step_minutes // 1440)
        weekend = day % 7 >= 5
        load_states: dict[str, LoadState] = {}
        for lid in load_ids:
            z = loads_by_id[lid].zip
            noise_state[lid] = rho * noise_state[lid] + rng.normal(0.0, sigma)
            zip_jitter[lid] = 0.9 * zip_jitter[lid] + rng.normal(0.0, 0.01)
            shape = _diurnal_residential(minute, shifts[lid])
            if weekend:
                shape = 0.85 * shape + 0.13
            mult = shape * math.exp(noise_state[lid])
            pd0 = max(z.pd0 * mult, 0.02 * z.pd0)
            qd0 = max(z.qd0 * mult, 0.0)
            j = float(np.clip(zip_jitter[lid], -0.08, 0.08))
            zp = min(max(z.z_p + j, 0.05), 0.7)
            ip = min(max(z.i_p - j / 2, 0.05), 0.7)
            pp = max(1.0 - zp - ip, 0.0)
            s = zp + ip + pp
            zq = min(max(z.z_q + j, 0.05), 0.7)
            iq = min(max(z.i_q - j / 2, 0.05), 0.7)
            pq = max(1.0 - zq - iq, 0.0)
            sq = zq + iq + pq
            load_states[lid] = LoadState(pd0, qd0, zp / s, ip / s, pp / s, zq / sq, iq / sq, pq / sq)
        inv_p: dict[str, float] = {}
        for iid in inv_ids:
            ev_state[iid] = rho_ev * ev_state[iid] + rng.normal(0.0, sigma_ev)
            duty = _diurnal_charging(minute) * math.exp(ev_state[iid])
            duty = float(np.clip(duty, 0.40, 0.88))
            inv_p[iid] = -STATION_P_KW * duty      # stations only consume
        steps.append(ScenarioPoint(weight=0.0, loads=load_states, inv_p=inv_p))
    return TimeSeries(steps=tuple(steps), step_minutes=step_minutes)


def first_day(ts: TimeSeries) -> TimeSeries:
    per_day = int(1440 / ts.step_minutes)
    return TimeSeries(steps=ts.steps[:per_day], step_minutes=ts.step_minutes)
