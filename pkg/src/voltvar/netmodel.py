"""Data model, JSON ingestion and validation for four-wire LV feeders.

The network is a radial graph of buses joined by four-conductor lines
(phases a, b, c plus neutral n), fed from a balanced slack source behind a
series transformer impedance.  Loads are voltage-dependent ZIP mixes,
single-phase.  Inverter-interfaced devices (PV, storage, V2G chargers) sit
on one phase of one bus and exchange signed active power plus controllable
reactive power.
"""

from __future__ import annotations

import cmath
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

PHASES = ("a", "b", "c")
CONDUCTORS = ("a", "b", "c", "n")


class NetworkParseError(ValueError):
    """Input file is not valid JSON."""


class NetworkSchemaError(ValueError):
    """Input parses but misses required fields or has malformed entries."""


class NetworkReferenceError(ValueError):
    """An element refers to a bus/inverter id that does not exist."""


# ---------------------------------------------------------------------------
# element types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[str, ...] = ("a", "b", "c", "n")
    v_min: float = 0.90
    v_max: float = 1.10


@dataclass(frozen=True, eq=False)
class Line:
    """Four-wire series element; ``z_ohm`` is the full 4x4 complex matrix in
    ohms for the whole span (already length-scaled), conductor order a,b,c,n.
    ``ampacity`` applies to each conductor."""

    id: str
    from_bus: str
    to_bus: str
    z_ohm: np.ndarray
    ampacity: float


@dataclass(frozen=True)
class ZIPLoad:
    """Constant-impedance / constant-current / constant-power mix.

    Coefficients are normalized so each triple sums to one; ``v0`` is the
    reference voltage in pu at which demand equals (pd0, qd0).
    """

    pd0: float
    qd0: float
    z_p: float = 0.0
    i_p: float = 0.0
    p_p: float = 1.0
    z_q: float = 0.0
    i_q: float = 0.0
    p_q: float = 1.0
    v0: float = 1.0

    def normalized(self) -> "ZIPLoad":
        sp = self.z_p + self.i_p + self.p_p
        sq = self.z_q + self.i_q + self.p_q
        if sp <= 0 or sq <= 0:
            raise NetworkSchemaError("ZIP coefficient triples must have a positive sum")
        if abs(sp - 1.0) <= 1e-12 and abs(sq - 1.0) <= 1e-12:
            return self
        return replace(
            self,
            z_p=self.z_p / sp, i_p=self.i_p / sp, p_p=self.p_p / sp,
            z_q=self.z_q / sq, i_q=self.i_q / sq, p_q=self.p_q / sq,
        )


@dataclass(frozen=True)
class Load:
    """Single-phase ZIP load; its id is ``<bus>.<phase>`` and must be unique."""

    bus: str
    phase: str
    zip: ZIPLoad
    customers: int = 1

    @property
    def id(self) -> str:
        return f"{self.bus}.{self.phase}"


@dataclass(frozen=True)
class CapabilityMode:
    """Which operational constraint regime an inverter runs under.

    kind:
      capacity_only  apparent-power circle and absolute reactive cap
      accurate       fixed reactive floor plus a power-factor-proportional
                     component, enveloped (max), inside the circle and cap
      lagging_only   absorption only, limited by a minimum power factor
      fixed_pf       reactive output locked to the active power at a set
                     power factor (sign +1 injects, -1 absorbs)
    """

    kind: str = "capacity_only"
    pf_min: float | None = None   # lagging_only
    pf: float | None = None       # fixed_pf
    sign: int | None = None       # fixed_pf: +1 inject, -1 absorb

    KINDS = ("capacity_only", "accurate", "lagging_only", "fixed_pf")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise NetworkSchemaError(f"unknown capability mode {self.kind!r}")
        if self.kind == "lagging_only" and not (self.pf_min and 0 < self.pf_min <= 1):
            raise NetworkSchemaError("lagging_only requires pf_min in (0, 1]")
        if self.kind == "fixed_pf":
            if not (self.pf and 0 < self.pf <= 1) or self.sign not in (-1, 1):
                raise NetworkSchemaError("fixed_pf requires pf in (0, 1] and sign +-1")


@dataclass(frozen=True)
class CapabilitySpec:
    """Reactive-power envelope of one inverter.

    s_kva      rated apparent power
    alpha_max  maximum power-factor angle [rad) used by the accurate regime
    q_max_kvar absolute reactive cap
    q_fix_fraction  fixed reactive floor as a fraction of s_kva
    """

    s_kva: float
    alpha_max: float = math.acos(0.82)
    q_max_kvar: float | None = None
    q_fix_fraction: float = 0.30
    mode: CapabilityMode = CapabilityMode()

    def __post_init__(self) -> None:
        if self.s_kva <= 0:
            raise NetworkSchemaError("inverter rating must be positive")
        if not (0 <= self.alpha_max < math.pi / 2):
            raise NetworkSchemaError("alpha_max must lie in [0, pi/2)")
        if self.q_max_kvar is None:
            object.__setattr__(self, "q_max_kvar", self.s_kva)
        if self.q_max_kvar < 0:
            raise NetworkSchemaError("q_max_kvar must be nonnegative")
        if not (0.0 <= self.q_fix_fraction <= 1.0):
            raise NetworkSchemaError("q_fix_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class Inverter:
    """Single-phase inverter-interfaced device.  Active power is signed:
    positive injects into the grid, negative consumes (V2G charging)."""

    id: str
    bus: str
    phase: str
    capability: CapabilitySpec


@dataclass(frozen=True, eq=False)
class SlackSource:
    """Balanced three-phase slack behind a series 4x4 impedance (the
    distribution transformer); neutral is solidly grounded here."""

    bus: str
    v_pu: float = 1.0
    angle_deg: float = 0.0
    z_series_ohm: np.ndarray = field(default_factory=lambda: np.zeros((4, 4), complex))

    def phase_voltages(self, v_base: float) -> np.ndarray:
        """Open-circuit phase-to-neutral phasors in volts, order a,b,c."""
        mag = self.v_pu * v_base
        a0 = math.radians(self.angle_deg)
        return np.array([mag * cmath.exp(1j * (a0 + s)) for s in (0.0, -2 * math.pi / 3, 2 * math.pi / 3)])


@dataclass(frozen=True)
class Bases:
    """Per-unit bases: ``v_base`` is the phase-to-neutral voltage in volts,
    ``s_base_kva`` the total three-phase apparent power."""

    v_base: float = 230.0
    s_base_kva: float = 400.0

    @property
    def z_base_ohm(self) -> float:
        return 3.0 * self.v_base**2 / (self.s_base_kva * 1000.0)

    def ohm_to_pu(self, z: complex | np.ndarray):
        return z / self.z_base_ohm

    def pu_to_ohm(self, z: complex | np.ndarray):
        return z * self.z_base_ohm


@dataclass(frozen=True)
class ContingencyId:
    """Which single-outage state the network is in: the intact system or
    exactly one inverter out of service."""

    inverter: str | None = None

    @classmethod
    def intact(cls) -> "ContingencyId":
        return cls(None)

    @classmethod
    def inverter_out(cls, inv_id: str) -> "ContingencyId":
        return cls(inv_id)

    @property
    def is_intact(self) -> bool:
        return self.inverter is None

    @property
    def key(self) -> str:
        return "intact" if self.inverter is None else f"out:{self.inverter}"

    @classmethod
    def from_key(cls, key: str) -> "ContingencyId":
        if key == "intact":
            return cls.intact()
        if key.startswith("out:"):
            return cls.inverter_out(key[4:])
        raise ValueError(f"not a contingency key: {key!r}")

    def __str__(self) -> str:
        return self.key


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Immutable feeder model; safe to share across parallel evaluations."""

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    loads: tuple[Load, ...]
    inverters: tuple[Inverter, ...]
    source: SlackSource
    bases: Bases = Bases()

    def bus(self, bus_id: str) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise NetworkReferenceError(f"unknown bus {bus_id!r}")

    def inverter(self, inv_id: str) -> Inverter:
        for i in self.inverters:
            if i.id == inv_id:
                return i
        raise NetworkReferenceError(f"unknown inverter {inv_id!r}")

    def lines_at(self, bus_id: str) -> tuple[Line, ...]:
        return tuple(l for l in self.lines if bus_id in (l.from_bus, l.to_bus))

    def inverters_at(self, bus_id: str) -> tuple[Inverter, ...]:
        return tuple(i for i in self.inverters if i.bus == bus_id)

    @property
    def inverter_ids(self) -> tuple[str, ...]:
        return tuple(i.id for i in self.inverters)

    @property
    def load_ids(self) -> tuple[str, ...]:
        return tuple(ld.id for ld in self.loads)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    kind: str
    subject: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.findings

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "\n".join(f"[{f.kind}] {f.subject}: {f.message}" for f in self.findings)


def validate_network(m: NetworkModel) -> ValidationReport:
    """Check every structural invariant; returns all violations, raises nothing."""
    out: list[Finding] = []
    bus_ids = [b.id for b in m.buses]
    bus_set = set(bus_ids)
    if len(bus_set) != len(bus_ids):
        out.append(Finding("duplicate_bus", "buses", "bus ids are not unique"))

    for b in m.buses:
        if not (0 < b.v_min < b.v_max):
            out.append(Finding("voltage_limits", b.id, f"need 0 < v_min < v_max, got [{b.v_min}, {b.v_max}]"))
        bad = [p for p in b.phases if p not in CONDUCTORS]
        if bad:
            out.append(Finding("phase_set", b.id, f"unknown phases {bad}"))

    for l in m.lines:
        if l.from_bus not in bus_set or l.to_bus not in bus_set:
            out.append(Finding("dangling_line", l.id, "endpoint bus does not exist"))
        z = np.asarray(l.z_ohm)
        if z.shape != (4, 4):
            out.append(Finding("impedance_shape", l.id, f"impedance matrix is {z.shape}, expected (4, 4)"))
            continue
        if not np.allclose(z, z.T, rtol=0, atol=1e-12):
            out.append(Finding("impedance_symmetry", l.id, "impedance matrix is not symmetric"))
        if np.any(np.real(np.diag(z)) < 0):
            out.append(Finding("negative_resistance", l.id, "diagonal resistance is negative"))
        if l.ampacity <= 0:
            out.append(Finding("ampacity", l.id, "ampacity must be positive"))

    seen_loads: set[str] = set()
    for ld in m.loads:
        if ld.bus not in bus_set:
            out.append(Finding("dangling_load", ld.id, "bus does not exist"))
        elif ld.phase not in m.bus(ld.bus).phases:
            out.append(Finding("load_phase", ld.id, f"phase {ld.phase!r} absent at bus {ld.bus!r}"))
        if ld.id in seen_loads:
            out.append(Finding("duplicate_load", ld.id, "more than one load on this bus/phase; pre-aggregate"))
        seen_loads.add(ld.id)
        if ld.zip.pd0 < 0:
            out.append(Finding("load_sign", ld.id, "pd0 must be nonnegative"))
        for tag, s in (("P", ld.zip.z_p + ld.zip.i_p + ld.zip.p_p), ("Q", ld.zip.z_q + ld.zip.i_q + ld.zip.p_q)):
            if abs(s - 1.0) > 1e-9:
                out.append(Finding("zip_normalization", ld.id, f"{tag} coefficients sum to {s}, expected 1"))

    inv_ids: set[str] = set()
    for inv in m.inverters:
        if inv.id in inv_ids:
            out.append(Finding("duplicate_inverter", inv.id, "inverter ids are not unique"))
        inv_ids.add(inv.id)
        if inv.bus not in bus_set:
            out.append(Finding("dangling_inverter", inv.id, "bus does not exist"))
        elif inv.phase not in m.bus(inv.bus).phases:
            out.append(Finding("inverter_phase", inv.id, f"phase {inv.phase!r} absent at bus {inv.bus!r}"))

    if m.source.bus not in bus_set:
        out.append(Finding("dangling_source", "source", f"source bus {m.source.bus!r} does not exist"))
    if np.asarray(m.source.z_series_ohm).shape != (4, 4):
        out.append(Finding("impedance_shape", "source", "source series impedance must be 4x4"))

    out.extend(_check_radial(m, bus_set))
    return ValidationReport(tuple(out))


def _check_radial(m: NetworkModel, bus_set: set[str]) -> list[Finding]:
    """Connected and radial: reachable from the source bus with
    |lines| = |buses| - 1 and no cycles."""
    out: list[Finding] = []
    if m.source.bus not in bus_set:
        return out
    adj: dict[str, list[str]] = {b: [] for b in bus_set}
    for l in m.lines:
        if l.from_bus in bus_set and l.to_bus in bus_set:
            adj[l.from_bus].append(l.to_bus)
            adj[l.to_bus].append(l.from_bus)
    seen = {m.source.bus}
    stack = [m.source.bus]
    while stack:
        b = stack.pop()
        for nb in adj[b]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    unreachable = sorted(bus_set - seen)
    if unreachable:
        out.append(Finding("connectivity", ",".join(unreachable), "buses unreachable from the source"))
    if len(m.lines) != len(bus_set) - 1:
        out.append(Finding("radiality", "lines", f"{len(m.lines)} lines for {len(bus_set)} buses; a radial feeder needs n-1"))
    return out


# ---------------------------------------------------------------------------
# contingency edits
# ---------------------------------------------------------------------------


def apply_contingency(m: NetworkModel, c: ContingencyId) -> NetworkModel:
    """Intact returns the model unchanged (same object); an inverter outage
    removes that inverter entirely, so it neither injects nor is controlled."""
    if c.is_intact:
        return m
    if c.inverter not in m.inverter_ids:
        raise NetworkReferenceError(f"unknown inverter {c.inverter!r}")
    kept = tuple(i for i in m.inverters if i.id != c.inverter)
    return replace(m, inverters=kept)


# ---------------------------------------------------------------------------
# JSON schema (documented in the README)
# ---------------------------------------------------------------------------


def _cx(pair) -> complex:
    return complex(pair[0], pair[1])


def _cx_pair(z: complex) -> list[float]:
    return [float(z.real), float(z.imag)]


def _matrix_from_json(rows) -> np.ndarray:
    return np.array([[_cx(e) for e in row] for row in rows], dtype=complex)


def _matrix_to_json(z: np.ndarray) -> list[list[list[float]]]:
    return [[_cx_pair(e) for e in row] for row in np.asarray(z, dtype=complex)]


def _require(d: Mapping[str, Any], key: str, where: str):
    if key not in d:
        raise NetworkSchemaError(f"missing field {key!r} in {where}")
    return d[key]


def network_from_dict(data: Mapping[str, Any]) -> NetworkModel:
    for section in ("buses", "lines", "loads", "inverters", "source", "bases"):
        _require(data, section, "network file")
    try:
        buses = tuple(
            Bus(
                id=str(_require(b, "id", "bus")),
                phases=tuple(b.get("phases", list(CONDUCTORS))),
                v_min=float(b.get("v_min", 0.90)),
                v_max=float(b.get("v_max", 1.10)),
            )
            for b in data["buses"]
        )
        lines = tuple(
            Line(
                id=str(_require(l, "id", "line")),
                from_bus=str(_require(l, "from", "line")),
                to_bus=str(_require(l, "to", "line")),
                z_ohm=_matrix_from_json(_require(l, "z_ohm", "line")),
                ampacity=float(_require(l, "ampacity", "line")),
            )
            for l in data["lines"]
        )
        loads = tuple(
            Load(
                bus=str(_require(ld, "bus", "load")),
                phase=str(_require(ld, "phase", "load")),
                zip=ZIPLoad(
                    pd0=float(_require(ld, "pd0", "load")),
                    qd0=float(ld.get("qd0", 0.0)),
                    z_p=float(ld.get("z_p", 0.0)), i_p=float(ld.get("i_p", 0.0)), p_p=float(ld.get("p_p", 1.0)),
                    z_q=float(ld.get("z_q", 0.0)), i_q=float(ld.get("i_q", 0.0)), p_q=float(ld.get("p_q", 1.0)),
                    v0=float(ld.get("v0", 1.0)),
                ).normalized(),
                customers=int(ld.get("customers", 1)),
            )
            for ld in data["loads"]
        )
        inverters = tuple(
            Inverter(
                id=str(_require(iv, "id", "inverter")),
                bus=str(_require(iv, "bus", "inverter")),
                phase=str(_require(iv, "phase", "inverter")),
                capability=CapabilitySpec(
                    s_kva=float(_require(iv, "s_kva", "inverter")),
                    alpha_max=float(iv.get("alpha_max", math.acos(0.82))),
                    q_max_kvar=(None if iv.get("q_max_kvar") is None else float(iv["q_max_kvar"])),
                    q_fix_fraction=float(iv.get("q_fix_fraction", 0.30)),
                    mode=_mode_from_json(iv.get("mode", {"kind": "capacity_only"})),
                ),
            )
            for iv in data["inverters"]
        )
        src = data["source"]
        source = SlackSource(
            bus=str(_require(src, "bus", "source")),
            v_pu=float(src.get("v_pu", 1.0)),
            angle_deg=float(src.get("angle_deg", 0.0)),
            z_series_ohm=_matrix_from_json(src.get("z_series_ohm", [[[0.0, 0.0]] * 4] * 4)),
        )
        bases = Bases(
            v_base=float(data["bases"].get("v_base", 230.0)),
            s_base_kva=float(data["bases"].get("s_base_kva", 400.0)),
        )
    except (TypeError, KeyError, IndexError) as exc:
        raise NetworkSchemaError(f"malformed network entry: {exc}") from exc

    m = NetworkModel(buses=buses, lines=lines, loads=loads, inverters=inverters, source=source, bases=bases)
    _raise_on_dangling(m)
    return m


def _mode_from_json(d: Mapping[str, Any]) -> CapabilityMode:
    return CapabilityMode(
        kind=str(d.get("kind", "capacity_only")),
        pf_min=(None if d.get("pf_min") is None else float(d["pf_min"])),
        pf=(None if d.get("pf") is None else float(d["pf"])),
        sign=(None if d.get("sign") is None else int(d["sign"])),
    )


def _raise_on_dangling(m: NetworkModel) -> None:
    bus_set = {b.id for b in m.buses}
    for l in m.lines:
        for end in (l.from_bus, l.to_bus):
            if end not in bus_set:
                raise NetworkReferenceError(f"line {l.id!r} references unknown bus {end!r}")
    for ld in m.loads:
        if ld.bus not in bus_set:
            raise NetworkReferenceError(f"load {ld.id!r} references unknown bus {ld.bus!r}")
    for iv in m.inverters:
        if iv.bus not in bus_set:
            raise NetworkReferenceError(f"inverter {iv.id!r} references unknown bus {iv.bus!r}")
    if m.source.bus not in bus_set:
        raise NetworkReferenceError(f"source references unknown bus {m.source.bus!r}")


def network_to_dict(m: NetworkModel) -> dict[str, Any]:
    """Serialize to the documented schema; inverse of :func:`network_from_dict`."""
    return {
        "buses": [
            {"id": b.id, "phases": list(b.phases), "v_min": b.v_min, "v_max": b.v_max}
            for b in m.buses
        ],
        "lines": [
            {"id": l.id, "from": l.from_bus, "to": l.to_bus,
             "z_ohm": _matrix_to_json(l.z_ohm), "ampacity": l.ampacity}
            for l in m.lines
        ],
        "loads": [
            {"bus": ld.bus, "phase": ld.phase, "pd0": ld.zip.pd0, "qd0": ld.zip.qd0,
             "z_p": ld.zip.z_p, "i_p": ld.zip.i_p, "p_p": ld.zip.p_p,
             "z_q": ld.zip.z_q, "i_q": ld.zip.i_q, "p_q": ld.zip.p_q,
             "v0": ld.zip.v0, "customers": ld.customers}
            for ld in m.loads
        ],
        "inverters": [
            {"id": iv.id, "bus": iv.bus, "phase": iv.phase,
             "s_kva": iv.capability.s_kva, "alpha_max": iv.capability.alpha_max,
             "q_max_kvar": iv.capability.q_max_kvar,
             "q_fix_fraction": iv.capability.q_fix_fraction,
             "mode": _mode_to_json(iv.capability.mode)}
            for iv in m.inverters
        ],
        "source": {"bus": m.source.bus, "v_pu": m.source.v_pu, "angle_deg": m.source.angle_deg,
                   "z_series_ohm": _matrix_to_json(m.source.z_series_ohm)},
        "bases": {"v_base": m.bases.v_base, "s_base_kva": m.bases.s_base_kva},
    }


def _mode_to_json(mode: CapabilityMode) -> dict[str, Any]:
    out: dict[str, Any] = {"kind": mode.kind}
    if mode.pf_min is not None:
        out["pf_min"] = mode.pf_min
    if mode.pf is not None:
        out["pf"] = mode.pf
    if mode.sign is not None:
        out["sign"] = mode.sign
    return out


def load_network(path: str | Path) -> NetworkModel:
    """Read, validate and return a feeder model from a JSON file."""
    raw = Path(path).read_text()
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise NetworkParseError(f"{path}: {exc}") from exc
    m = network_from_dict(data)
    report = validate_network(m)
    if not report.ok:
        raise NetworkSchemaError(f"{path} failed validation:\n{report}")
    return m


def save_network(m: NetworkModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(m), indent=1, sort_keys=True))


def network_checksum(m: NetworkModel) -> str:
    """Stable sha256 of the serialized model, used to tie artifacts to a feeder."""
    blob = json.dumps(network_to_dict(m), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# capability envelope
# ---------------------------------------------------------------------------


def feasible_q_interval(caps: CapabilitySpec, p_kw: float) -> tuple[float, float]:
    """Feasible total reactive power [kVAr] for an inverter running |p_kw|
    of signed active power, under its capability mode.  fixed_pf collapses
    the interval to a point."""
    p = abs(p_kw)
    if p > caps.s_kva + 1e-12:
        raise ValueError(f"active power {p_kw} exceeds rating {caps.s_kva}")
    circle = math.sqrt(max(caps.s_kva**2 - p**2, 0.0))
    mode = caps.mode
    if mode.kind == "capacity_only":
        q = min(circle, caps.q_max_kvar)
        return (-q, q)
    if mode.kind == "accurate":
        envelope = max(caps.q_fix_fraction * caps.s_kva, math.tan(caps.alpha_max) * p)
        q = min(envelope, circle, caps.q_max_kvar)
        return (-q, q)
    if mode.kind == "lagging_only":
        q = min(math.tan(math.acos(mode.pf_min)) * p, circle)
        return (-q, 0.0)
    # fixed_pf
    q = mode.sign * min(math.tan(math.acos(mode.pf)) * p, circle)
    return (q, q)


def with_mode(caps: CapabilitySpec, mode: CapabilityMode) -> CapabilitySpec:
    return replace(caps, mode=mode)
