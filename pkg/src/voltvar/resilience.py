"""Contingency-indexed curve banks keyed by impedance fingerprints.

For the intact system and every single-inverter outage, the full extraction
pipeline runs on the modified network and the resulting curves are stored in
a bank row together with the driving-point impedance seen from each surviving
charge point.  Online, a station compares measured impedances against the
rows to decide which configuration the network is in and which curve set
applies.  A shift-register excitation estimator demonstrates, on a synthetic
R-L source, how those impedances can be measured without extra hardware.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .netmodel import CapabilitySpec, ContingencyId, NetworkModel, apply_contingency
from .opf import Objective, OptimalVoltages
from .powerflow import ScenarioPoint, thevenin_impedance
from .scenarios import ScenarioSet, scenario_set_checksum
from .vvc import VVC, FitOptions, VVCSet, extract_vvc_set

DEFAULT_CLASSIFIER_TOL = 0.05


class BankError(RuntimeError):
    """A bank row could not be built; carries the failing contingency."""

    def __init__(self, contingency: ContingencyId, cause: Exception):
        super().__init__(f"row {contingency.key}: {cause}")
        self.contingency = contingency
        self.cause = cause


@dataclass(frozen=True)
class BankRow:
    contingency: ContingencyId
    vvc_set: VVCSet
    fingerprints: Mapping[str, complex]      # surviving inverter -> ohms

    @property
    def curves(self) -> Mapping[str, VVC]:
        return self.vvc_set.curves


@dataclass(frozen=True)
class VVCBank:
    """One row per configuration: the intact system plus each single outage."""

    rows: Mapping[str, BankRow]              # keyed by ContingencyId.key
    objective: Objective
    metadata: dict = field(default_factory=dict)

    def row(self, cid: ContingencyId) -> BankRow:
        try:
            return self.rows[cid.key]
        except KeyError:
            raise KeyError(f"bank has no row for {cid.key}") from None

    @property
    def contingencies(self) -> list[ContingencyId]:
        return [ContingencyId.from_key(k) for k in self.rows]

    def min_row_distance(self) -> float:
        """Smallest pairwise fingerprint distance over common charge points;
        the classifier's numeric margin."""
        keys = list(self.rows)
        best = math.inf
        for i, a in enumerate(keys):
            for b in keys[i + 1:]:
                d = _fingerprint_distance(self.rows[a].fingerprints, self.rows[b].fingerprints)
                if d < best:
                    best = d
        return best


def _fingerprint_distance(meas: Mapping[str, complex], ref: Mapping[str, complex]) -> float:
    """Worst-case relative complex deviation over charge points present in
    both maps; infinity when they share none."""
    common = set(meas) & set(ref)
    if not common:
        return math.inf
    return max(abs(meas[k] - ref[k]) / abs(ref[k]) for k in sorted(common))


def _build_bank_row(
    m: NetworkModel,
    ss: ScenarioSet,
    obj: Objective,
    caps: Mapping[str, CapabilitySpec] | None,
    fit_opts: FitOptions,
    cid: ContingencyId,
    op_point: ScenarioPoint,
) -> BankRow:
    mc = apply_contingency(m, cid)
    vs = extract_vvc_set(mc, ss, obj, caps=caps, fit_opts=fit_opts, contingency=cid)
    fps = {
        inv.id: thevenin_impedance(mc, inv.bus, inv.phase, scenario=op_point)
        for inv in mc.inverters
    }
    return BankRow(contingency=cid, vvc_set=vs, fingerprints=fps)


def build_vvc_bank(
    m: NetworkModel,
    ss: ScenarioSet,
    obj: Objective,
    caps: Mapping[str, CapabilitySpec] | None = None,
    fit_opts: FitOptions = FitOptions(),
    classifier_tol: float = DEFAULT_CLASSIFIER_TOL,
    fingerprint_point: ScenarioPoint | None = None,
    n_jobs: int = 1,
) -> VVCBank:
    """Run the extraction pipeline for the intact system and every
    single-inverter outage; fingerprint each row at the scenario-set centroid
    (or an explicit operating point).  Rows are independent, so ``n_jobs``
    may spread them over processes; results are identical either way."""
    if not m.inverters:
        raise ValueError("bank needs at least one inverter")
    op_point = fingerprint_point if fingerprint_point is not None else ss.centroid()
    cids = [ContingencyId.intact()] + [ContingencyId.inverter_out(i) for i in m.inverter_ids]
    rows: dict[str, BankRow] = {}
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            futures = {
                cid.key: pool.submit(_build_bank_row, m, ss, obj, caps, fit_opts, cid, op_point)
                for cid in cids
            }
            for cid in cids:
                try:
                    rows[cid.key] = futures[cid.key].result()
                except Exception as exc:
                    raise BankError(cid, exc) from exc
    else:
        for cid in cids:
            try:
                rows[cid.key] = _build_bank_row(m, ss, obj, caps, fit_opts, cid, op_point)
            except Exception as exc:      # tag the failing row for the caller
                raise BankError(cid, exc) from exc
    bank = VVCBank(
        rows=rows,
        objective=obj,
        metadata={
            "scenario_checksum": scenario_set_checksum(ss),
            "classifier_tol": classifier_tol,
            "caps_mode": sorted({
                (caps[i].mode.kind if caps and i in caps else m.inverter(i).capability.mode.kind)
                for i in m.inverter_ids
            }),
        },
    )
    margin = bank.min_row_distance()
    bank.metadata["min_row_distance"] = margin
    bank.metadata["ambiguity_warning"] = bool(margin < 2.0 * classifier_tol)
    return bank


# ---------------------------------------------------------------------------
# classification and selection
# ---------------------------------------------------------------------------


def classify_configuration(
    z_meas: Mapping[str, complex],
    bank: VVCBank,
    tol: float = DEFAULT_CLASSIFIER_TOL,
) -> ContingencyId | None:
    """Match measured charge-point impedances to a bank row.

    A row must carry a fingerprint for every measured charge point: a station
    that reports a measurement is alive, which rules out any row declaring it
    failed.  Among compatible rows the one with the smallest worst-case
    relative deviation wins; None (unknown) is returned instead of a guess
    when even the best row deviates more than ``tol``.
    """
    if not z_meas:
        raise ValueError("empty measurement map")
    best_key: str | None = None
    best_d = math.inf
    for key, row in bank.rows.items():
        if not set(z_meas) <= set(row.fingerprints):
            continue
        d = _fingerprint_distance(z_meas, row.fingerprints)
        if d < best_d:
            best_key, best_d = key, d
    if best_key is None or best_d > tol:
        return None
    return ContingencyId.from_key(best_key)


def select_vvc(bank: VVCBank, cid: ContingencyId, inverter: str) -> VVC:
    row = bank.row(cid)
    try:
        return row.curves[inverter]
    except KeyError:
        raise KeyError(
            f"inverter {inverter!r} has no curve in row {cid.key} (it is the failed unit)"
        ) from None


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _fmt12(x: float) -> float:
    return float(f"{x:.12g}")


def bank_to_dict(bank: VVCBank) -> dict:
    return {
        "objective": bank.objective.kind,
        "metadata": bank.metadata,
        "rows": [
            {
                "contingency": key,
                "vvc_set": row.vvc_set.to_dict(),
                "fingerprints": {
                    inv: [_fmt12(z.real), _fmt12(z.imag)]
                    for inv, z in sorted(row.fingerprints.items())
                },
            }
            for key, row in bank.rows.items()
        ],
    }


def bank_from_dict(d: Mapping) -> VVCBank:
    rows: dict[str, BankRow] = {}
    for r in d["rows"]:
        cid = ContingencyId.from_key(r["contingency"])
        rows[cid.key] = BankRow(
            contingency=cid,
            vvc_set=VVCSet.from_dict(r["vvc_set"]),
            fingerprints={i: complex(p[0], p[1]) for i, p in r["fingerprints"].items()},
        )
    return VVCBank(rows=rows, objective=Objective(d["objective"]), metadata=dict(d.get("metadata", {})))


def save_bank(bank: VVCBank, path: str | Path) -> None:
    Path(path).write_text(json.dumps(bank_to_dict(bank), indent=1, sort_keys=True))


def load_bank(path: str | Path) -> VVCBank:
    return bank_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# shift-register impedance estimation on a synthetic source
# ---------------------------------------------------------------------------

# maximal-length LFSR feedback taps (1-indexed stages)
_MLS_TAPS = {
    7: (7, 6),
    8: (8, 6, 5, 4),
    9: (9, 5),
    10: (10, 7),
    11: (11, 9),
    12: (12, 11, 10, 4),
    13: (13, 12, 11, 8),
    14: (14, 13, 12, 2),
    15: (15, 14),
    16: (16, 15, 13, 4),
}


@dataclass(frozen=True)
class TheveninCircuit:
    """Series R-L source used as the identification target."""

    r_ohm: float
    l_henry: float
    v_mag: float = 230.0
    f_hz: float = 50.0

    def __post_init__(self) -> None:
        if self.r_ohm < 0 or self.l_henry < 0:
            raise ValueError("R and L must be nonnegative")

    def impedance(self, f_hz: float | None = None) -> complex:
        f = self.f_hz if f_hz is None else f_hz
        return complex(self.r_ohm, 2 * math.pi * f * self.l_henry)


@dataclass(frozen=True)
class PRBSConfig:
    """Shift-register excitation settings.

    The chip rate is tied to the source frequency: one sequence period spans
    exactly ``cycles_per_period`` fundamental cycles, so the source tone sits
    on a single spectral line and leaks into none of the excited bins.
    """

    order: int = 10
    amp: float = 1.0                  # amperes
    cycles_per_period: int = 20
    periods: int = 4
    record_samples: int | None = None  # defaults to a full periods*length record
    noise_rms_fraction: float = 0.0
    seed: int = 7

    @property
    def length(self) -> int:
        return 2**self.order - 1

    def sample_rate(self, f_hz: float) -> float:
        return self.length * f_hz / self.cycles_per_period


def prbs_sequence(order: int, seed: int = 1) -> np.ndarray:
    """One period of a maximal-length +-1 sequence from an LFSR."""
    if order not in _MLS_TAPS:
        raise ValueError(f"unsupported register order {order}; choose from {sorted(_MLS_TAPS)}")
    taps = _MLS_TAPS[order]
    state = [(seed >> i) & 1 for i in range(order)]
    if not any(state):
        state[0] = 1
    out = np.empty(2**order - 1)
    for k in range(len(out)):
        bit = state[-1]
        out[k] = 1.0 if bit else -1.0
        fb = 0
        for t in taps:
            fb ^= state[t - 1]
        state = [fb] + state[:-1]
    return out


def estimate_impedance_prbs(circuit: TheveninCircuit, cfg: PRBSConfig) -> complex:
    """Estimate the source impedance at the fundamental.

    A shift-register current perturbation is injected at the terminals, the
    periodic steady-state voltage response is sampled, and the impedance is
    the per-period averaged cross-spectrum ratio over the excited band with
    a least-squares R + jwL fit evaluated at the fundamental.
    """
    if cfg.order < 7:
        raise ValueError("register order must be at least 7")
    fs = cfg.sample_rate(circuit.f_hz)
    if fs < 10 * circuit.f_hz:
        raise ValueError("sample rate must be at least ten times the fundamental")
    n = cfg.length
    total = cfg.periods * n
    record = total if cfg.record_samples is None else int(cfg.record_samples)
    if record < n:
        raise ValueError(f"record of {record} samples is shorter than one sequence period ({n})")
    periods = record // n
    chips = prbs_sequence(cfg.order)
    i_one = cfg.amp * chips

    # exact periodic response of the linear circuit, bin by bin; signed
    # frequencies keep the transfer conjugate-symmetric (real response)
    freqs = np.fft.fftfreq(n, d=1.0 / fs)
    z_bins = circuit.r_ohm + 2j * math.pi * freqs * circuit.l_henry
    i_spec = np.fft.fft(i_one)
    v_spec = i_spec * z_bins
    src_bin = cfg.cycles_per_period            # source tone sits exactly here
    t = np.arange(n) / fs
    v_src = circuit.v_mag * np.cos(2 * math.pi * circuit.f_hz * t)
    v_one = np.fft.ifft(v_spec).real + v_src

    i_sig = np.tile(i_one, periods)
    v_sig = np.tile(v_one, periods)
    if cfg.noise_rms_fraction > 0:
        rng = np.random.default_rng(cfg.seed)
        v_sig = v_sig + rng.normal(0.0, cfg.noise_rms_fraction * np.std(v_sig), v_sig.shape)
        i_sig = i_sig + rng.normal(0.0, cfg.noise_rms_fraction * np.std(i_sig), i_sig.shape)

    # per-period averaged cross spectra (correlation method)
    s_vi = np.zeros(n, dtype=complex)
    s_ii = np.zeros(n)
    for p in range(periods):
        seg_i = np.fft.fft(i_sig[p * n:(p + 1) * n])
        seg_v = np.fft.fft(v_sig[p * n:(p + 1) * n])
        s_vi += seg_v * np.conj(seg_i)
        s_ii += np.abs(seg_i) ** 2

    # excited band: positive-frequency bins up to a decade above the
    # fundamental, skipping DC and the source tone
    band = [
        k for k in range(1, n // 2)
        if k != src_bin and freqs[k] <= 12 * circuit.f_hz and s_ii[k] > 0
    ]
    if not band:
        raise ValueError("no excited bins outside the source tone; increase the order")
    band = np.array(band)
    z_np = s_vi[band] / s_ii[band]
    w = 2 * math.pi * freqs[band]
    weight = s_ii[band]
    r_est = float((weight * z_np.real).sum() / weight.sum())
    l_est = float((weight * w * z_np.imag).sum() / (weight * w * w).sum())
    return complex(r_est, 2 * math.pi * circuit.f_hz * l_est)
