"""Batch pipeline driver: reduce, extract, simulate, compare, identify.

All commands take a JSON config; artifacts embed the tool version and the
config hash so runs stay traceable.  Exit codes: 0 success, 1 numerical
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import __version__
from .feeder import load_bundled_feeder, synthetic_week
from .netmodel import (
    CapabilityMode,
    ContingencyId,
    NetworkModel,
    NetworkParseError,
    NetworkReferenceError,
    NetworkSchemaError,
    load_network,
    network_checksum,
)
from .opf import Objective, StageError
from .powerflow import PowerFlowDivergence
from .resilience import (
    BankError,
    build_vvc_bank,
    bank_to_dict,
    classify_configuration,
    load_bank,
)
from .scenarios import (
    TimeSeries,
    TimeSeriesError,
    build_scenarios,
    load_scenario_set,
    reduce_scenarios,
    save_scenario_set,
    scenario_set_to_dict,
    timeseries_from_csv,
)
from .simulate import (
    AvailabilitySchedule,
    FixedPF,
    NoControl,
    ResilientVVC,
    ScheduleError,
    SimulationError,
    StaticVVC,
    compare_reports,
    report_to_csv,
    run_timeseries,
)
from .vvc import FitOptions, extract_vvc_set, load_vvc_set

USAGE_ERROR = 2
NUMERICAL_ERROR = 1

_CONFIG_ERRORS = (
    NetworkParseError, NetworkSchemaError, NetworkReferenceError,
    TimeSeriesError, ScheduleError, FileNotFoundError, KeyError, ValueError,
    json.JSONDecodeError,
)
_NUMERIC_ERRORS = (PowerFlowDivergence, StageError, BankError, SimulationError)


class ConfigError(ValueError):
    pass


def _load_config(path: str) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _config_hash(cfg: Mapping[str, Any]) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _meta(cfg: Mapping[str, Any]) -> dict:
    return {"tool_version": __version__, "config_sha256": _config_hash(cfg)}


def _network(cfg: Mapping[str, Any]) -> NetworkModel:
    spec = cfg.get("network", "bundled")
    if spec == "bundled":
        return load_bundled_feeder()
    return load_network(spec)


def _timeseries(cfg: Mapping[str, Any], m: NetworkModel) -> TimeSeries:
    spec = cfg.get("timeseries")
    if spec is None:
        raise ConfigError("config misses 'timeseries'")
    if "csv" in spec:
        return timeseries_from_csv(Path(spec["csv"]).read_text(),
                                   step_minutes=float(spec.get("step_minutes", 1.0)))
    if "synthetic_week" in spec:
        opts = spec["synthetic_week"]
        return synthetic_week(m, seed=int(opts.get("seed", 42)), days=int(opts.get("days", 7)))
    raise ConfigError("timeseries must specify 'csv' or 'synthetic_week'")


def _caps_mode(spec: Mapping[str, Any] | None) -> CapabilityMode:
    if not spec:
        return CapabilityMode()
    return CapabilityMode(
        kind=spec.get("kind", "capacity_only"),
        pf_min=spec.get("pf_min"),
        pf=spec.get("pf"),
        sign=spec.get("sign"),
    )


def _caps_map(m: NetworkModel, mode: CapabilityMode):
    from .netmodel import with_mode
    return {i: with_mode(m.inverter(i).capability, mode) for i in m.inverter_ids}


def _out_dir(cfg: Mapping[str, Any], override: str | None) -> Path:
    out = Path(override or cfg.get("output_dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_reduce(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    m = _network(cfg)
    ts = _timeseries(cfg, m)
    window = cfg.get("scenario_window_steps")
    if window:
        ts = TimeSeries(steps=ts.steps[: int(window)], step_minutes=ts.step_minutes)
    ss = build_scenarios(ts)
    target = int(cfg.get("scenario_target", 35))
    reduced = reduce_scenarios(ss, target)
    out = _out_dir(cfg, args.output_dir) / (args.output or "scenarios.json")
    payload = scenario_set_to_dict(reduced)
    payload["meta"] = _meta(cfg)
    out.write_text(json.dumps(payload, indent=1, sort_keys=True))
    total = sum(p.weight for p in reduced.points)
    print(f"reduced {len(ss)} -> {len(reduced)} scenarios (weight sum {total:.12f}) -> {out}")
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    m = _network(cfg)
    ss = load_scenario_set(args.scenarios)
    obj = Objective(cfg.get("objective", "unbalance"))
    caps = _caps_map(m, _caps_mode(cfg.get("extraction_caps_mode")))
    fit_opts = FitOptions()
    out_dir = _out_dir(cfg, args.output_dir)
    if args.resilient:
        n_jobs = int(os.environ.get("VVL_THREADS", "1"))
        bank = build_vvc_bank(m, ss, obj, caps=caps, fit_opts=fit_opts, n_jobs=n_jobs)
        payload = bank_to_dict(bank)
        payload["meta"] = _meta(cfg)
        out = out_dir / (args.output or f"bank_{obj.kind}.json")
        out.write_text(json.dumps(payload, indent=1, sort_keys=True))
        print(f"bank with {len(bank.rows)} rows -> {out}")
        if bank.metadata.get("ambiguity_warning"):
            print(f"warning: fingerprint margin {bank.metadata['min_row_distance']:.4f} "
                  f"is below twice the classifier tolerance")
        return 0
    vs = extract_vvc_set(m, ss, obj, caps=caps, fit_opts=fit_opts)
    payload = vs.to_dict()
    payload["meta"] = _meta(cfg)
    payload["quality"] = [q.to_dict() for q in vs.quality(fit_opts)]
    out = out_dir / (args.output or f"vvc_{obj.kind}.json")
    out.write_text(json.dumps(payload, indent=1, sort_keys=True))
    n_neg = sum(1 for c in vs.curves.values() if c.slope < 0)
    print(f"{len(vs.curves)} curves ({n_neg} negative slopes) -> {out}")
    if args.plots:
        for inv_id, curve in sorted(vs.curves.items()):
            svg = _vvc_scatter_svg(vs.fit_points[inv_id], curve)
            (out_dir / f"vvc_{obj.kind}_{inv_id}.svg").write_text(svg)
        print(f"scatter plots -> {out_dir}")
    return 0


def _policy_from_spec(spec: Mapping[str, Any], cfg: Mapping[str, Any]):
    kind = spec.get("type")
    if kind == "no_control":
        return NoControl()
    if kind == "fixed_pf":
        sign = {"lead": 1, "lag": -1}.get(spec.get("sign"), spec.get("sign"))
        return FixedPF(pf=float(spec["pf"]), sign=int(sign))
    if kind == "static_vvc":
        vs = load_vvc_set(spec["curves"])
        return StaticVVC(curves=vs.curves, caps_mode=_caps_mode(spec.get("caps_mode")),
                         label=spec.get("label", f"static_vvc_{vs.objective.kind}"))
    if kind == "resilient_vvc":
        bank = load_bank(spec["bank"])
        tol = float(spec.get("classifier_tol", cfg.get("tolerances", {}).get("classifier_tol", 0.05)))
        return ResilientVVC(bank=bank, caps_mode=_caps_mode(spec.get("caps_mode")),
                            classifier_tol=tol,
                            label=spec.get("label", f"resilient_vvc_{bank.objective.kind}"))
    raise ConfigError(f"unknown policy type {kind!r}")


def _schedule_from_cfg(cfg: Mapping[str, Any], m: NetworkModel, n_steps: int,
                       step_minutes: float) -> AvailabilitySchedule:
    spec = cfg.get("schedule", {"type": "intact"})
    kind = spec.get("type", "intact")
    if kind == "intact":
        return AvailabilitySchedule.always(ContingencyId.intact(), n_steps)
    if kind == "rotating_daily":
        steps_per_day = int(round(1440 / step_minutes))
        days = int(spec.get("days", max(1, n_steps // steps_per_day)))
        return AvailabilitySchedule.rotating_daily(
            m, days=days, steps_per_day=steps_per_day,
            always_available=spec.get("always_available", ()))
    if kind == "explicit":
        entries = tuple(
            (int(e["start"]), int(e["end"]), ContingencyId.from_key(e["contingency"]))
            for e in spec["entries"]
        )
        return AvailabilitySchedule(entries=entries)
    raise ConfigError(f"unknown schedule type {kind!r}")


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    m = _network(cfg)
    ts = _timeseries(cfg, m)
    sched = _schedule_from_cfg(cfg, m, len(ts), ts.step_minutes)
    policies = [_policy_from_spec(p, cfg) for p in cfg.get("policies", [])]
    if not policies:
        raise ConfigError("config lists no policies")
    out_dir = _out_dir(cfg, args.output_dir)
    reports = []
    for pol in policies:
        rep = run_timeseries(m, ts, pol, sched, skip_divergent=args.skip_divergent)
        base = pol.describe().replace("/", "_")
        (out_dir / f"sim_{base}.csv").write_text(report_to_csv(rep))
        summary = rep.summary_dict()
        summary["meta"] = _meta(cfg)
        (out_dir / f"sim_{base}.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
        reports.append(rep)
        print(f"{rep.policy:<34} loss {rep.energy_loss_kwh:9.2f} kWh   "
              f"avg unbalance {rep.avg_vuf_pct:.4f} %   violations {rep.violation_count}")
        if args.plots:
            (out_dir / f"sim_{base}.svg").write_text(_trace_svg(rep))
    table = {
        "meta": _meta(cfg),
        "rows": [r.summary_dict() for r in reports],
        "deltas_vs_first": [
            compare_reports(reports[0], r).to_dict() for r in reports[1:]
        ],
    }
    (out_dir / "comparison.json").write_text(json.dumps(table, indent=1, sort_keys=True))
    print(f"comparison table -> {out_dir / 'comparison.json'}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    a = json.loads(Path(args.report_a).read_text())
    b = json.loads(Path(args.report_b).read_text())
    for rep in (a, b):
        for key in ("energy_loss_kwh", "avg_vuf_pct", "n_steps", "feeder_checksum"):
            if key not in rep:
                raise ConfigError(f"report misses {key!r}; pass simulate summary JSONs")
    if a["n_steps"] != b["n_steps"] or a.get("step_minutes") != b.get("step_minutes"):
        raise ConfigError("reports cover different horizons")
    if a["feeder_checksum"] != b["feeder_checksum"]:
        raise ConfigError("reports come from different feeders")
    delta = {
        "loss_delta_kwh": b["energy_loss_kwh"] - a["energy_loss_kwh"],
        "loss_delta_pct": 100.0 * (b["energy_loss_kwh"] - a["energy_loss_kwh"]) / a["energy_loss_kwh"],
        "vuf_delta_pct_points": b["avg_vuf_pct"] - a["avg_vuf_pct"],
        "vuf_delta_pct": 100.0 * (b["avg_vuf_pct"] - a["avg_vuf_pct"]) / a["avg_vuf_pct"],
    }
    delta["loss_improvement_pct"] = -delta["loss_delta_pct"]
    delta["vuf_improvement_pct"] = -delta["vuf_delta_pct"]
    print(json.dumps(delta, indent=1, sort_keys=True))
    return 0


def cmd_identify(args: argparse.Namespace) -> int:
    bank = load_bank(args.bank)
    raw = json.loads(Path(args.measured).read_text())
    z_meas = {k: complex(v[0], v[1]) for k, v in raw.items()}
    cid = classify_configuration(z_meas, bank, tol=args.tol)
    print("unknown" if cid is None else cid.key)
    return 0


# ---------------------------------------------------------------------------
# minimal SVG output (informational only)
# ---------------------------------------------------------------------------


def _vvc_scatter_svg(points, curve, width=460, height=320) -> str:
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    pad_x = (x1 - x0) or 1e-3
    pad_y = (y1 - y0) or 1e-3
    x0, x1 = x0 - 0.1 * pad_x, x1 + 0.1 * pad_x
    y0, y1 = y0 - 0.1 * pad_y, y1 + 0.1 * pad_y

    def sx(x):
        return 40 + (x - x0) / (x1 - x0) * (width - 60)

    def sy(y):
        return height - 30 - (y - y0) / (y1 - y0) * (height - 50)

    dots = "".join(
        f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="#1f77b4"/>' for x, y in points
    )
    ya, yb = curve.slope * (x0 - curve.intercept), curve.slope * (x1 - curve.intercept)
    line = (f'<line x1="{sx(x0):.1f}" y1="{sy(ya):.1f}" x2="{sx(x1):.1f}" y2="{sy(yb):.1f}" '
            f'stroke="#d62728" stroke-width="1.5"/>') if curve.intercept_defined else ""
    title = (f"{curve.inverter}: dQ = {curve.slope:.1f} (V - {curve.intercept:.4f}), "
             f"R2 = {curve.r_squared:.3f}")
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<rect width="100%" height="100%" fill="white"/>'
        f'<text x="10" y="16" font-size="12" font-family="monospace">{title}</text>'
        f"{dots}{line}</svg>"
    )


def _trace_svg(rep, width=900, height=260) -> str:
    n = rep.n_steps
    vals = rep.vuf_pct
    vmax = float(np.nanmax(vals)) or 1.0
    pts = " ".join(
        f"{20 + t / max(n - 1, 1) * (width - 40):.1f},"
        f"{height - 20 - (0 if np.isnan(vals[t]) else vals[t]) / vmax * (height - 50):.1f}"
        for t in range(0, n, max(1, n // 2000))
    )
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<rect width="100%" height="100%" fill="white"/>'
        f'<text x="10" y="16" font-size="12" font-family="monospace">'
        f"{rep.policy}: unbalance trace (max {vmax:.3f} %)</text>"
        f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="1"/></svg>'
    )


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vvl", description=__doc__)
    ap.add_argument("--version", action="version", version=f"vvl {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reduce", help="build and reduce a scenario set from a time series")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-o", "--output", help="artifact filename inside the output dir")
    p.add_argument("--output-dir")
    p.set_defaults(fn=cmd_reduce)

    p = sub.add_parser("extract", help="extract volt-var curves (or a contingency bank)")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--scenarios", required=True, help="reduced scenario artifact")
    p.add_argument("--resilient", action="store_true", help="build the full contingency bank")
    p.add_argument("--plots", action="store_true", help="emit SVG scatter per inverter")
    p.add_argument("-o", "--output")
    p.add_argument("--output-dir")
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("simulate", help="run the policy matrix over the time series")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--skip-divergent", action="store_true")
    p.add_argument("--plots", action="store_true")
    p.add_argument("--output-dir")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("compare", help="delta between two simulation summaries")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("identify", help="classify measured impedances against a bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--measured", required=True, help="JSON map inverter -> [re, im] ohms")
    p.add_argument("--tol", type=float, default=0.05)
    p.set_defaults(fn=cmd_identify)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR
    except _CONFIG_ERRORS as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
