#!/usr/bin/env python3
"""One-shot health report of the bundled feeder against every study property:
voltage envelope, unbalance level, fingerprint margins, curve quality per
objective, intercept ordering, and short-horizon policy directions."""

import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from voltvar.feeder import build_feeder, synthetic_week, first_day
from voltvar.netmodel import ContingencyId, apply_contingency
from voltvar.opf import Objective
from voltvar.powerflow import mean_bus_vuf, solve_power_flow, thevenin_impedance
from voltvar.scenarios import TimeSeries, build_scenarios, reduce_scenarios
from voltvar.simulate import FixedPF, NoControl, StaticVVC, run_timeseries
from voltvar.vvc import extract_vvc_set


def main() -> int:
    t_start = time.time()
    m = build_feeder()
    week = synthetic_week(m, seed=42, days=7)
    day1 = first_day(week)
    ss = build_scenarios(day1)
    cent = ss.centroid()

    sol = solve_power_flow(m, cent)
    vm = np.abs(sol.v_pu)
    worst = max(week.steps, key=lambda s: sum(l.pd0 for l in s.loads.values()) - sum(s.inv_p.values()))
    solw = solve_power_flow(m, worst)
    print(f"centroid V [{vm.min():.4f}, {vm.max():.4f}] pu   VUF {mean_bus_vuf(sol, m):.3f} %")
    print(f"worst-minute V min {np.abs(solw.v_pu).min():.4f} pu")

    rows = {}
    for cid in [ContingencyId.intact()] + [ContingencyId.inverter_out(i) for i in m.inverter_ids]:
        mc = apply_contingency(m, cid)
        rows[cid.key] = {
            inv: thevenin_impedance(mc, mc.inverter(inv).bus, mc.inverter(inv).phase, scenario=cent)
            for inv in mc.inverter_ids
        }

    def dist(fa, fb):
        return max(abs(fa[k] - fb[k]) / abs(fb[k]) for k in set(fa) & set(fb))

    io_margins = {k: dist(rows["intact"], rows[k]) for k in rows if k != "intact"}
    pairs = sorted(
        (dist(rows[a], rows[b]), a, b)
        for i, a in enumerate(rows) for b in list(rows)[i + 1:]
    )
    print(f"intact-vs-out margin min {min(io_margins.values()):.4f}   "
          f"weakest pair {pairs[0][0]:.4f} ({pairs[0][1]} vs {pairs[0][2]})")

    red = reduce_scenarios(ss, 12)
    sets = {}
    for kind in ("unbalance", "loss"):
        t0 = time.time()
        vs = extract_vvc_set(m, red, Objective(kind))
        sets[kind] = vs
        n_neg = sum(1 for c in vs.curves.values() if c.slope < 0)
        r2_ok = sum(1 for c in vs.curves.values() if c.r_squared >= 0.70)
        rels = [c.rel_error for c in vs.curves.values() if np.isfinite(c.rel_error)]
        print(f"{kind}: {time.time()-t0:.0f}s  vopt mean {np.mean(list(vs.vopt.voltages.values())):.4f}  "
              f"neg slopes {n_neg}/9  R2>=0.7 {r2_ok}/9  max rel_err {max(rels) if rels else float('nan'):.4f}")
        for i, c in sorted(vs.curves.items()):
            print(f"   {i} m={c.slope:9.2f} c={c.intercept:8.4f} r2={c.r_squared:.3f} "
                  f"rel={c.rel_error:.4f} out={c.outliers_removed}")

    mean_c_unb = np.mean([c.intercept for c in sets["unbalance"].curves.values() if c.intercept_defined])
    mean_c_loss = np.mean([c.intercept for c in sets["loss"].curves.values() if c.intercept_defined])
    print(f"mean intercept: loss {mean_c_loss:.4f} vs unbalance {mean_c_unb:.4f}  "
          f"(direction ok: {mean_c_loss <= mean_c_unb})")

    # short-horizon policy direction probe (first 6 h of day 2)
    probe = TimeSeries(steps=week.steps[1440:1440 + 360], step_minutes=1.0)
    runs = {
        "no_control": run_timeseries(m, probe, NoControl()),
        "fixed_095_lag": run_timeseries(m, probe, FixedPF(0.95, -1)),
        "fixed_unity": run_timeseries(m, probe, FixedPF(1.0, 1)),
        "fixed_095_lead": run_timeseries(m, probe, FixedPF(0.95, 1)),
        "vvc_unbalance": run_timeseries(m, probe, StaticVVC(curves=sets["unbalance"].curves)),
        "vvc_loss": run_timeseries(m, probe, StaticVVC(curves=sets["loss"].curves)),
    }
    for name, rep in runs.items():
        print(f"   {name:<16} loss {rep.energy_loss_kwh:8.3f} kWh  vuf {rep.avg_vuf_pct:.4f} %  "
              f"viol {rep.violation_count}")
    vuf_ok = all(runs["vvc_unbalance"].avg_vuf_pct < runs[k].avg_vuf_pct
                 for k in ("fixed_095_lag", "fixed_unity", "fixed_095_lead"))
    loss_ok = runs["vvc_loss"].energy_loss_kwh < runs["vvc_unbalance"].energy_loss_kwh
    ordering_vuf = runs["vvc_unbalance"].avg_vuf_pct == min(r.avg_vuf_pct for r in runs.values())
    ordering_loss = runs["vvc_loss"].energy_loss_kwh == min(r.energy_loss_kwh for r in runs.values())
    print(f"directions: vvc_unb beats fixed-PF on VUF: {vuf_ok}; vvc_loss < vvc_unb on loss: {loss_ok}")
    print(f"orderings:  unb lowest VUF overall: {ordering_vuf}; loss lowest loss overall: {ordering_loss}")
    print(f"total {time.time()-t_start:.0f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
