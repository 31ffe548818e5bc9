#!/usr/bin/env python3
"""Regenerate the bundled feeder fixture and print its checksum."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from voltvar.feeder import FEEDER_FILE, build_feeder
from voltvar.netmodel import network_checksum, save_network, validate_network


def main() -> int:
    m = build_feeder()
    report = validate_network(m)
    if not report.ok:
        print(report)
        return 1
    FEEDER_FILE.parent.mkdir(parents=True, exist_ok=True)
    save_network(m, FEEDER_FILE)
    print(f"wrote {FEEDER_FILE}")
    print(f"buses={len(m.buses)} lines={len(m.lines)} loads={len(m.loads)} inverters={len(m.inverters)}")
    print(f"checksum={network_checksum(m)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
