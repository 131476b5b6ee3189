#!/usr/bin/env python3
"""Demand met versus transformer capacity for several algorithms, plus the offline bound."""

import argparse
import sys
from pathlib import Path

from evsim.metrics import capacity_sweep, sweep_csv
from evsim.scenario_io import load_scenario

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "scenario_sweep.json"


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default=str(DEFAULT_CONFIG))
    p.add_argument("--seed", type=int)
    p.add_argument("--algorithm", help="comma-separated; defaults to the config's sweep list")
    p.add_argument("--capacity-list", help="comma-separated kW; defaults to the config's sweep list")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="CSV path (default: print only)")
    args = p.parse_args(argv)

    scen = load_scenario(args.config, args.seed)
    algos = args.algorithm.split(",") if args.algorithm else scen.sweep.get("algorithms", [scen.algorithm])
    caps = ([float(c) for c in args.capacity_list.split(",")] if args.capacity_list
            else scen.sweep["capacities"])
    rows = capacity_sweep(scen, algos, caps, jobs=args.jobs)

    names = list(algos) + (["offline"] if any(r.algorithm == "offline" for r in rows) else [])
    table = {(r.algorithm, r.capacity_kw): r for r in rows}
    print("demand met (%)".ljust(14) + "".join(f"{c:>9g}kW" for c in caps))
    for a in names:
        cells = []
        for c in caps:
            r = table[(a, float(c))]
            mark = "*" if r.violations else " "
            cells.append(f"{100 * r.demand_met:10.1f}{mark}" if r.demand_met is not None else f"{'-':>10} ")
        print(a.ljust(14) + "".join(cells))
    print("* run violated a network constraint")
    if args.out:
        Path(args.out).write_text(sweep_csv(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
