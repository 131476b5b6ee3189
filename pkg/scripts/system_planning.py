#!/usr/bin/env python3
"""Planning study on synthetic mixture-model traffic: station count, capacity and cost.

For each (stations, transformer kW) pair a week of sampled arrivals is run
on a stochastic three-phase site where queued drivers swap into freed EVSEs.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

from evsim.metrics import compute_metrics, run_scenario
from evsim.scenario_io import auto_network, load_scenario

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "scenario_planning.json"


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default=str(DEFAULT_CONFIG))
    p.add_argument("--seed", type=int)
    p.add_argument("--stations", default="8,12,16", help="comma-separated EVSE counts")
    p.add_argument("--capacity-list", default="30,50", help="comma-separated kW")
    p.add_argument("--algorithm", default=None)
    p.add_argument("--no-early-departure", action="store_true")
    args = p.parse_args(argv)

    scen = load_scenario(args.config, args.seed)
    print(f"{'EVSEs':>5} {'kW':>6} {'met %':>7} {'swaps':>6} {'peak kW':>8} {'$ total':>9} {'$/kWh':>7}")
    for n in (int(x) for x in args.stations.split(",")):
        for cap in (float(x) for x in args.capacity_list.split(",")):
            auto = {**scen.auto, "n_stations": n, "stations": None,
                    "early_departure": not args.no_early_departure}
            net = auto_network(auto, cap)
            rep = compute_metrics(run_scenario(dataclasses.replace(scen, network=net), args.algorithm),
                                  scen.tariff)
            met = f"{100 * rep.demand_met:7.1f}" if rep.demand_met is not None else f"{'-':>7}"
            per = f"{rep.cost_per_kwh:7.3f}" if rep.cost_per_kwh is not None else f"{'-':>7}"
            print(f"{n:5d} {cap:6g} {met} {rep.swaps:6d} {rep.peak_kw:8.1f} {rep.total_cost:9.2f} {per}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
