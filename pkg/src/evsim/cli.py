"""Command-line entry point: ``evsim run | sweep | export | validate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .engine import SimRecord
from .metrics import capacity_sweep, compute_metrics, export_load_profile, run_scenario, sweep_csv
from .mpc import InfeasibleProgram
from .network import Network, NetworkError
from .scenario_io import MixtureSpec, ScenarioError, load_scenario
from .signals import Tariff, TariffError

_log = logging.getLogger("evsim")


def _floats(text: str) -> List[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _names(text: Optional[str]) -> Optional[List[str]]:
    return None if text is None else [x.strip() for x in text.split(",") if x.strip()]


def cmd_run(args) -> int:
    scen = load_scenario(args.config, args.seed)
    names = _names(args.algorithm)
    name = names[0] if names else None
    record = run_scenario(scen, name)
    report = compute_metrics(record, scen.tariff)
    out = Path(args.out_dir)
    record.save(out)
    scen.events.to_jsonl(out / "events.jsonl")
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    scen = load_scenario(args.config, args.seed)
    caps = _floats(args.capacity_list) if args.capacity_list else scen.sweep.get("capacities")
    algos = _names(args.algorithm) or scen.sweep.get("algorithms") or [scen.algorithm]
    if not caps:
        raise ScenarioError("no capacities: pass --capacity-list or set sweep.capacities")
    rows = capacity_sweep(scen, algos, caps, offline=not args.no_offline, jobs=args.jobs)
    text = sweep_csv(rows)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_export(args) -> int:
    record = SimRecord.load(args.record)
    text = export_load_profile(record, args.phases)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _validate_file(path: Path) -> str:
    if not path.is_file():
        raise ScenarioError(f"file not found: {path}")
    doc = json.loads(path.read_text())
    if isinstance(doc, dict) and "network" in doc:
        scen = load_scenario(path)
        return f"scenario ok: {len(scen.network.evses)} EVSEs, {len(scen.events)} events"
    if isinstance(doc, dict) and "evses" in doc:
        net = Network.from_dict(doc)
        return f"network ok: {len(net.evses)} EVSEs, {len(net.constraints)} constraints"
    if isinstance(doc, dict) and "seasons" in doc:
        Tariff.from_dict(doc)
        return "tariff ok"
    if isinstance(doc, dict) and "components" in doc:
        MixtureSpec.from_dict(doc)
        return "mixture ok"
    raise ScenarioError(f"{path}: not a scenario, network, tariff or mixture document")


def cmd_validate(args) -> int:
    paths = ([args.config] if args.config else []) + list(args.paths)
    if not paths:
        raise ScenarioError("nothing to validate: pass --config or file paths")
    for p in paths:
        print(f"{p}: {_validate_file(Path(p))}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evsim", description="EV charging facility simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one scenario")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out-dir", default="out")
    r.add_argument("--algorithm", help="override the scenario's algorithm")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="demand met across transformer capacities")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", default="out")
    s.add_argument("--algorithm", help="comma-separated algorithm names")
    s.add_argument("--capacity-list", help="comma-separated capacities in kW")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--no-offline", action="store_true", help="skip the offline optimum column")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("export", help="load profile CSV from a saved record")
    e.add_argument("record", help="directory written by 'run'")
    e.add_argument("--phases", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_export)

    v = sub.add_parser("validate", help="check scenario, network, tariff or mixture files")
    v.add_argument("--config")
    v.add_argument("paths", nargs="*")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, NetworkError, TariffError, InfeasibleProgram, ValueError,
            FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"evsim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
