"""The `lab` command line: run scenarios, probe paths, audit state, compare runs.

Exit codes: 0 clean, 2 anomalies detected, 1 error.
"""
from __future__ import annotations

import argparse
import json
import sys
from ipaddress import IPv4Address
from pathlib import Path

from . import control as ctl
from . import scenarios as sc
from .simnet import EventTrace, Simulation
from .topology import SchemaError, ValidationError, fixture_path, load_topology

EXIT_CLEAN = 0
EXIT_ERROR = 1
EXIT_ANOMALY = 2

SCENARIOS = ("baseline", "redirect", "replicate", "fanout")


def _resolve_topology(arg: str):
    path = Path(arg)
    if path.exists():
        return load_topology(path)
    bundled = fixture_path(arg if arg.endswith(".topo") else f"{arg}.topo")
    if bundled.exists():
        return load_topology(bundled)
    raise ValidationError(f"no such topology file or bundled fixture: {arg}")


def _parse_proto(text: str) -> tuple[str, int | None]:
    if text == "icmp":
        return "icmp", None
    if text.startswith("tcp:"):
        return "tcp", int(text.split(":", 1)[1])
    raise ValidationError(f"bad --proto {text!r}, expected icmp or tcp:PORT")


def cmd_run(args: argparse.Namespace) -> int:
    topology = _resolve_topology(args.topology)
    sim = Simulation(topology, seed=args.seed)
    sc.stage_scenario(sim, args.scenario, return_mode=args.return_mode, stealth=args.stealth_aid)
    trace = sim.run(horizon=args.horizon)
    ndjson = trace.to_ndjson()
    if args.out == "-":
        sys.stdout.write(ndjson)
    else:
        Path(args.out).write_text(ndjson)
        print(f"{len(trace)} events -> {args.out}")
    return EXIT_CLEAN


def cmd_trace(args: argparse.Namespace) -> int:
    topology = _resolve_topology(args.topology)
    sim = Simulation(topology, seed=args.seed, include_flows=False)
    if args.scenario != "baseline":
        sc.stage_scenario(sim, args.scenario, return_mode=args.return_mode, stealth=args.stealth_aid)
    protocol, dst_port = _parse_proto(args.proto)
    path = sc.traceroute(
        sim,
        src_host=getattr(args, "from"),
        dst=IPv4Address(args.to),
        protocol=protocol,
        dst_port=dst_port,
        max_ttl=args.max_ttl,
    )
    print(json.dumps(path.to_dict(), indent=2, sort_keys=True))
    return EXIT_CLEAN


def cmd_audit(args: argparse.Namespace) -> int:
    topology = _resolve_topology(args.topology)
    sim = Simulation(topology, seed=args.seed, include_flows=False)
    if args.state != "baseline":
        sc.stage_scenario(sim, args.state, return_mode=args.return_mode)
    reports = sc.fleet_audit(sim)
    doc = [r.to_dict() for r in reports]
    print(json.dumps(doc, indent=2, sort_keys=True))
    total = sum(len(r.anomalies) for r in reports)
    print(f"# {total} anomalies across {len(reports)} nodes", file=sys.stderr)
    return EXIT_ANOMALY if total else EXIT_CLEAN


def cmd_report(args: argparse.Namespace) -> int:
    baseline = EventTrace.from_ndjson(Path(args.baseline).read_text())
    suspect = EventTrace.from_ndjson(Path(args.suspect).read_text())
    report = sc.build_report(baseline, suspect, threshold_factor=args.threshold)
    print(json.dumps(report, indent=2, sort_keys=True))
    if not args.json:
        _print_report_table(report)
    return EXIT_ANOMALY if report["verdict"] == "Anomalous" else EXIT_CLEAN


def _print_report_table(report: dict) -> None:
    print()
    header = f"{'flow':<44} {'path':<10} {'delay delta (us)':>17} {'flagged':>8}"
    print(header)
    print("-" * len(header))
    for entry in report["flows"]:
        flow = entry["flow"]
        port = f":{flow['dst_port']}" if flow["dst_port"] is not None else ""
        label = f"{flow['src']} -> {flow['dst']} proto {flow['protocol']}{port}"
        latency = entry["latency"]
        delta = f"{latency['delta_us']:.0f}" if latency else "n/a"
        flagged = "yes" if (latency is None or latency["flagged"]) else "no"
        print(f"{label:<44} {entry['path']['verdict']:<10} {delta:>17} {flagged:>8}")
    print(f"\nverdict: {report['verdict']}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="stage a scenario and run it to a trace file")
    run.add_argument("--topology", required=True, help="topology file or bundled fixture name")
    run.add_argument("--scenario", choices=SCENARIOS, default="baseline")
    run.add_argument("--return-mode", choices=(sc.RETURN_DIRECT, sc.RETURN_HAIRPIN), default=None)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", required=True, help="NDJSON trace path, or - for stdout")
    run.add_argument("--horizon", type=int, default=None, help="stop after this many sim microseconds")
    run.add_argument("--stealth-aid", action="store_true", help="aid host does not decrement TTL")
    run.set_defaults(func=cmd_run)

    trace = sub.add_parser("trace", help="traceroute a destination on the simulated net")
    trace.add_argument("--topology", required=True)
    trace.add_argument("--proto", required=True, help="icmp or tcp:PORT")
    trace.add_argument("--from", required=True, help="source host node id")
    trace.add_argument("--to", required=True, help="destination IPv4 address")
    trace.add_argument("--max-ttl", type=int, default=30)
    trace.add_argument("--scenario", choices=SCENARIOS, default="baseline")
    trace.add_argument("--return-mode", choices=(sc.RETURN_DIRECT, sc.RETURN_HAIRPIN), default=None)
    trace.add_argument("--seed", type=int, default=0)
    trace.add_argument("--stealth-aid", action="store_true")
    trace.set_defaults(func=cmd_trace)

    audit = sub.add_parser("audit", help="fleet-wide forwarding state audit")
    audit.add_argument("--topology", required=True)
    audit.add_argument("--state", choices=SCENARIOS, default="baseline",
                       help="scenario to stage before auditing")
    audit.add_argument("--return-mode", choices=(sc.RETURN_DIRECT, sc.RETURN_HAIRPIN), default=None)
    audit.add_argument("--seed", type=int, default=0)
    audit.set_defaults(func=cmd_audit)

    report = sub.add_parser("report", help="compare a suspect trace against a baseline")
    report.add_argument("--baseline", required=True, help="baseline NDJSON trace")
    report.add_argument("--suspect", required=True, help="suspect NDJSON trace")
    report.add_argument("--threshold", type=float, default=1.5)
    report.add_argument("--json", action="store_true", help="skip the human-readable table")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CLEAN if exc.code in (0, None) else EXIT_ERROR
    try:
        return args.func(args)
    except (SchemaError, ValidationError, sc.ScenarioError, ctl.ConnectorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
