#!/usr/bin/env python3
"""
Bridge ledger auditor - operator entry point

Commands:
    audit     batch-audit per-chain event logs
    watch     run the live monitor over tailed logs or a simulated scenario
    simulate  generate a synthetic trace with injected attacks
    report    per-bridge label counts over a findings file
    ate-demo  announce-then-execute correctness experiment

Exit codes: 0 clean, 2 violations found, 1 operational error.
"""

import argparse
import asyncio
import hashlib
import json
import logging
import math
import signal
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from rich.console import Console
from rich.table import Table

from agents.alert_sinks import AlertDispatcher, JsonlAlertSink
from agents.bridge_monitor_agent import BridgeMonitorAgent, Clock, SimulatedClock, SystemClock
from core.ate_protocol import render_experiment_table, run_correctness_experiment, write_transcript
from core.audit_engine import BridgeAuditEngine, aggregate_flow, render_summary_table
from core.config import AuditConfig, load_audit_config, load_report_rules
from core.exceptions import BridgeAuditError, UndecodableEvent
from core.ingest import read_event_logs, sniff_chain
from core.logging_config import configure_logging
from core.pairing import load_external_map
from core.report import build_report, iter_findings, render_report_table
from core.simchain import generate, load_scenario, write_trace
from integrations.chain_sources import ChainSource, FileChainSource, sources_for_trace

logger = logging.getLogger("bridge_audit")

EXIT_CLEAN = 0
EXIT_ERROR = 1
EXIT_VIOLATIONS = 2

console = Console()


def cmd_audit(args: argparse.Namespace) -> int:
    config = load_audit_config(args.config, strict_fees=args.strict_fees)
    events, errors = read_event_logs(args.logs, config.chain_ids())
    undecodable = [error for error in errors if isinstance(error, UndecodableEvent)]
    parse_errors = len(errors) - len(undecodable)
    external_map = load_external_map(args.external_map) if args.external_map else None

    result = BridgeAuditEngine(config).audit_trace(events, undecodable, external_map, parse_errors)

    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            for finding in result.findings:
                handle.write(json.dumps(finding.to_dict(), sort_keys=True) + "\n")
    if args.summary:
        Path(args.summary).write_text(json.dumps(result.summary.to_dict(), sort_keys=True, indent=2) + "\n")
    if args.flow_bucket:
        series = aggregate_flow(events, args.flow_bucket, config)
        target = open(args.flow_out, "w", encoding="utf-8") if args.flow_out else sys.stdout
        try:
            for (bridge, token_class), points in series.items():
                for point in points:
                    target.write(json.dumps(
                        {"bridge": bridge, "token_class": token_class, "t": point.t, "value": str(point.value)},
                        sort_keys=True,
                    ) + "\n")
        finally:
            if target is not sys.stdout:
                target.close()

    render_summary_table(result.summary, console)
    if result.summary.violations:
        return EXIT_VIOLATIONS
    if result.summary.failed_bridges:
        return EXIT_ERROR
    return EXIT_CLEAN


def _default_poll_budget(sources: Sequence[ChainSource], trace_end: int, interval: int) -> int:
    lag = max((source.chain.finality_lag for source in sources), default=0)
    return math.ceil((trace_end + lag) / interval) + 2


async def cmd_watch(args: argparse.Namespace) -> int:
    config: AuditConfig
    sources: List[ChainSource]
    trace_end = 0
    if args.scenario:
        trace = generate(load_scenario(args.scenario))
        config = load_audit_config(args.config, args.strict_fees) if args.config else trace.audit_config
        if args.strict_fees:
            config = config.model_copy(update={"strict_fees": True})
        sources = list(sources_for_trace(trace))
        trace_end = max((event.block_time for event in trace.events()), default=0)
    elif args.logs:
        config = load_audit_config(args.config, strict_fees=args.strict_fees)
        sources = [FileChainSource(path, config.chain(sniff_chain(path))) for path in args.logs]
    else:
        raise BridgeAuditError("watch needs --logs or --scenario")

    if args.interval:
        config = config.model_copy(update={"monitor": config.monitor.model_copy(update={"poll_interval": args.interval})})

    clock: Clock = SystemClock()
    max_polls = args.max_polls
    if args.simulated_clock or args.scenario:
        clock = SimulatedClock(0)
        if max_polls is None:
            max_polls = _default_poll_budget(sources, trace_end, config.monitor.poll_interval)

    dispatcher = AlertDispatcher([JsonlAlertSink(args.out)]) if args.out else None
    agent = BridgeMonitorAgent(config, sources, args.state_dir, clock=clock, dispatcher=dispatcher)

    loop = asyncio.get_running_loop()
    for signum in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(signum, agent.stop)
        except (NotImplementedError, RuntimeError):
            pass

    async with agent:
        result = await agent.run(max_polls=max_polls)

    table = Table(title="Bridge monitor run")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", justify="right")
    table.add_row("Polls", str(result["polls"]))
    table.add_row("Alert batches", str(len(result["batches"])))
    table.add_row("Poll errors", str(result["errors"]))
    for category, count in sorted(result["alerts_by_category"].items()):
        table.add_row(f"Alerts: {category}", str(count))
    console.print(table)
    if result["violation_alerts"]:
        return EXIT_VIOLATIONS
    if result["polls"] and result["errors"] == result["polls"]:
        return EXIT_ERROR
    return EXIT_CLEAN


def cmd_simulate(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.model_copy(update={"seed": args.seed})
    trace = generate(scenario)
    written = write_trace(trace, args.out or "trace")

    table = Table(title=f"Simulated trace (seed {scenario.seed})")
    table.add_column("File", style="cyan")
    table.add_column("sha256")
    for path in written:
        table.add_row(str(path), hashlib.sha256(path.read_bytes()).hexdigest()[:16])
    table.add_row("attacks injected", str(len(trace.ground_truth)))
    table.add_row("pending deposits", str(trace.pending_deposits))
    console.print(table)
    return EXIT_CLEAN


def cmd_report(args: argparse.Namespace) -> int:
    rules = load_report_rules(args.rules)
    rows = build_report(iter_findings(args.findings), rules)
    render_report_table(rows, console)
    if args.out:
        Path(args.out).write_text(
            json.dumps([row.to_dict() for row in rows], sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    return EXIT_CLEAN


def cmd_ate_demo(args: argparse.Namespace) -> int:
    seeds = [args.seed + offset for offset in range(args.seeds)]
    reports = []
    for seed in seeds:
        report, bridge = run_correctness_experiment(seed, n_total=args.pairs, benign_only=args.benign_only)
        reports.append(report)
        if args.transcript:
            path = Path(args.transcript)
            if len(seeds) > 1:
                path = path.with_name(f"{path.stem}-{seed}{path.suffix}")
            write_transcript(bridge.tickets, path)
    render_experiment_table(reports, console)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            for report in reports:
                handle.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    return EXIT_CLEAN


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Bridge ledger auditor - balance invariant checks for cross-chain bridges")
    parser.add_argument("--log-level", help="Logging level (default: BRIDGE_AUDIT_LOG_LEVEL or INFO)")
    parser.add_argument("--json-logs", action="store_true", help="Emit structured JSON log records")
    commands = parser.add_subparsers(dest="command", required=True)

    audit = commands.add_parser("audit", help="Audit per-chain event logs")
    audit.add_argument("logs", nargs="+", help="Newline-delimited JSON event logs, one per chain")
    audit.add_argument("--config", help="AuditConfig JSON file")
    audit.add_argument("--out", help="Write findings as NDJSON")
    audit.add_argument("--summary", help="Write the run summary as JSON")
    audit.add_argument("--external-map", help="JSON map of external pairing keys to deposit transactions")
    audit.add_argument("--flow-bucket", type=int, help="Emit aggregate flow in buckets of this many seconds")
    audit.add_argument("--flow-out", help="Aggregate flow NDJSON target (default: stdout)")
    audit.add_argument("--strict-fees", action="store_true", help="Flag withdrawals below the expected amount")
    audit.set_defaults(handler=cmd_audit)

    watch = commands.add_parser("watch", help="Run the live monitor")
    watch.add_argument("--config", help="AuditConfig JSON file")
    watch.add_argument("--logs", nargs="+", help="Event logs to tail, one per chain")
    watch.add_argument("--scenario", help="Scenario JSON to serve as a simulated live feed")
    watch.add_argument("--interval", type=int, help="Poll interval in seconds")
    watch.add_argument("--max-polls", type=int, help="Stop after this many polls")
    watch.add_argument("--state-dir", default=".bridge-audit", help="Store and checkpoint directory")
    watch.add_argument("--simulated-clock", action="store_true", help="Drive polls from a simulated clock")
    watch.add_argument("--out", help="Alert NDJSON path (overrides the configured sink)")
    watch.add_argument("--strict-fees", action="store_true", help="Flag withdrawals below the expected amount")
    watch.set_defaults(handler=cmd_watch)

    simulate = commands.add_parser("simulate", help="Generate a synthetic trace")
    simulate.add_argument("scenario", help="Scenario JSON file")
    simulate.add_argument("--out", help="Output directory (default: ./trace)")
    simulate.add_argument("--seed", type=int, help="Override the scenario seed")
    simulate.set_defaults(handler=cmd_simulate)

    report = commands.add_parser("report", help="Per-bridge label counts")
    report.add_argument("findings", help="Findings NDJSON written by `audit --out`")
    report.add_argument("--rules", help="Report rules JSON file")
    report.add_argument("--out", help="Write report rows as JSON")
    report.set_defaults(handler=cmd_report)

    ate = commands.add_parser("ate-demo", help="Announce-then-execute correctness experiment")
    ate.add_argument("--seed", type=int, default=0, help="First seed")
    ate.add_argument("--seeds", type=int, default=1, help="Number of consecutive seeds to run")
    ate.add_argument("--pairs", type=int, default=100, help="Deposit/withdrawal pairs per run")
    ate.add_argument("--benign-only", action="store_true", help="Leave out the malicious tickets")
    ate.add_argument("--transcript", help="Write the ticket transcript as NDJSON")
    ate.add_argument("--out", help="Write experiment reports as NDJSON")
    ate.set_defaults(handler=cmd_ate_demo)
    return parser


async def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main function for CLI usage"""
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, args.json_logs)
    try:
        outcome = args.handler(args)
        if asyncio.iscoroutine(outcome):
            outcome = await outcome
        return outcome
    except (BridgeAuditError, OSError, ValueError) as e:
        print(f"bridge_audit: error: {e}", file=sys.stderr)
        logger.debug("Command failed", exc_info=True)
        return EXIT_ERROR


def cli(argv: Optional[Sequence[str]] = None) -> int:
    return asyncio.run(main(argv))


if __name__ == "__main__":
    sys.exit(cli())
