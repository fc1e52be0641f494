"""``flowreplay`` command line: split, agent, run, simulate, analyze.

Exit codes: 0 success, 2 mapping problem, 3 bind failure, 4 replay failure
or unreachable agent, 5 missing inputs.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import signal
import sys
from pathlib import Path

from .analyzer import MissingInputError, analyze_run, summary_text
from .harness import LinkParams
from .orchestrator import (
    AgentUnreachable,
    RunConfig,
    RunManifest,
    RunResult,
    load_agents,
    make_run_dir,
    parse_address,
    run_agent,
    run_controller,
    simulate,
)
from .replay import DuplicatePolicy
from .splitter import DEFAULT_BASE_PORT, HostMapping, MappingError, SplitError, split_trace, write_plan
from .trace import PcapError, read_pcap

EXIT_OK = 0
EXIT_MAPPING = 2
EXIT_BIND = 3
EXIT_REPLAY = 4
EXIT_MISSING = 5

AGENTS_ENV = "FLOWREPLAY_AGENTS"

logger = logging.getLogger("flowreplay")


class CliError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


def _load_mapping(path: str) -> HostMapping:
    try:
        return HostMapping.load(path)
    except FileNotFoundError:
        raise CliError(EXIT_MISSING, f"mapping file not found: {path}")
    except SplitError as exc:
        raise CliError(EXIT_MAPPING, str(exc))


def _check_input(path: str) -> None:
    if not Path(path).is_file():
        raise CliError(EXIT_MISSING, f"input capture not found: {path}")


def _run_dir(args) -> Path:
    return make_run_dir(args.out)


def _config(args) -> RunConfig:
    return RunConfig(
        base_port=args.base_port,
        lead_time_us=int(args.lead_ms * 1000),
        seed=args.seed,
        duplicate_policy=(DuplicatePolicy.DROP_SCHEDULED_DUPLICATES if args.drop_duplicates
                          else DuplicatePolicy.STRICT),
        inactivity_timeout_us=int(args.timeout_ms * 1000),
    )


def _finish(result: RunResult, analyze: bool) -> int:
    print(result.run_dir)
    print(f"connections kept: {result.split.kept}, dropped: {result.split.dropped}")
    if analyze and result.manifest.sync_epoch_us is not None:
        try:
            report = analyze_run(result.run_dir)
        except MissingInputError as exc:
            print(f"analysis skipped: {exc}", file=sys.stderr)
        else:
            sys.stdout.write(summary_text(report))
    if result.ok:
        return EXIT_OK
    if result.manifest.error:
        print(f"run failed: {result.manifest.error}", file=sys.stderr)
    failures = result.failures()
    for line in failures:
        print(line, file=sys.stderr)
    print(f"{len(failures)} connection role(s) did not complete", file=sys.stderr)
    return EXIT_REPLAY


# -- subcommands ------------------------------------------------------------------


def cmd_split(args) -> int:
    _check_input(args.pcap)
    mapping = _load_mapping(args.map)
    try:
        trace = read_pcap(args.pcap)
    except PcapError as exc:
        raise CliError(EXIT_MISSING, f"cannot read {args.pcap}: {exc}")
    try:
        result = split_trace(trace, mapping, args.base_port, Path(args.pcap).stem)
    except MappingError as exc:
        raise CliError(EXIT_MAPPING, str(exc))
    out = Path(args.out) if args.out else make_run_dir("runs") / "split"
    write_plan(result.plan, out)
    print(out)
    print(f"kept: {result.kept}, dropped: {result.dropped}")
    for node, conns in result.plan.nodes.items():
        print(f"  {node}: {len(conns)} file(s), initiates {result.plan.initiator_count(node)}")
    return EXIT_OK


def cmd_agent(args) -> int:
    try:
        listen = parse_address(args.listen)
        data = parse_address(args.data) if args.data else None
    except ValueError as exc:
        raise CliError(EXIT_MAPPING, str(exc))

    async def main() -> None:
        loop = asyncio.get_running_loop()
        task = asyncio.current_task()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, task.cancel)
            except (NotImplementedError, RuntimeError):
                pass
        try:
            await run_agent(listen, data)
        except asyncio.CancelledError:
            pass

    try:
        asyncio.run(main())
    except OSError as exc:
        raise CliError(EXIT_BIND, f"cannot bind: {exc}")
    return EXIT_OK


def cmd_run(args) -> int:
    _check_input(args.pcap)
    mapping = _load_mapping(args.map)
    agents_path = args.agents or os.environ.get(AGENTS_ENV)
    if not agents_path:
        raise CliError(EXIT_MISSING, f"no agents file (use --agents or set {AGENTS_ENV})")
    try:
        agents = load_agents(agents_path)
    except FileNotFoundError:
        raise CliError(EXIT_MISSING, f"agents file not found: {agents_path}")
    except ValueError as exc:
        raise CliError(EXIT_MAPPING, str(exc))
    run_dir = _run_dir(args)
    try:
        result = asyncio.run(run_controller(args.pcap, mapping, agents, _config(args), run_dir))
    except MappingError as exc:
        raise CliError(EXIT_MAPPING, str(exc))
    except AgentUnreachable as exc:
        raise CliError(EXIT_REPLAY, f"{exc}; no start was issued ({run_dir})")
    return _finish(result, not args.no_analyze)


def cmd_simulate(args) -> int:
    if args.manifest:
        try:
            manifest = RunManifest.load(args.manifest)
        except FileNotFoundError:
            raise CliError(EXIT_MISSING, f"run manifest not found: {args.manifest}")
        pcap = args.pcap or manifest.input
        mapping = HostMapping(manifest.mapping)
        cfg = manifest.run_config()
    else:
        if not (args.pcap and args.map):
            raise CliError(EXIT_MISSING, "simulate needs <pcap> and --map, or --manifest")
        pcap = args.pcap
        mapping = _load_mapping(args.map)
        cfg = _config(args)
        try:
            cfg.link = LinkParams(
                one_way_delay_us=args.delay_us,
                jitter_us=args.jitter_us,
                loss_prob=args.loss,
                duplicate_prob=args.dup,
                seed=args.seed,
            )
        except ValueError as exc:
            raise CliError(EXIT_MAPPING, f"bad link parameters: {exc}")
    _check_input(pcap)
    run_dir = _run_dir(args)
    try:
        result = simulate(pcap, mapping, cfg, run_dir)
    except MappingError as exc:
        raise CliError(EXIT_MAPPING, str(exc))
    return _finish(result, not args.no_analyze)


def cmd_analyze(args) -> int:
    try:
        report = analyze_run(args.run_dir, args.out)
    except MissingInputError as exc:
        raise CliError(EXIT_MISSING, str(exc))
    sys.stdout.write(summary_text(report))
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if report.warnings:
        print(f"{len(report.warnings)} alignment warning(s)", file=sys.stderr)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def _replay_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--base-port", type=int, default=DEFAULT_BASE_PORT)
    p.add_argument("--lead-ms", type=float, default=3000.0, help="gap between start command and sync epoch")
    p.add_argument("--timeout-ms", type=float, default=10000.0, help="inactivity timeout per connection")
    p.add_argument("--drop-duplicates", action="store_true",
                   help="drop packets the peer cannot tell apart from earlier ones")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs", help="parent of the timestamped run directory")
    p.add_argument("--no-analyze", action="store_true", help="skip the analysis step")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowreplay", description="Distributed TCP capture replay.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="split a capture into per-node connection files")
    p.add_argument("pcap")
    p.add_argument("--map", required=True, help="file of '<ip> <node-id>' lines")
    p.add_argument("--base-port", type=int, default=DEFAULT_BASE_PORT)
    p.add_argument("--out", help="output directory (default: timestamped under ./runs)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("agent", help="run the replay agent service")
    p.add_argument("--listen", required=True, help="control address host:port")
    p.add_argument("--data", help="packet address host:port (default: control port + 1)")
    p.set_defaults(func=cmd_agent)

    p = sub.add_parser("run", help="replay across live agents")
    p.add_argument("pcap")
    p.add_argument("--map", required=True)
    p.add_argument("--agents", help=f"file of '<node-id> <host:port> [<data host:port>]' (env {AGENTS_ENV})")
    _replay_options(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="replay in-process over a simulated network")
    p.add_argument("pcap", nargs="?")
    p.add_argument("--map")
    p.add_argument("--manifest", help="repeat the run described by a run.json")
    p.add_argument("--delay-us", type=int, default=0)
    p.add_argument("--jitter-us", type=int, default=0)
    p.add_argument("--loss", type=float, default=0.0)
    p.add_argument("--dup", type=float, default=0.0)
    _replay_options(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="compute deviation reports for a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", help="where to write reports (default: the run directory)")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"flowreplay: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
