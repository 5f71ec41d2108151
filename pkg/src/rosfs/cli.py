"""Command line front door: record, serve, query, info, bench.

Exit codes: 0 success, 2 usage error (argparse), 3 typed rosfs error
(the error class name is printed to stderr), 1 anything unexpected.
Each subcommand takes --json for line-delimited machine-readable output.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import bench as benchmod
from .bag import convert_bag_to_container
from .container import read_metadata
from .errors import RosfsError
from .netproto import QueryServer, parse_command, parse_endpoint, request
from .query import NS, QueryEngine
from .recorder import DurabilityPolicy, pace_messages, record
from .synth import load_workload

log = logging.getLogger(__name__)

DEFAULT_ENDPOINT_ENV = "ROSFS_ENDPOINT"


def cmd_record(args) -> int:
    policy = DurabilityPolicy(sync=args.durability)
    t0 = time.perf_counter()
    if args.from_bag:
        meta = convert_bag_to_container(args.from_bag, args.out, realtime=args.realtime, policy=policy)
    else:
        source = load_workload(args.workload)
        if args.realtime:
            source = pace_messages(iter(source), speed=args.speed)
        meta = record(args.out, source, policy=policy)
    elapsed = time.perf_counter() - t0
    total = sum(t.message_count for t in meta.topics)
    span_s = (meta.end_timestamp - meta.start_timestamp) / NS
    if args.json:
        for t in meta.topics:
            print(json.dumps({"topic": t.topic_name, "id": t.topic_id,
                              "type": t.message_type, "messages": t.message_count}))
        print(json.dumps({"topics": meta.topic_count, "messages": total,
                          "span_s": span_s, "wall_s": elapsed, "out": str(args.out)}))
    else:
        print(f"recorded {total} messages on {meta.topic_count} topics into {args.out}")
        print(f"  recording span {span_s:.2f} s, wall time {elapsed:.2f} s")
        for t in meta.topics:
            print(f"  [{t.topic_id}] {t.topic_name} ({t.message_type}): {t.message_count}")
    return 0


def cmd_serve(args) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    host, port = parse_endpoint(args.bind)
    server = QueryServer(args.container, host, port, throttle_bps=args.throttle)
    print(f"serving {args.container} on {server.endpoint[0]}:{server.endpoint[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def _dump_records(records, dump_dir: Path) -> None:
    dump_dir.mkdir(parents=True, exist_ok=True)
    for i, (name, msg) in enumerate(records):
        safe = name.strip("/").replace("/", "_") or "topic"
        (dump_dir / f"{i:06d}_{safe}_{msg.timestamp}.bin").write_bytes(msg.payload)


def _run_one_query(args, endpoint: str | None, command: str):
    if args.container:
        engine = QueryEngine(args.container)
        try:
            cmd = parse_command(command)
            if cmd.kind == "auto":
                from .errors import NoBandwidthEstimate

                raise NoBandwidthEstimate("qa needs a server-side bandwidth estimate; use --endpoint")
            t0 = time.perf_counter()
            if cmd.kind == "latest":
                result = engine.latest(cmd.topics, cmd.time_len)
            else:
                result = engine.history(cmd.topics, cmd.start_time, cmd.end_time)
            return result, time.perf_counter() - t0
        finally:
            engine.close()
    result = request(endpoint, command, timeout=args.timeout)
    return result, result.stats.query_duration


def cmd_query(args) -> int:
    endpoint = args.endpoint or os.environ.get(DEFAULT_ENDPOINT_ENV)
    if not args.container and not endpoint:
        print("query needs --container, --endpoint, or $" + DEFAULT_ENDPOINT_ENV, file=sys.stderr)
        return 2
    if args.script:
        return _run_script(args, endpoint)
    result, latency = _run_one_query(args, endpoint, args.command)
    per_topic: dict[str, tuple[int, int]] = {}
    for name, msg in result.records:
        n, b = per_topic.get(name, (0, 0))
        per_topic[name] = (n + 1, b + len(msg.payload))
    if args.json:
        for name, (n, b) in per_topic.items():
            print(json.dumps({"topic": name, "messages": n, "bytes": b}))
        print(json.dumps({"messages": result.stats.messages_returned,
                          "bytes": result.stats.bytes_returned, "latency_s": latency}))
    else:
        for name, (n, b) in per_topic.items():
            print(f"  {name}: {n} messages, {b} bytes")
        print(
            f"total {result.stats.messages_returned} messages, "
            f"{result.stats.bytes_returned} bytes in {latency * 1e3:.2f} ms"
        )
    if args.dump:
        _dump_records(result.records, Path(args.dump))
        print(f"payloads written to {args.dump}")
    return 0


def _run_script(args, endpoint: str | None) -> int:
    """Batch mode: one command per line, sent at a fixed frequency."""
    interval = 1.0 / args.frequency if args.frequency > 0 else 0.0
    commands = [
        ln.strip()
        for ln in Path(args.script).read_text().splitlines()
        if ln.strip() and not ln.strip().startswith("#")
    ]
    failed = 0
    next_due = time.monotonic()
    for i, command in enumerate(commands):
        delay = next_due - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        next_due += interval
        try:
            result, latency = _run_one_query(args, endpoint, command)
            row = {"i": i, "command": command, "messages": result.stats.messages_returned,
                   "bytes": result.stats.bytes_returned, "latency_s": latency}
        except RosfsError as e:
            failed += 1
            row = {"i": i, "command": command, "error": type(e).__name__, "detail": str(e)}
        if args.json:
            print(json.dumps(row))
        else:
            if "error" in row:
                print(f"[{i}] {command!r} -> {row['error']}: {row['detail']}")
            else:
                print(f"[{i}] {command!r} -> {row['messages']} messages, "
                      f"{row['bytes']} bytes in {row['latency_s'] * 1e3:.2f} ms")
    print(f"{len(commands) - failed}/{len(commands)} commands succeeded")
    return 3 if failed else 0


def cmd_info(args) -> int:
    meta = read_metadata(args.container)
    if args.json:
        for t in meta.topics:
            print(json.dumps({"id": t.topic_id, "topic": t.topic_name,
                              "type": t.message_type, "messages": t.message_count}))
        print(json.dumps({"format_version": meta.format_version, "topics": meta.topic_count,
                          "start_timestamp": meta.start_timestamp, "end_timestamp": meta.end_timestamp}))
        return 0
    print(f"container: {args.container}")
    print(f"  format_version: {meta.format_version}")
    print(f"  topics: {meta.topic_count}")
    print(f"  start_timestamp: {meta.start_timestamp}")
    print(f"  end_timestamp:   {meta.end_timestamp}")
    span = (meta.end_timestamp - meta.start_timestamp) / NS
    print(f"  span: {span:.3f} s")
    if meta.topics:
        wid = max(len(t.topic_name) for t in meta.topics)
        print(f"  {'id':>4} {'topic':<{wid}} {'messages':>10}  type")
        for t in meta.topics:
            print(f"  {t.topic_id:>4} {t.topic_name:<{wid}} {t.message_count:>10}  {t.message_type}")
    return 0


def cmd_bench(args) -> int:
    params = {}
    if args.scenario == "offline-topic":
        params = {"big_bytes": args.big_mb << 20, "small_bytes": args.small_mb << 20,
                  "repeats": args.repeats}
    elif args.scenario == "time-range":
        params = {"duration_s": args.duration, "repeats": args.repeats}
    elif args.scenario in ("query-latest", "query-history"):
        params = {"queries": args.queries}
    elif args.scenario == "query-auto":
        params = {"trace": args.trace, "queries": args.queries, "target_s": args.target}
    elif args.scenario == "concurrent":
        params = {"client_counts": tuple(int(k) for k in args.clients.split(",")),
                  "requests_per_client": args.requests}
    report = benchmod.run_scenario(args.scenario, args.workdir, **params)
    if args.json == "-":
        sys.stdout.write(report.json_lines())
    else:
        out = Path(args.json) if args.json else Path(args.workdir) / f"{args.scenario}.jsonl"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.json_lines())
        print(f"report rows written to {out}")
    print(report.table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rosfs", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    rec = sub.add_parser("record", help="record a workload or a bag into a container")
    src = rec.add_mutually_exclusive_group(required=True)
    src.add_argument("--workload", type=Path, help="workload spec file (synthetic source)")
    src.add_argument("--from-bag", type=Path, help="replay a ROS bag v2.0 file")
    rec.add_argument("--out", type=Path, required=True, help="container directory to create")
    rec.add_argument("--realtime", action="store_true", help="pace by message timestamps")
    rec.add_argument("--speed", type=float, default=1.0, help="realtime pacing multiplier")
    rec.add_argument("--durability", choices=["buffered", "fsync", "paranoid"], default="buffered")
    rec.add_argument("--json", action="store_true")
    rec.set_defaults(fn=cmd_record)

    srv = sub.add_parser("serve", help="serve a container over the wire protocol")
    srv.add_argument("--container", type=Path, required=True)
    srv.add_argument("--bind", default="127.0.0.1:7780", help="host:port to listen on")
    srv.add_argument("--throttle", type=float, default=None, help="outbound bytes/second limit")
    srv.set_defaults(fn=cmd_serve)

    qry = sub.add_parser("query", help="run a q/qh/qa command locally or remotely")
    qry.add_argument("command", help='e.g. "q /imu 1" or "qh /imu 5.0 10.0"')
    qry.add_argument("--container", type=Path, help="query a local container")
    qry.add_argument("--endpoint", help=f"host:port (default ${DEFAULT_ENDPOINT_ENV})")
    qry.add_argument("--timeout", type=float, default=30.0)
    qry.add_argument("--dump", type=Path, help="write returned payloads into this directory")
    qry.add_argument("--json", action="store_true")
    qry.set_defaults(fn=cmd_query)

    inf = sub.add_parser("info", help="print container metadata")
    inf.add_argument("--container", type=Path, required=True)
    inf.add_argument("--json", action="store_true")
    inf.set_defaults(fn=cmd_info)

    ben = sub.add_parser("bench", help="run an evaluation scenario")
    ben.add_argument("scenario", choices=sorted(benchmod.SCENARIOS))
    ben.add_argument("--workdir", type=Path, default=Path("bench-work"))
    ben.add_argument("--json", help="jsonl output path ('-' for stdout)")
    ben.add_argument("--big-mb", type=int, default=1024)
    ben.add_argument("--small-mb", type=int, default=10)
    ben.add_argument("--repeats", type=int, default=3)
    ben.add_argument("--duration", type=float, default=120.0)
    ben.add_argument("--queries", type=int, default=None)
    ben.add_argument("--trace", choices=sorted(benchmod.BANDWIDTH_TRACES), default="random")
    ben.add_argument("--target", type=float, default=1.0)
    ben.add_argument("--clients", default="1,2,4,8,16")
    ben.add_argument("--requests", type=int, default=20)
    ben.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "queries", None) is None and hasattr(args, "queries"):
        args.queries = 100 if args.scenario == "query-auto" else 500
    try:
        return args.fn(args)
    except RosfsError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
