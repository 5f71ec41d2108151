"""Benchmark harness: the desk-scale evaluation scenarios and the naive
single-file comparator.

The naive baseline is a bag-shaped single file queried index-at-open:
every query pays a full structural pass (all record headers plus every
per-chunk index record) before it can seek to message data - the open
cost the per-topic bricks and the persistent time index avoid.

Reports carry the raw measurement rows (line-delimited records) plus a
summary with the derived ratios; ratios are computed only when both
sides actually ran.
"""

from __future__ import annotations

import json
import random
import statistics
import threading
import time
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from pathlib import Path

from . import bag as bagmod
from .bag import OP_CHUNK, OP_CONNECTION, OP_INDEX_DATA, TIME, U32, read_record, write_bag
from .container import Message
from .errors import CorruptBag, NotABag
from .netproto import QueryServer, request
from .query import QueryEngine
from .recorder import record
from .synth import SynthSource, TopicSpec, generate


@dataclass(slots=True)
class BenchReport:
    scenario: str
    params: dict
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def json_lines(self) -> str:
        out = [json.dumps({"scenario": self.scenario, "params": self.params})]
        out += [json.dumps(row) for row in self.rows]
        out.append(json.dumps({"summary": self.summary}))
        return "\n".join(out) + "\n"

    def table(self) -> str:
        lines = [f"scenario: {self.scenario}"]
        for k, v in self.params.items():
            lines.append(f"  {k} = {v}")
        lines.append("summary:")
        width = max((len(k) for k in self.summary), default=0)
        for k, v in self.summary.items():
            shown = f"{v:.6g}" if isinstance(v, float) else v
            lines.append(f"  {k:<{width}}  {shown}")
        return "\n".join(lines)


def latency_stats(samples: list[float]) -> dict:
    ordered = sorted(samples)
    n = len(ordered)
    return {
        "n": n,
        "mean": statistics.fmean(ordered),
        "p50": ordered[n // 2],
        "p99": ordered[min(n - 1, int(n * 0.99))],
    }


# ---------------------------------------------------------------------------
# Naive baseline: single chunked file, index parsed at open


class NaiveBagStore:
    """Open-time skim of the whole file structure, then indexed reads."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self._f = open(self.path, "rb")
        if self._f.read(len(bagmod.BAG_MAGIC)) != bagmod.BAG_MAGIC:
            raise NotABag(str(path))
        self.topic_conn: dict[str, int] = {}
        self.entries: dict[int, list[tuple[int, int]]] = {}  # conn -> [(ts, abs offset)]
        self._skim()

    def _skim(self) -> None:
        """The expensive part: visit every record header and parse every
        index record; message payloads are seeked past, not read."""
        f = self._f
        last_chunk_data = 0
        while True:
            start = f.tell()
            raw = f.read(4)
            if not raw:
                break
            if len(raw) < 4:
                raise CorruptBag("truncated record", offset=start)
            (hlen,) = U32.unpack(raw)
            header = f.read(hlen)
            if len(header) < hlen:
                raise CorruptBag("truncated header", offset=start)
            fields = bagmod.parse_header_fields(header, start + 4)
            raw = f.read(4)
            if len(raw) < 4:
                raise CorruptBag("truncated data length", offset=start)
            (dlen,) = U32.unpack(raw)
            data_start = f.tell()
            op = fields.get("op", b"\x00")[0]
            if op == OP_CHUNK:
                last_chunk_data = data_start
                f.seek(dlen, 1)  # skip payload bytes; headers were the cost
            elif op == OP_INDEX_DATA:
                data = f.read(dlen)
                (conn,) = U32.unpack(fields["conn"])
                bucket = self.entries.setdefault(conn, [])
                for pos in range(0, len(data) - 11, 12):
                    secs, nsecs = TIME.unpack_from(data, pos)
                    (off,) = U32.unpack_from(data, pos + 8)
                    bucket.append((secs * 1_000_000_000 + nsecs, last_chunk_data + off))
            elif op == OP_CONNECTION:
                data = f.read(dlen)
                (conn,) = U32.unpack(fields["conn"])
                self.topic_conn[fields["topic"].decode("utf-8", "replace")] = conn
            else:
                f.seek(dlen, 1)
        for bucket in self.entries.values():
            bucket.sort()

    def query(self, topics: list[str], start_ns: int, end_ns: int) -> list[tuple[str, int, bytes]]:
        out = []
        for topic in topics:
            conn = self.topic_conn.get(topic)
            if conn is None:
                continue
            bucket = self.entries.get(conn, [])
            lo = bisect_left(bucket, (start_ns, 0))
            hi = bisect_right(bucket, (end_ns, 1 << 62))
            for ts, offset in bucket[lo:hi]:
                self._f.seek(offset)
                rec = read_record(self._f)
                out.append((topic, ts, rec.data))
        return out

    def close(self) -> None:
        self._f.close()


# ---------------------------------------------------------------------------
# Dataset builders


def _ballast_specs(total_bytes: int, small_topic_bytes: int, seed: int = 0) -> list[TopicSpec]:
    """A container of roughly total_bytes: few huge messages as ballast
    plus a ~small_topic_bytes topic of 10 KiB messages."""
    ballast_size = 512 * 1024
    duration = 100.0
    n_ballast = max(total_bytes // ballast_size, 1)
    small_size = 10 * 1024
    n_small = max(small_topic_bytes // small_size, 1)
    return [
        TopicSpec("/ballast/image", n_ballast / duration, ballast_size, duration, "sensor_msgs/Image", seed),
        TopicSpec("/probe/info", n_small / duration, small_size, duration, "sensor_msgs/CameraInfo", seed),
    ]


def build_dataset(workdir: Path, name: str, total_bytes: int, small_topic_bytes: int = 1 << 20, seed: int = 0):
    """Container + equivalent naive bag holding the same messages."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    container = workdir / f"{name}.container"
    naive = workdir / f"{name}.bag"
    specs = _ballast_specs(total_bytes, small_topic_bytes, seed)
    if not container.exists():
        record(container, generate(specs))
    if not naive.exists():
        src = generate(specs)
        write_bag(naive, iter(src), src.message_types)
    return container, naive, specs


# ---------------------------------------------------------------------------
# Scenarios


def scenario_offline_topic(
    workdir: Path | str,
    big_bytes: int = 1 << 30,
    small_bytes: int = 10 << 20,
    repeats: int = 3,
) -> BenchReport:
    """Cold single-small-topic query: big vs small container, and vs the
    naive index-at-open baseline on the big one."""
    workdir = Path(workdir)
    report = BenchReport(
        "offline-topic", {"big_bytes": big_bytes, "small_bytes": small_bytes, "repeats": repeats}
    )
    big_c, big_bag, specs = build_dataset(workdir, "big", big_bytes)
    small_c, small_bag, _ = build_dataset(workdir, "small", small_bytes)
    topic = "/probe/info"
    lo, hi = 0, 1 << 62

    def rosfs_cold(root) -> tuple[float, int]:
        t0 = time.perf_counter()
        engine = QueryEngine(root)
        res = engine.history([topic], lo, hi)
        engine.close()
        return time.perf_counter() - t0, res.stats.messages_returned

    def naive_cold(path) -> tuple[float, int]:
        t0 = time.perf_counter()
        store = NaiveBagStore(path)
        msgs = store.query([topic], lo, hi)
        store.close()
        return time.perf_counter() - t0, len(msgs)

    samples: dict[str, list[float]] = {"rosfs_big": [], "rosfs_small": [], "naive_big": []}
    counts: dict[str, int] = {}
    for rep in range(repeats):
        for label, fn, target in (
            ("rosfs_big", rosfs_cold, big_c),
            ("rosfs_small", rosfs_cold, small_c),
            ("naive_big", naive_cold, big_bag),
        ):
            dt, n = fn(target)
            samples[label].append(dt)
            counts[label] = n
            report.rows.append({"rep": rep, "side": label, "latency_s": dt, "messages": n})
    assert counts["rosfs_big"] == counts["naive_big"], "comparator returned different data"
    med = {k: statistics.median(v) for k, v in samples.items()}
    report.summary = {
        **{f"{k}_median_s": v for k, v in med.items()},
        "big_vs_small_ratio": med["rosfs_big"] / med["rosfs_small"],
        "naive_vs_rosfs_ratio": med["naive_big"] / med["rosfs_big"],
        "messages": counts["rosfs_big"],
    }
    return report


def scenario_time_range(
    workdir: Path | str,
    rate_hz: float = 200.0,
    duration_s: float = 120.0,
    payload: int = 4096,
    points: int = 12,
    repeats: int = 3,
) -> BenchReport:
    """Fixed start, growing end: latency should be affine in result bytes."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    root = workdir / "timerange.container"
    spec = TopicSpec("/visensor/imu", rate_hz, payload, duration_s, "sensor_msgs/Imu")
    if not root.exists():
        record(root, generate([spec]))
    report = BenchReport(
        "time-range",
        {"rate_hz": rate_hz, "duration_s": duration_s, "payload": payload, "points": points},
    )
    engine = QueryEngine(root)
    meta = engine.reader.meta
    t0, t1 = meta.start_timestamp, meta.end_timestamp
    fractions = [0.01] + [i / points for i in range(1, points + 1)]
    xs, ys = [], []
    for frac in fractions:
        end = t0 + round((t1 - t0) * frac)
        best = None
        for _ in range(repeats):
            tic = time.perf_counter()
            res = engine.history(["/visensor/imu"], t0, end)
            dt = time.perf_counter() - tic
            best = dt if best is None else min(best, dt)
        xs.append(res.stats.bytes_returned)
        ys.append(best)
        report.rows.append(
            {"fraction": frac, "bytes": res.stats.bytes_returned,
             "messages": res.stats.messages_returned, "latency_s": best}
        )
    engine.close()
    fit = statistics.linear_regression(xs, ys)
    r2 = statistics.correlation(xs, ys) ** 2
    report.summary = {
        "slope_s_per_byte": fit.slope,
        "intercept_s": fit.intercept,
        "r_squared": r2,
        "latency_1pct_s": ys[0],
        "latency_100pct_s": ys[-1],
        "small_over_full_ratio": ys[0] / ys[-1],
    }
    return report


def _random_query_container(workdir: Path, n_messages: int, seed: int = 0):
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    root = workdir / "queries.container"
    per_topic = n_messages // 6
    duration = 60.0
    specs = [
        TopicSpec(f"/topic{i}", per_topic / duration, 256 * (i + 1), duration, seed=seed)
        for i in range(6)
    ]
    if not root.exists():
        record(root, generate(specs))
    return root, specs


def scenario_query_latest(workdir: Path | str, queries: int = 500, n_messages: int = 30_000, seed: int = 7) -> BenchReport:
    root, specs = _random_query_container(workdir, n_messages, seed)
    rng = random.Random(seed)
    engine = QueryEngine(root)
    names = [s.topic_name for s in specs]
    report = BenchReport("query-latest", {"queries": queries, "n_messages": n_messages})
    lat = []
    for _ in range(queries):
        topics = rng.sample(names, rng.randrange(1, 4))
        res = engine.latest(topics, rng.uniform(0.05, 60.0))
        lat.append(res.stats.query_duration)
        report.rows.append(
            {"topics": len(topics), "messages": res.stats.messages_returned,
             "bytes": res.stats.bytes_returned, "latency_s": res.stats.query_duration}
        )
    engine.close()
    report.summary = latency_stats(lat)
    return report


def scenario_query_history(workdir: Path | str, queries: int = 500, n_messages: int = 30_000, seed: int = 8) -> BenchReport:
    root, specs = _random_query_container(workdir, n_messages, seed)
    rng = random.Random(seed)
    engine = QueryEngine(root)
    meta = engine.reader.meta
    names = [s.topic_name for s in specs]
    report = BenchReport("query-history", {"queries": queries, "n_messages": n_messages})
    lat = []
    for _ in range(queries):
        a, b = sorted(rng.randrange(meta.start_timestamp, meta.end_timestamp) for _ in range(2))
        topics = rng.sample(names, rng.randrange(1, 4))
        res = engine.history(topics, a, b)
        lat.append(res.stats.query_duration)
        report.rows.append(
            {"topics": len(topics), "messages": res.stats.messages_returned,
             "bytes": res.stats.bytes_returned, "latency_s": res.stats.query_duration}
        )
    engine.close()
    report.summary = latency_stats(lat)
    return report


BANDWIDTH_TRACES = {
    # (period_s, rates): the emulated link steps through rates, one per period
    "good": (10.0, [6e6]),
    "poor": (10.0, [1e6]),
    "random": (12.0, [4e6, 2e6, 6e6, 3e6, 5e6, 2.5e6, 4.5e6, 3.5e6, 6e6]),
}


class TraceThrottle:
    """Replays a bandwidth trace against a server's token bucket."""

    def __init__(self, server: QueryServer, period_s: float, rates: list[float]):
        self.server = server
        self.period_s = period_s
        self.rates = rates
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        i = 0
        while not self._stop.is_set():
            self.server.throttle(self.rates[i % len(self.rates)])
            i += 1
            self._stop.wait(self.period_s)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()


def scenario_query_auto(
    workdir: Path | str,
    trace: str = "random",
    queries: int = 100,
    target_s: float = 1.0,
    seed: int = 9,
) -> BenchReport:
    """Query-Auto against an emulated link; response time should hug the
    target and returned bytes stay within the byte budget."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    root = workdir / "auto.container"
    spec = TopicSpec("/camera/image", 30.0, 307_272, 60.0, "sensor_msgs/Image", seed)
    if not root.exists():
        record(root, generate([spec]))
    period, rates = BANDWIDTH_TRACES[trace]
    report = BenchReport("query-auto", {"trace": trace, "queries": queries, "target_s": target_s})
    server = QueryServer(root, throttle_bps=rates[0]).start()
    try:
        with TraceThrottle(server, period, rates):
            # prime the estimator with one plain latest query
            request(server.endpoint, "q /camera/image 1", timeout=60)
            in_window = 0
            over_budget = 0
            for _ in range(queries):
                budget = server.estimate.bytes_per_second * target_s
                res = request(server.endpoint, f"qa /camera/image {target_s}", timeout=120)
                ok = abs(res.stats.query_duration - target_s) <= 0.5
                in_window += ok
                over = res.stats.bytes_returned > 1.1 * budget
                over_budget += over
                report.rows.append(
                    {"latency_s": res.stats.query_duration, "bytes": res.stats.bytes_returned,
                     "budget": budget, "in_window": bool(ok), "over_budget": bool(over)}
                )
    finally:
        server.shutdown()
    report.summary = {
        "queries": queries,
        "in_window_fraction": in_window / queries,
        "over_budget_count": over_budget,
        "mean_latency_s": statistics.fmean(r["latency_s"] for r in report.rows),
    }
    return report


def scenario_concurrent(
    workdir: Path | str,
    client_counts: tuple[int, ...] = (1, 2, 4, 8, 16),
    requests_per_client: int = 20,
    time_len: float = 1.0,
    seed: int = 10,
) -> BenchReport:
    """K parallel Query-Latest clients: reception rate and latency vs K."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    root = workdir / "concurrent.container"
    spec = TopicSpec("/camera/image", 30.0, 307_272, 30.0, "sensor_msgs/Image", seed)
    if not root.exists():
        record(root, generate([spec]))
    expected = QueryEngine(root)
    want = expected.latest(["/camera/image"], time_len).stats.messages_returned
    expected.close()
    report = BenchReport(
        "concurrent",
        {"client_counts": list(client_counts), "requests_per_client": requests_per_client},
    )
    server = QueryServer(root).start()
    try:
        for k in client_counts:
            latencies: list[float] = []
            complete = [0] * k
            lock = threading.Lock()

            def client(slot: int):
                got = 0
                for _ in range(requests_per_client):
                    try:
                        res = request(server.endpoint, f"q /camera/image {time_len}", timeout=60)
                    except Exception:
                        continue
                    if res.stats.messages_returned == want:
                        got += 1
                    with lock:
                        latencies.append(res.stats.query_duration)
                complete[slot] = got

            threads = [threading.Thread(target=client, args=(i,)) for i in range(k)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            received = sum(complete)
            rate = received / (k * requests_per_client)
            stats = latency_stats(latencies) if latencies else {"n": 0}
            report.rows.append({"clients": k, "reception_rate": rate, **stats})
            report.summary[f"reception_rate_k{k}"] = rate
            report.summary[f"mean_latency_k{k}_s"] = stats.get("mean", float("nan"))
    finally:
        server.shutdown()
    return report


SCENARIOS = {
    "offline-topic": scenario_offline_topic,
    "time-range": scenario_time_range,
    "query-latest": scenario_query_latest,
    "query-history": scenario_query_history,
    "query-auto": scenario_query_auto,
    "concurrent": scenario_concurrent,
}


def run_scenario(name: str, workdir: Path | str, **params) -> BenchReport:
    try:
        fn = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return fn(workdir, **params)
