"""Network interface: textual query commands over a stream transport,
binary reply frames.

Request: one UTF-8 command line, LF-terminated, space-separated:

    q  topic1 ... topicN time_len        most recent time_len seconds
    qh topic1 ... topicN start end       closed range, seconds since epoch
    qa topic1 ... topicN target          budgeted by bandwidth estimate

Reply frame (little-endian, self-delimiting):

    magic         4s  b"RFSR"
    version       u8  = 1
    status        u8  0 = ok, 1 = error
    error_code    u16 0, or an errors.* code
    message_count u32
    records: message_count x
        topic_name_len u16, topic_name, timestamp u64, payload_len u32, payload

Error frames carry their text as the payload of a single record with
topic name "error" and timestamp 0. Connections are persistent: any
number of command/reply exchanges until the client closes. Each
connection gets its own read-only engine, so handlers run fully in
parallel; the bandwidth estimator is the one shared monitor, fed from
observed reply transmissions of at least 32 KiB.
"""

from __future__ import annotations

import logging
import math
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .container import Message
from .errors import (
    BadArity,
    BadCommand,
    BadFrame,
    BadParam,
    RosfsError,
    Timeout,
    error_class_for_code,
)
from .query import NS, BandwidthEstimate, QueryEngine, QueryResult, QueryStats

log = logging.getLogger(__name__)

FRAME_MAGIC = b"RFSR"
WIRE_VERSION = 1
STATUS_OK = 0
STATUS_ERROR = 1

FRAME_HEAD = struct.Struct("<4sBBHI")
REC_TOPIC_LEN = struct.Struct("<H")
REC_TS = struct.Struct("<Q")
REC_PAYLOAD_LEN = struct.Struct("<I")

MAX_COMMAND_LINE = 64 * 1024
MAX_WIRE_PAYLOAD = 1 << 30  # decode sanity bound
MIN_BANDWIDTH_SAMPLE = 32 * 1024  # ignore bursts the token bucket absorbs
SEND_CHUNK = 64 * 1024


# ---------------------------------------------------------------------------
# Command grammar


@dataclass(slots=True)
class QueryCommand:
    kind: str  # "latest" | "history" | "auto"
    topics: list[str]
    time_len: float | None = None  # latest/auto: seconds
    start_time: int | None = None  # history: ns
    end_time: int | None = None


def _numeric(token: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise BadParam(f"not a number: {token!r}") from None
    if math.isnan(value) or math.isinf(value) or value < 0:
        raise BadParam(f"parameter must be a non-negative decimal: {token!r}")
    return value


def parse_command(text: str) -> QueryCommand:
    tokens = text.split()
    if not tokens:
        raise BadCommand("empty command")
    verb = tokens[0]
    if verb == "q" or verb == "qa":
        if len(tokens) < 3:
            raise BadArity(f"{verb} needs at least one topic and a time parameter")
        time_len = _numeric(tokens[-1])
        return QueryCommand(
            kind="latest" if verb == "q" else "auto",
            topics=tokens[1:-1],
            time_len=time_len,
        )
    if verb == "qh":
        if len(tokens) < 4:
            raise BadArity("qh needs at least one topic, start_time and end_time")
        start = _numeric(tokens[-2])
        end = _numeric(tokens[-1])
        return QueryCommand(
            kind="history",
            topics=tokens[1:-2],
            start_time=round(start * NS),
            end_time=round(end * NS),
        )
    raise BadCommand(f"unknown verb {verb!r}")


# ---------------------------------------------------------------------------
# Frame encoding / decoding


def encode_records(records: list[tuple[str, Message]]) -> bytes:
    parts = [FRAME_HEAD.pack(FRAME_MAGIC, WIRE_VERSION, STATUS_OK, 0, len(records))]
    for name, msg in records:
        topic = name.encode("utf-8")
        parts.append(REC_TOPIC_LEN.pack(len(topic)))
        parts.append(topic)
        parts.append(REC_TS.pack(msg.timestamp))
        parts.append(REC_PAYLOAD_LEN.pack(len(msg.payload)))
        parts.append(msg.payload)
    return b"".join(parts)


def encode_error(code: int, text: str) -> bytes:
    payload = text.encode("utf-8")
    return b"".join(
        [
            FRAME_HEAD.pack(FRAME_MAGIC, WIRE_VERSION, STATUS_ERROR, code, 1),
            REC_TOPIC_LEN.pack(5),
            b"error",
            REC_TS.pack(0),
            REC_PAYLOAD_LEN.pack(len(payload)),
            payload,
        ]
    )


def read_frame(read_exact) -> tuple[int, int, list[tuple[str, Message]]]:
    """Decode one frame via read_exact(n) -> exactly n bytes.

    Returns (status, error_code, records). Error text rides as the
    single record's payload.
    """
    head = read_exact(FRAME_HEAD.size)
    magic, version, status, error_code, count = FRAME_HEAD.unpack(head)
    if magic != FRAME_MAGIC:
        raise BadFrame(f"bad frame magic {magic!r}")
    if version != WIRE_VERSION:
        raise BadFrame(f"unsupported wire version {version}")
    if status not in (STATUS_OK, STATUS_ERROR):
        raise BadFrame(f"bad status byte {status}")
    records: list[tuple[str, Message]] = []
    for _ in range(count):
        (tlen,) = REC_TOPIC_LEN.unpack(read_exact(REC_TOPIC_LEN.size))
        topic = read_exact(tlen).decode("utf-8", "replace")
        (ts,) = REC_TS.unpack(read_exact(REC_TS.size))
        (plen,) = REC_PAYLOAD_LEN.unpack(read_exact(REC_PAYLOAD_LEN.size))
        if plen > MAX_WIRE_PAYLOAD:
            raise BadFrame(f"implausible payload length {plen}")
        payload = read_exact(plen)
        records.append((topic, Message(ts, topic, payload)))
    return status, error_code, records


def decode_frame(buf: bytes) -> tuple[int, int, list[tuple[str, Message]]]:
    """Decode a complete frame held in memory (property tests, tools)."""
    pos = 0

    def read_exact(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise BadFrame(f"frame truncated at byte {pos}")
        out = buf[pos : pos + n]
        pos += n
        return out

    result = read_frame(read_exact)
    if pos != len(buf):
        raise BadFrame(f"{len(buf) - pos} trailing bytes after frame")
    return result


# ---------------------------------------------------------------------------
# Token bucket (outbound throttle; the test hook behind link emulation)


class TokenBucket:
    """Blocking token bucket; rate may be retuned while senders run."""

    def __init__(self, rate_bps: float, capacity: float | None = None):
        if rate_bps <= 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate_bps)
        self.capacity = capacity if capacity is not None else max(rate_bps * 0.05, 8192.0)
        self._tokens = self.capacity
        self._last = time.monotonic()
        self._lock = threading.Lock()

    def set_rate(self, rate_bps: float) -> None:
        with self._lock:
            self._refill()
            self.rate = float(rate_bps)
            self.capacity = max(rate_bps * 0.05, 8192.0)
            self._tokens = min(self._tokens, self.capacity)

    def _refill(self) -> None:
        now = time.monotonic()
        self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
        self._last = now

    def consume(self, amount: int) -> None:
        remaining = float(amount)
        while remaining > 0:
            with self._lock:
                self._refill()
                take = min(self._tokens, remaining)
                self._tokens -= take
                remaining -= take
                if remaining <= 0:
                    return
                wait = min(remaining, self.capacity) / self.rate
            time.sleep(min(wait, 0.05))  # bounded naps keep rate changes responsive


# ---------------------------------------------------------------------------
# Server


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server: QueryServer = self.server.rosfs  # type: ignore[attr-defined]
        try:
            engine = QueryEngine(server.root)
        except Exception as e:
            self._send(encode_error(getattr(e, "code", 1), str(e)), server)
            return
        try:
            while True:
                line = self.rfile.readline(MAX_COMMAND_LINE + 1)
                if not line:
                    return
                t0 = time.perf_counter()
                close_after = len(line) > MAX_COMMAND_LINE  # tail would parse as garbage
                try:
                    if close_after:
                        raise BadCommand("command line too long")
                    cmd = parse_command(line.decode("utf-8", "replace"))
                    result = server.execute(engine, cmd)
                    frame = encode_records(result.records)
                    status = "ok"
                except RosfsError as e:
                    frame = encode_error(e.code, str(e))
                    status = type(e).__name__
                service_time = time.perf_counter() - t0
                log.info(
                    "served %r -> %s, %d bytes, service time %.3f ms",
                    line.rstrip(b"\n").decode("utf-8", "replace"),
                    status,
                    len(frame),
                    service_time * 1e3,
                )
                self._send(frame, server)
                if close_after:
                    return
        except (ConnectionError, BrokenPipeError):
            pass
        finally:
            engine.close()

    def _send(self, frame: bytes, server: "QueryServer") -> None:
        t0 = time.perf_counter()
        bucket = server.bucket
        for i in range(0, len(frame), SEND_CHUNK):
            chunk = frame[i : i + SEND_CHUNK]
            if bucket is not None:
                bucket.consume(len(chunk))
            self.wfile.write(chunk)
        self.wfile.flush()
        elapsed = time.perf_counter() - t0
        if len(frame) >= MIN_BANDWIDTH_SAMPLE:
            server.estimate.update(len(frame), max(elapsed, 1e-6))


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class QueryServer:
    """Serves the wire protocol for one container; read-only."""

    def __init__(
        self,
        container_root: Path | str,
        host: str = "127.0.0.1",
        port: int = 0,
        throttle_bps: float | None = None,
    ):
        self.root = Path(container_root)
        QueryEngine(self.root).close()  # fail fast if the container is unreadable
        self.estimate = BandwidthEstimate()
        self.bucket: TokenBucket | None = TokenBucket(throttle_bps) if throttle_bps else None
        self._tcp = _TCPServer((host, port), _Handler)
        self._tcp.rosfs = self  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]

    def execute(self, engine: QueryEngine, cmd: QueryCommand) -> QueryResult:
        if cmd.kind == "latest":
            return engine.latest(cmd.topics, cmd.time_len)
        if cmd.kind == "history":
            return engine.history(cmd.topics, cmd.start_time, cmd.end_time)
        return engine.auto(cmd.topics, cmd.time_len, self.estimate)

    def throttle(self, bytes_per_second: float | None) -> None:
        """Rate-limit outbound replies (None removes the limit)."""
        if bytes_per_second is None:
            self.bucket = None
        elif self.bucket is None:
            self.bucket = TokenBucket(bytes_per_second)
        else:
            self.bucket.set_rate(bytes_per_second)

    def start(self) -> "QueryServer":
        self._thread = threading.Thread(target=self._tcp.serve_forever, name="rosfs-server", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._tcp.serve_forever()

    def shutdown(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()
        if self._thread:
            self._thread.join()


def serve(container_root: Path | str, endpoint: tuple[str, int] | str, **kw) -> QueryServer:
    host, port = parse_endpoint(endpoint)
    return QueryServer(container_root, host, port, **kw).start()


def throttle_link(server: QueryServer, bytes_per_second: float | None) -> None:
    server.throttle(bytes_per_second)


def parse_endpoint(endpoint: tuple[str, int] | str) -> tuple[str, int]:
    if isinstance(endpoint, tuple):
        return endpoint
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


# ---------------------------------------------------------------------------
# Client


def request(
    endpoint: tuple[str, int] | str, command_text: str, timeout: float = 30.0
) -> QueryResult:
    """One command/reply exchange; returns the decoded result with the
    round-trip latency in stats. In-band errors re-raise as their typed
    exception class."""
    host, port = parse_endpoint(endpoint)
    deadline = time.monotonic() + timeout
    t0 = time.perf_counter()
    try:
        with socket.create_connection((host, port), timeout=timeout) as sock:

            def read_exact(n: int) -> bytes:
                buf = bytearray()
                while len(buf) < n:
                    sock.settimeout(max(deadline - time.monotonic(), 0.001))
                    chunk = sock.recv(min(n - len(buf), 1 << 20))
                    if not chunk:
                        raise BadFrame(f"connection closed mid-frame ({len(buf)}/{n} bytes)")
                    buf.extend(chunk)
                return bytes(buf)

            line = command_text.rstrip("\n") + "\n"
            sock.sendall(line.encode("utf-8"))
            status, error_code, records = read_frame(read_exact)
    except socket.timeout:
        raise Timeout(f"no reply from {host}:{port} within {timeout} s") from None
    latency = time.perf_counter() - t0
    if status == STATUS_ERROR:
        text = records[0][1].payload.decode("utf-8", "replace") if records else ""
        raise error_class_for_code(error_code)(text)
    stats = QueryStats(
        messages_returned=len(records),
        bytes_returned=sum(len(m.payload) for _, m in records),
        query_duration=latency,
    )
    return QueryResult(records, stats)
