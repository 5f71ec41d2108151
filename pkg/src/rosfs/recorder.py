"""Write path: streams messages into a container while keeping it
queryable (read-while-write).

Per-message ordering:
  1. frame appended to the topic's brick (buffered write)
  2. index entry inserted into the in-memory cache

A flush then (a) drains the cache, (b) pushes the touched bricks' bytes
to the OS - or to disk under the fsync policy - and only then (c)
commits index pages and the header with the new watermark. Any offset a
reader obtains from the committed index therefore points at fully
written bytes: the readable-prefix guarantee.

Exactly one thread calls ingest(); one background flusher drains the
cache; queries are pure readers and never block either.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from . import timeindex
from .container import (
    FRAME_HEADER_SIZE,
    INDEX_NAME,
    ContainerMetadata,
    ContainerWriter,
    Message,
    brick_path,
    read_metadata,
    scan_brick,
    write_metadata,
)
from .errors import CorruptIndex, OutOfOrderTimestamp
from .timeindex import IndexCache, TimeIndexWriter
from .topics import TopicManager

log = logging.getLogger(__name__)

_EOS = object()


@dataclass(slots=True)
class DurabilityPolicy:
    """How hard the write path pushes bytes toward the platter.

    sync: "buffered" flushes to the OS page cache at index publication
    (crash-of-process safe); "fsync" fdatasyncs bricks and index at each
    flush; "paranoid" additionally syncs every single record.
    out_of_order: "reject" drops late messages (counted and logged),
    "clamp" rewrites their timestamp to the topic's last, "strict" raises.
    """

    sync: str = "buffered"
    out_of_order: str = "reject"
    flush_max_pending: int = 256
    flush_interval: float = 0.1
    queue_size: int = 1024

    def __post_init__(self):
        if self.sync not in ("buffered", "fsync", "paranoid"):
            raise ValueError(f"unknown sync policy {self.sync!r}")
        if self.out_of_order not in ("reject", "clamp", "strict"):
            raise ValueError(f"unknown out_of_order policy {self.out_of_order!r}")


@dataclass(slots=True)
class SessionCounters:
    messages: int = 0
    payload_bytes: int = 0
    dropped: int = 0
    flushes: int = 0
    last_ts: dict[int, int] = field(default_factory=dict)
    last_seq: dict[int, int] = field(default_factory=dict)


class RecordSession:
    """One recording into a fresh container."""

    def __init__(
        self,
        root: Path | str,
        source: Iterable[Message] | None = None,
        policy: DurabilityPolicy | None = None,
        message_types: Mapping[str, str] | Callable[[str], str] | None = None,
    ):
        self.root = Path(root)
        self.policy = policy or DurabilityPolicy()
        self.source = source
        if message_types is None:
            message_types = getattr(source, "message_types", None)
        self._type_of = self._make_type_lookup(message_types)
        self.writer = ContainerWriter.create(self.root)
        self.topics = TopicManager(self.root, writer=self.writer)
        self.index = TimeIndexWriter.create(self.root / INDEX_NAME)
        self.cache = IndexCache(max_pending=self.policy.flush_max_pending)
        self.counters = SessionCounters()
        self._stop = threading.Event()
        self._flush_err: BaseException | None = None
        self._flush_lock = threading.Lock()
        self._flusher = threading.Thread(target=self._flusher_loop, name="rosfs-flusher", daemon=True)
        self._flusher.start()
        self._closed = False

    @staticmethod
    def _make_type_lookup(message_types) -> Callable[[str], str]:
        if message_types is None:
            return lambda topic: "unknown"
        if callable(message_types):
            return message_types
        return lambda topic: message_types.get(topic, "unknown")

    # -- ingest -----------------------------------------------------------

    def ingest(self, msg: Message) -> None:
        tid = self.topics.register(msg.topic, self._type_of(msg.topic))
        last = self.counters.last_ts.get(tid)
        if last is not None and msg.timestamp < last:
            if self.policy.out_of_order == "strict":
                raise OutOfOrderTimestamp(
                    f"timestamp {msg.timestamp} < {last} on {msg.topic!r}"
                )
            if self.policy.out_of_order == "reject":
                self.counters.dropped += 1
                log.warning(
                    "dropping out-of-order message on %s: %d < %d (%d dropped so far)",
                    msg.topic, msg.timestamp, last, self.counters.dropped,
                )
                return
            msg = Message(last, msg.topic, msg.payload)  # clamp
        if last is not None and msg.timestamp == last:
            seq = self.counters.last_seq[tid] + 1
        else:
            seq = 0
        offset = self.writer.append(tid, msg)
        if self.policy.sync == "paranoid":
            self.writer.flush_brick(tid, datasync=True)
        self.cache.insert((msg.timestamp, tid, seq), offset)
        self.counters.last_ts[tid] = msg.timestamp
        self.counters.last_seq[tid] = seq
        self.counters.messages += 1
        self.counters.payload_bytes += len(msg.payload)

    def run(self) -> None:
        """Pump the session's source through the bounded ingest queue.

        The producer (source iteration) runs on its own thread and blocks
        when the queue is full; this thread is the single ingester.
        """
        if self.source is None:
            raise ValueError("session has no source")
        q: queue.Queue = queue.Queue(maxsize=self.policy.queue_size)

        def produce():
            try:
                for msg in self.source:
                    q.put(msg)
                q.put(_EOS)
            except BaseException as e:  # surface in the consumer
                q.put(e)

        producer = threading.Thread(target=produce, name="rosfs-source", daemon=True)
        producer.start()
        while True:
            item = q.get()
            if item is _EOS:
                break
            if isinstance(item, BaseException):
                raise item
            self.ingest(item)
        producer.join()

    # -- flushing ---------------------------------------------------------

    def _sync_bricks_for(self, batch) -> None:
        # brick bytes must be visible before their index entries
        datasync = self.policy.sync in ("fsync", "paranoid")
        for tid in {key[1] for key, _ in batch}:
            self.writer.flush_brick(tid, datasync=datasync)

    def _flush_once(self) -> None:
        datasync = self.policy.sync in ("fsync", "paranoid")
        with self._flush_lock:
            had_pending = len(self.cache) > 0
            timeindex.flush_cache(
                self.cache, self.index, sync=datasync, after_drain=self._sync_bricks_for
            )
            if had_pending:
                self.counters.flushes += 1
                self.writer.write_metadata()

    def _flusher_loop(self) -> None:
        while not self._stop.is_set():
            self.cache.wait_for_work(self.policy.flush_interval)
            try:
                self._flush_once()
            except BaseException as e:
                self._flush_err = e
                log.error("index flush failed (will retry): %s", e)
                time.sleep(self.policy.flush_interval)
            else:
                self._flush_err = None

    @property
    def watermark(self):
        return self.index.watermark

    # -- shutdown ---------------------------------------------------------

    def close(self) -> ContainerMetadata:
        """Final flush, finalize metadata, leave the container cold-readable."""
        if self._closed:
            return self.writer.meta
        self._stop.set()
        self.cache.notify()
        self._flusher.join()
        self._flush_once()
        if self._flush_err is not None:
            raise self._flush_err
        self.index.close()
        meta = self.writer.close()
        self._closed = True
        return meta


def start_session(
    root: Path | str,
    source: Iterable[Message] | None = None,
    policy: DurabilityPolicy | None = None,
    message_types=None,
) -> RecordSession:
    return RecordSession(root, source, policy, message_types)


def record(
    root: Path | str,
    source: Iterable[Message],
    policy: DurabilityPolicy | None = None,
    message_types=None,
) -> ContainerMetadata:
    """Record a whole source into a new container and close it."""
    session = start_session(root, source, policy, message_types)
    try:
        session.run()
    finally:
        meta = session.close()
    return meta


def pace_messages(source: Iterable[Message], speed: float = 1.0) -> Iterable[Message]:
    """Replay a message stream at speed x real time (by timestamps)."""
    first_ts = None
    t0 = None
    for msg in source:
        if first_ts is None:
            first_ts = msg.timestamp
            t0 = time.monotonic()
        else:
            due = t0 + (msg.timestamp - first_ts) / 1e9 / speed
            delay = due - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        yield msg


# ---------------------------------------------------------------------------
# Crash recovery


def recover_container(root: Path | str) -> ContainerMetadata:
    """Bring a container left behind by a killed writer back to a
    consistent state.

    Reclaims uncommitted index pages, validates the committed tree,
    truncates torn brick tails, drops bricks never registered in
    metadata, recounts per-topic frames, and rewrites metadata. After
    this, every index entry at or below the watermark points at a fully
    readable record.
    """
    root = Path(root)
    idx_path = root / INDEX_NAME
    timeindex.truncate_orphan_pages(idx_path)
    reader, watermark = timeindex.recover(idx_path)
    try:
        meta = read_metadata(root)
        known = {t.topic_id for t in meta.topics}
        for p in root.glob("*.brick"):
            try:
                tid = int(p.stem)
            except ValueError:
                continue
            if tid not in known:
                p.unlink()  # registered after the last metadata write; has no committed entries

        start_ts = 0
        end_ts = 0
        valid_extent: dict[int, int] = {}
        for info in meta.topics:
            path = brick_path(root, info.topic_id)
            if not path.exists():
                raise CorruptIndex(f"metadata lists topic {info.topic_id} but {path.name} is missing")
            frames = 0
            valid = 0
            first_ts = last_ts = None
            for off, ts, plen in scan_brick(path):
                frames += 1
                valid = off + FRAME_HEADER_SIZE + plen
                if first_ts is None:
                    first_ts = ts
                last_ts = ts
            if path.stat().st_size > valid:
                with open(path, "r+b") as f:
                    f.truncate(valid)
            info.message_count = frames
            valid_extent[info.topic_id] = valid
            if first_ts is not None and (start_ts == 0 or first_ts < start_ts):
                start_ts = first_ts
            if last_ts is not None and last_ts > end_ts:
                end_ts = last_ts
        meta.start_timestamp = start_ts
        meta.end_timestamp = end_ts

        # every committed entry must reference a complete, matching frame
        from .container import ContainerReader

        creader = ContainerReader.open(root)
        try:
            for entry in reader.scan_all():
                tid = entry.key.topic_id
                if tid not in valid_extent or entry.offset >= valid_extent[tid]:
                    raise CorruptIndex(
                        f"index entry {tuple(entry.key)} points past brick extent"
                    )
                msg = creader.read_record_at(tid, entry.offset)
                if msg.timestamp != entry.key.timestamp:
                    raise CorruptIndex(
                        f"index entry {tuple(entry.key)} timestamp mismatch with brick"
                    )
        finally:
            creader.close()

        write_metadata(root, meta)
        return meta
    finally:
        reader.close()
