"""Query engine: the three query commands against a local container.

Query-Latest returns the window (watermark_ts - time_len, watermark_ts];
Query-History the closed range [start, end]; Query-Auto sizes a latest
window from a bandwidth estimate so the reply fits a response-time
budget. All three resolve topic ids, range-search the committed time
index, then read each topic's brick sequentially between the returned
offsets - queries only ever see state at or below the watermark, even
while a recorder is appending.

Results group messages by topic in request order, each group in
timestamp order.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .container import FRAME_HEADER_SIZE, INDEX_NAME, ContainerReader, Message
from .errors import InvalidRange, NoBandwidthEstimate, RosfsError
from .timeindex import TimeIndexReader
from .topics import TopicManager

NS = 1_000_000_000

DEFAULT_EWMA_ALPHA = 0.3  # weight retained by the previous estimate
DEFAULT_SAMPLE_WINDOW = 1.0  # seconds
DEFAULT_MIN_TIME_LEN = 0.05  # seconds; Query-Auto never shrinks below this


@dataclass(slots=True)
class QueryStats:
    messages_returned: int = 0
    bytes_returned: int = 0
    query_duration: float = 0.0
    watermark: tuple | None = None  # full index key the answer reflects
    time_len: float | None = None  # Query-Auto's chosen window
    stale: bool = False  # empty index or stale bandwidth estimate

    @property
    def watermark_ts(self) -> int | None:
        return self.watermark[0] if self.watermark is not None else None


@dataclass(slots=True)
class QueryResult:
    records: list[tuple[str, Message]] = field(default_factory=list)
    stats: QueryStats = field(default_factory=QueryStats)

    def groups(self) -> list[tuple[str, list[Message]]]:
        """Consecutive same-topic records as (topic, messages) groups."""
        out: list[tuple[str, list[Message]]] = []
        for name, msg in self.records:
            if not out or out[-1][0] != name:
                out.append((name, []))
            out[-1][1].append(msg)
        return out


class BandwidthEstimate:
    """EWMA link-rate estimate shared between server threads.

    new_estimate = alpha * previous + (1 - alpha) * observed_rate; alpha
    is the retention weight, so samples dominate quickly (alpha = 0.3
    leaves ~0.3^n of the old estimate after n samples). Estimates older
    than 2x the sample window count as stale.
    """

    def __init__(self, alpha: float = DEFAULT_EWMA_ALPHA, window: float = DEFAULT_SAMPLE_WINDOW):
        if not 0.0 <= alpha < 1.0:
            raise ValueError(f"alpha must be in [0, 1), got {alpha}")
        self.alpha = alpha
        self.window = window
        self._rate: float | None = None
        self.last_updated: int = 0  # monotonic ns
        self._lock = threading.Lock()

    def update(self, bytes_sent: int, elapsed: float) -> float:
        if elapsed <= 0:
            raise ValueError("elapsed must be positive")
        sample = bytes_sent / elapsed
        with self._lock:
            if self._rate is None:
                self._rate = sample
            else:
                self._rate = self.alpha * self._rate + (1.0 - self.alpha) * sample
            self.last_updated = time.monotonic_ns()
            return self._rate

    @property
    def bytes_per_second(self) -> float | None:
        return self._rate

    @property
    def available(self) -> bool:
        return self._rate is not None

    def is_stale(self, now_ns: int | None = None) -> bool:
        if self._rate is None:
            return True
        now_ns = time.monotonic_ns() if now_ns is None else now_ns
        return (now_ns - self.last_updated) > 2 * self.window * NS


def update_bandwidth(estimate: BandwidthEstimate, bytes_sent: int, elapsed: float) -> BandwidthEstimate:
    estimate.update(bytes_sent, elapsed)
    return estimate


class QueryEngine:
    """Read-only view over one container; many may run concurrently."""

    def __init__(self, root: Path | str, use_mmap: bool = True):
        self.root = Path(root)
        self.reader = ContainerReader.open(self.root)
        self.topics = TopicManager.from_metadata(self.root, self.reader.meta)
        self.index = TimeIndexReader.open(self.root / INDEX_NAME, use_mmap=use_mmap)

    def refresh(self) -> None:
        self.reader.refresh()
        self.topics.load(self.reader.meta)
        self.index.refresh()

    def close(self) -> None:
        self.index.close()
        self.reader.close()

    # -- internals ---------------------------------------------------------

    def _resolve(self, topic_names: list[str]) -> list[int]:
        self.refresh()
        return [self.topics.lookup(name) for name in topic_names]

    def _end_of(self, topic_id: int, last_offset: int) -> int:
        return self.reader.record_end(topic_id, last_offset)

    def _full_span_applies(self, lo_ts: int, hi_ts: int, include_start: bool) -> bool:
        """Whole-recording queries can skip the index and read bricks
        end to end - the point of one brick per topic. Only safe when
        the committed index covers every ingested message (quiescent or
        finalized container); otherwise the index path is authoritative.
        """
        meta = self.reader.meta
        total = sum(t.message_count for t in meta.topics)
        if total == 0 or self.index.entry_count != total:
            return False
        covers_start = lo_ts < meta.start_timestamp if not include_start else lo_ts <= meta.start_timestamp
        return covers_start and hi_ts >= meta.end_timestamp

    def _query_window(
        self,
        topic_names: list[str],
        topic_ids: list[int],
        lo_ts: int,
        hi_ts: int,
        include_start: bool,
    ) -> list[tuple[str, Message]]:
        meta = self.reader.meta
        by_pos: dict[int, list[Message]] = {}
        remaining = list(range(len(topic_ids)))
        if self._full_span_applies(lo_ts, hi_ts, include_start):
            still = []
            for pos in remaining:
                tid = topic_ids[pos]
                count = meta.topics[tid].message_count
                if count == 0:
                    by_pos[pos] = []
                    continue
                try:
                    msgs = self.reader.read_sequential(tid, 0, self.reader.brick_size(tid))
                except RosfsError:
                    msgs = None
                if msgs is None or len(msgs) != count:
                    still.append(pos)  # raced a writer: index path decides
                else:
                    by_pos[pos] = msgs
            remaining = still
        if remaining:
            ranges = self.index.search_range(
                lo_ts, hi_ts, [topic_ids[p] for p in remaining], self._end_of, include_start
            )
            for pos in remaining:
                start, end, count = ranges[topic_ids[pos]]
                by_pos[pos] = (
                    self.reader.read_sequential(topic_ids[pos], start, end) if count else []
                )
        records: list[tuple[str, Message]] = []
        for pos, name in enumerate(topic_names):
            records.extend((name, m) for m in by_pos[pos])
        return records

    @staticmethod
    def _finish(records, t0, **extra) -> QueryResult:
        stats = QueryStats(
            messages_returned=len(records),
            bytes_returned=sum(len(m.payload) for _, m in records),
            query_duration=time.perf_counter() - t0,
            **extra,
        )
        return QueryResult(records, stats)

    # -- the three commands -------------------------------------------------

    def latest(self, topic_names: list[str], time_len: float) -> QueryResult:
        """Messages with timestamp in (watermark_ts - time_len, watermark_ts]."""
        t0 = time.perf_counter()
        if time_len <= 0:
            raise InvalidRange(f"time_len must be positive, got {time_len}")
        topic_ids = self._resolve(topic_names)
        wm = self.index.watermark
        if wm is None:
            return self._finish([], t0, stale=True)
        lo = max(wm.timestamp - round(time_len * NS), 0)
        records = self._query_window(topic_names, topic_ids, lo, wm.timestamp, include_start=False)
        return self._finish(records, t0, watermark=wm)

    def history(self, topic_names: list[str], start_time: int, end_time: int) -> QueryResult:
        """Messages with timestamp in the closed range [start, end] (ns)."""
        t0 = time.perf_counter()
        if start_time > end_time:
            raise InvalidRange(f"start {start_time} > end {end_time}")
        topic_ids = self._resolve(topic_names)
        records = self._query_window(topic_names, topic_ids, start_time, end_time, include_start=True)
        return self._finish(records, t0, watermark=self.index.watermark)

    def auto(
        self,
        topic_names: list[str],
        target_response: float,
        estimate: BandwidthEstimate,
        min_time_len: float = DEFAULT_MIN_TIME_LEN,
    ) -> QueryResult:
        """Latest-window query sized so the reply fits the byte budget
        bytes_per_second x target_response at the estimated link rate."""
        t0 = time.perf_counter()
        if target_response <= 0:
            raise InvalidRange(f"target_response must be positive, got {target_response}")
        if estimate is None or not estimate.available:
            raise NoBandwidthEstimate("no bandwidth sample recorded yet")
        budget = estimate.bytes_per_second * target_response

        topic_ids = self._resolve(topic_names)
        meta = self.reader.meta
        duration = max((meta.end_timestamp - meta.start_timestamp) / NS, min_time_len)

        # per-topic production rate from metadata counters + brick sizes
        data_rates: dict[int, float] = {}
        for tid in topic_ids:
            count = meta.topics[tid].message_count
            if count <= 0 or duration <= 0:
                continue
            mean_size = (self.reader.brick_size(tid) - FRAME_HEADER_SIZE * count) / count
            data_rates[tid] = max(mean_size, 0.0) * (count / duration)
        total_rate = sum(data_rates.values())

        # window arithmetic in ns; the cap is one ns past the recording
        # span so "whole recording" really includes the first message
        # despite the half-open window
        cap_ns = max(meta.end_timestamp - meta.start_timestamp, 0) + 1
        if total_rate > 0:
            time_len_ns = round(budget / total_rate * NS)
        else:
            time_len_ns = cap_ns
        time_len_ns = min(max(time_len_ns, round(min_time_len * NS)), cap_ns)
        time_len = time_len_ns / NS

        wm = self.index.watermark
        if wm is None:
            return self._finish([], t0, stale=True, time_len=time_len)
        lo = max(wm.timestamp - time_len_ns, 0)
        window = self._query_window(topic_names, topic_ids, lo, wm.timestamp, include_start=False)

        # enforce the budget exactly: trim oldest messages per topic,
        # shares proportional to topic data rates
        records: list[tuple[str, Message]] = []
        for name, tid in zip(topic_names, topic_ids):
            msgs = [m for n, m in window if n == name]
            if not msgs:
                continue
            share = budget * (data_rates.get(tid, 0.0) / total_rate) if total_rate else budget
            kept: list[Message] = []
            used = 0
            for msg in reversed(msgs):  # newest first
                if used + len(msg.payload) > share:
                    break
                kept.append(msg)
                used += len(msg.payload)
            kept.reverse()
            records.extend((name, m) for m in kept)
        return self._finish(
            records, t0, watermark=wm, time_len=time_len, stale=estimate.is_stale()
        )


def open_engine(root: Path | str, use_mmap: bool = True) -> QueryEngine:
    return QueryEngine(root, use_mmap=use_mmap)
