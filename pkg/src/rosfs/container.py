"""Topic container: on-disk layout and brick file access.

A container is a single-level directory:

    <root>/metadata      line-oriented UTF-8 text, rewritten atomically
    <root>/time.idx      persistent time index (see timeindex)
    <root>/<id>.brick    one append-only file per topic, named by topic id

Brick record frame (little-endian, no gaps between records):

    payload_len: u32
    timestamp:   u64   nanoseconds since Unix epoch
    payload:     payload_len bytes

Timestamps within one brick are non-decreasing. Offsets returned by
append are the frame start positions; offset(k+1) = offset(k) + 12 +
payload_len(k).

Metadata file format (format_version 1):

    rosfs-container 1
    topic_count N
    start_timestamp <ns>
    end_timestamp <ns>
    topic <id> <message_count> <quoted type> <quoted name>

Topic ids are dense integers from 0 in first-seen order. Names and types
are percent-quoted so whitespace can never break the line structure.

One writer per container; any number of concurrent read-only readers.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import quote, unquote

from .errors import (
    AlreadyExists,
    CorruptMetadata,
    CorruptRecord,
    OutOfBounds,
    OutOfOrderTimestamp,
    UnknownTopic,
)

FORMAT_VERSION = 1
METADATA_NAME = "metadata"
INDEX_NAME = "time.idx"

FRAME_HEADER = struct.Struct("<IQ")  # payload_len, timestamp
FRAME_HEADER_SIZE = FRAME_HEADER.size  # 12

MAX_PAYLOAD = 2**32 - 1

_READ_CHUNK = 8 * 1024 * 1024


@dataclass(slots=True)
class Message:
    """A timestamped, topic-tagged opaque payload."""

    timestamp: int  # ns since Unix epoch, > 0
    topic: str
    payload: bytes


def validate_message(msg: Message) -> None:
    if msg.timestamp <= 0:
        raise ValueError(f"timestamp must be positive, got {msg.timestamp}")
    if not msg.topic:
        raise ValueError("topic name must be non-empty")
    if len(msg.payload) > MAX_PAYLOAD:
        raise ValueError(f"payload too large: {len(msg.payload)} bytes")


@dataclass(slots=True)
class TopicInfo:
    topic_id: int
    topic_name: str
    message_type: str
    message_count: int


@dataclass(slots=True)
class ContainerMetadata:
    format_version: int = FORMAT_VERSION
    start_timestamp: int = 0
    end_timestamp: int = 0
    topics: list[TopicInfo] = field(default_factory=list)

    @property
    def topic_count(self) -> int:
        return len(self.topics)


def brick_name(topic_id: int) -> str:
    return f"{topic_id}.brick"


def brick_path(root: Path, topic_id: int) -> Path:
    return Path(root) / brick_name(topic_id)


# ---------------------------------------------------------------------------
# Metadata file


def encode_metadata(meta: ContainerMetadata) -> str:
    lines = [
        f"rosfs-container {meta.format_version}",
        f"topic_count {meta.topic_count}",
        f"start_timestamp {meta.start_timestamp}",
        f"end_timestamp {meta.end_timestamp}",
    ]
    for t in meta.topics:
        lines.append(
            "topic %d %d %s %s"
            % (t.topic_id, t.message_count, quote(t.message_type, safe="/"), quote(t.topic_name, safe="/"))
        )
    return "\n".join(lines) + "\n"


def decode_metadata(text: str) -> ContainerMetadata:
    lines = [ln for ln in text.split("\n") if ln]
    if not lines:
        raise CorruptMetadata("metadata file is empty")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "rosfs-container":
        raise CorruptMetadata(f"bad metadata header: {lines[0]!r}")
    try:
        version = int(head[1])
    except ValueError:
        raise CorruptMetadata(f"bad format version: {head[1]!r}") from None
    if version != FORMAT_VERSION:
        raise CorruptMetadata(f"unsupported format version {version}")

    fields: dict[str, int] = {}
    topics: list[TopicInfo] = []
    for ln in lines[1:]:
        parts = ln.split()
        try:
            if parts[0] == "topic":
                if len(parts) != 5:
                    raise CorruptMetadata(f"bad topic line: {ln!r}")
                topics.append(
                    TopicInfo(
                        topic_id=int(parts[1]),
                        message_count=int(parts[2]),
                        message_type=unquote(parts[3]),
                        topic_name=unquote(parts[4]),
                    )
                )
            elif parts[0] in ("topic_count", "start_timestamp", "end_timestamp"):
                if len(parts) != 2:
                    raise CorruptMetadata(f"bad line: {ln!r}")
                fields[parts[0]] = int(parts[1])
            else:
                raise CorruptMetadata(f"unknown metadata key: {parts[0]!r}")
        except (ValueError, IndexError):
            raise CorruptMetadata(f"unparseable metadata line: {ln!r}") from None

    for key in ("topic_count", "start_timestamp", "end_timestamp"):
        if key not in fields:
            raise CorruptMetadata(f"missing metadata key {key!r}")
    if fields["topic_count"] != len(topics):
        raise CorruptMetadata(
            f"topic_count {fields['topic_count']} != {len(topics)} topic lines"
        )
    for i, t in enumerate(topics):
        if t.topic_id != i:
            raise CorruptMetadata(f"non-dense topic ids: expected {i}, got {t.topic_id}")

    return ContainerMetadata(
        format_version=version,
        start_timestamp=fields["start_timestamp"],
        end_timestamp=fields["end_timestamp"],
        topics=topics,
    )


def read_metadata(root: Path | str) -> ContainerMetadata:
    path = Path(root) / METADATA_NAME
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CorruptMetadata(f"no metadata file in {root}") from None
    return decode_metadata(text)


def write_metadata(root: Path | str, meta: ContainerMetadata) -> None:
    """Atomically rewrite the metadata file (write-temp-then-rename)."""
    root = Path(root)
    fd, tmp = tempfile.mkstemp(prefix=".metadata.", dir=root)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(encode_metadata(meta))
        os.replace(tmp, root / METADATA_NAME)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# ---------------------------------------------------------------------------
# Writer


class ContainerWriter:
    """Single-writer handle: creates the container and appends records.

    Not safe for simultaneous use by multiple writer threads; may be
    moved between threads.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.meta = ContainerMetadata()
        self._bricks: dict[int, io.BufferedWriter] = {}
        self._brick_sizes: dict[int, int] = {}
        self._last_ts: dict[int, int] = {}
        self._byte_counts: dict[int, int] = {}
        self._closed = False

    @classmethod
    def create(cls, root: Path | str) -> "ContainerWriter":
        root = Path(root)
        if root.exists():
            if not root.is_dir() or any(root.iterdir()):
                raise AlreadyExists(f"{root} exists and is not an empty directory")
        else:
            root.mkdir(parents=True)
        writer = cls(root)
        write_metadata(root, writer.meta)
        (root / INDEX_NAME).touch()  # empty index; header written on first flush
        return writer

    def add_topic(self, topic_name: str, message_type: str = "unknown") -> int:
        """Register a new topic: assign the next dense id, create its brick.

        Idempotence lives in the TopicManager; calling this twice for one
        name creates a duplicate entry.
        """
        if not topic_name:
            raise ValueError("topic name must be non-empty")
        topic_id = len(self.meta.topics)
        self.meta.topics.append(TopicInfo(topic_id, topic_name, message_type, 0))
        path = brick_path(self.root, topic_id)
        f = open(path, "ab")
        self._bricks[topic_id] = f
        self._brick_sizes[topic_id] = 0
        self._byte_counts[topic_id] = 0
        write_metadata(self.root, self.meta)
        return topic_id

    def append(self, topic_id: int, msg: Message) -> int:
        """Frame and append one record; returns its start offset."""
        f = self._bricks.get(topic_id)
        if f is None:
            raise UnknownTopic(f"topic id {topic_id} is not registered")
        validate_message(msg)
        last = self._last_ts.get(topic_id)
        if last is not None and msg.timestamp < last:
            raise OutOfOrderTimestamp(
                f"timestamp {msg.timestamp} < last {last} on topic id {topic_id}"
            )
        offset = self._brick_sizes[topic_id]
        f.write(FRAME_HEADER.pack(len(msg.payload), msg.timestamp))
        f.write(msg.payload)
        self._brick_sizes[topic_id] = offset + FRAME_HEADER_SIZE + len(msg.payload)
        self._byte_counts[topic_id] += len(msg.payload)
        self._last_ts[topic_id] = msg.timestamp
        info = self.meta.topics[topic_id]
        info.message_count += 1
        if self.meta.start_timestamp == 0 or msg.timestamp < self.meta.start_timestamp:
            self.meta.start_timestamp = msg.timestamp
        if msg.timestamp > self.meta.end_timestamp:
            self.meta.end_timestamp = msg.timestamp
        return offset

    def brick_size(self, topic_id: int) -> int:
        return self._brick_sizes[topic_id]

    def payload_bytes(self, topic_id: int) -> int:
        return self._byte_counts[topic_id]

    def flush_brick(self, topic_id: int, datasync: bool = False) -> None:
        """Push buffered brick bytes to the OS (optionally to disk)."""
        f = self._bricks[topic_id]
        f.flush()
        if datasync:
            os.fdatasync(f.fileno())

    def sync_all(self, datasync: bool = False) -> None:
        for tid in self._bricks:
            self.flush_brick(tid, datasync=datasync)

    def write_metadata(self) -> None:
        write_metadata(self.root, self.meta)

    def close(self) -> ContainerMetadata:
        if self._closed:
            return self.meta
        self.sync_all()
        self.write_metadata()
        for f in self._bricks.values():
            f.close()
        self._closed = True
        return self.meta


def create_container(root: Path | str) -> ContainerWriter:
    return ContainerWriter.create(root)


# ---------------------------------------------------------------------------
# Reader


class ContainerReader:
    """Read-only container handle; safe alongside one active writer.

    Each reader owns its file descriptors, so any number of readers may
    run concurrently (threads or processes).
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.meta = read_metadata(self.root)
        self._fds: dict[int, int] = {}

    @classmethod
    def open(cls, root: Path | str) -> "ContainerReader":
        return cls(root)

    def refresh(self) -> None:
        """Re-read metadata; picks up topics registered since open."""
        self.meta = read_metadata(self.root)

    def _fd(self, topic_id: int) -> int:
        fd = self._fds.get(topic_id)
        if fd is None:
            path = brick_path(self.root, topic_id)
            try:
                fd = os.open(path, os.O_RDONLY)
            except FileNotFoundError:
                raise UnknownTopic(f"no brick file for topic id {topic_id}") from None
            self._fds[topic_id] = fd
        return fd

    def brick_size(self, topic_id: int) -> int:
        return os.fstat(self._fd(topic_id)).st_size

    def read_record_at(self, topic_id: int, offset: int) -> Message:
        """Read the single record starting at offset."""
        fd = self._fd(topic_id)
        size = os.fstat(fd).st_size
        if offset < 0 or offset >= size:
            raise OutOfBounds(f"offset {offset} past end of brick ({size} bytes)")
        header = os.pread(fd, FRAME_HEADER_SIZE, offset)
        if len(header) < FRAME_HEADER_SIZE:
            raise CorruptRecord(f"truncated frame header at offset {offset}")
        plen, ts = FRAME_HEADER.unpack(header)
        if offset + FRAME_HEADER_SIZE + plen > size:
            raise CorruptRecord(
                f"frame at offset {offset} overruns brick end ({plen} byte payload)"
            )
        payload = os.pread(fd, plen, offset + FRAME_HEADER_SIZE)
        if len(payload) < plen:
            raise CorruptRecord(f"short payload read at offset {offset}")
        return Message(ts, self._topic_name(topic_id), payload)

    def record_end(self, topic_id: int, offset: int) -> int:
        """One-past-the-end offset of the record starting at offset."""
        fd = self._fd(topic_id)
        header = os.pread(fd, FRAME_HEADER_SIZE, offset)
        if len(header) < FRAME_HEADER_SIZE:
            raise CorruptRecord(f"truncated frame header at offset {offset}")
        plen, _ = FRAME_HEADER.unpack(header)
        return offset + FRAME_HEADER_SIZE + plen

    def iter_frames(self, topic_id: int, start_offset: int, end_offset: int):
        """Yield (offset, timestamp, payload) for records in [start, end).

        Reads in bounded chunks so arbitrarily large ranges do not
        require the whole span in memory at once.
        """
        if start_offset > end_offset:
            raise OutOfBounds(f"start {start_offset} > end {end_offset}")
        if start_offset == end_offset:
            return
        fd = self._fd(topic_id)
        size = os.fstat(fd).st_size
        if end_offset > size:
            raise OutOfBounds(f"end offset {end_offset} past brick end ({size} bytes)")
        pos = start_offset
        buf = b""
        buf_start = start_offset
        while pos < end_offset:
            have = buf_start + len(buf) - pos
            if have < FRAME_HEADER_SIZE:
                buf = buf[pos - buf_start :]
                buf_start = pos
                want = min(_READ_CHUNK, end_offset - buf_start - len(buf))
                chunk = os.pread(fd, want, buf_start + len(buf))
                if not chunk:
                    raise CorruptRecord(f"unexpected EOF at offset {pos}")
                buf += chunk
            rel = pos - buf_start
            if len(buf) - rel < FRAME_HEADER_SIZE:
                raise CorruptRecord(f"truncated frame header at offset {pos}")
            plen, ts = FRAME_HEADER.unpack_from(buf, rel)
            frame_end = pos + FRAME_HEADER_SIZE + plen
            if frame_end > end_offset:
                raise CorruptRecord(
                    f"frame at offset {pos} overruns range end {end_offset}"
                )
            while buf_start + len(buf) < frame_end:
                want = min(_READ_CHUNK, end_offset - buf_start - len(buf))
                chunk = os.pread(fd, want, buf_start + len(buf))
                if not chunk:
                    raise CorruptRecord(f"unexpected EOF inside frame at offset {pos}")
                buf += chunk
            rel = pos - buf_start
            payload = bytes(buf[rel + FRAME_HEADER_SIZE : rel + FRAME_HEADER_SIZE + plen])
            yield pos, ts, payload
            pos = frame_end

    def read_sequential(self, topic_id: int, start_offset: int, end_offset: int) -> list[Message]:
        """All records in [start_offset, end_offset), in file order."""
        name = self._topic_name(topic_id)
        return [
            Message(ts, name, payload)
            for _, ts, payload in self.iter_frames(topic_id, start_offset, end_offset)
        ]

    def _topic_name(self, topic_id: int) -> str:
        if topic_id < len(self.meta.topics):
            return self.meta.topics[topic_id].topic_name
        # topic registered after our last refresh
        self.refresh()
        if topic_id < len(self.meta.topics):
            return self.meta.topics[topic_id].topic_name
        raise UnknownTopic(f"topic id {topic_id} not in metadata")

    def close(self) -> None:
        for fd in self._fds.values():
            os.close(fd)
        self._fds.clear()


def open_container(root: Path | str) -> ContainerReader:
    return ContainerReader.open(root)


# ---------------------------------------------------------------------------
# Brick scanning (framing traversal; used by recovery and invariant checks)


def scan_brick(path: Path | str):
    """Yield (offset, timestamp, payload_len) for every complete frame.

    Stops before a torn tail (a final partial frame), which a killed
    writer can leave behind; use scan_brick_extent to locate it.
    """
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        pos = 0
        while pos + FRAME_HEADER_SIZE <= size:
            header = f.read(FRAME_HEADER_SIZE)
            if len(header) < FRAME_HEADER_SIZE:
                break
            plen, ts = FRAME_HEADER.unpack(header)
            if pos + FRAME_HEADER_SIZE + plen > size:
                break
            yield pos, ts, plen
            f.seek(plen, os.SEEK_CUR)
            pos += FRAME_HEADER_SIZE + plen


def scan_brick_extent(path: Path | str) -> tuple[int, int, int]:
    """Return (complete_frames, valid_bytes, file_bytes) for a brick."""
    path = Path(path)
    count = 0
    valid = 0
    for off, _, plen in scan_brick(path):
        count += 1
        valid = off + FRAME_HEADER_SIZE + plen
    return count, valid, path.stat().st_size
