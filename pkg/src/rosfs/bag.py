"""ROS bag v2.0 reader/writer and bag -> container conversion.

Only uncompressed chunks are supported; bz2/lz4 raise a typed error.

Bag layout:

    #ROSBAG V2.0\n
    <bag header record, padded to 4096 bytes>
    <chunk record> <index data records...>   (repeated)
    <connection records> <chunk info records>   (the trailing index)

Every record is <header_len u32><header><data_len u32><data>; a header
is a sequence of fields <field_len u32><name>=<value>, all little-endian.
The 'op' field selects the record type; message-data records carry
'conn' and 'time' (secs u32 + nsecs u32). Index-data and chunk-info
records are consumed opportunistically: parsing works in stream order
and survives their absence.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Mapping

from .container import ContainerMetadata, Message
from .errors import CorruptBag, NotABag, UnsupportedCompression
from .recorder import DurabilityPolicy, pace_messages, record

BAG_MAGIC = b"#ROSBAG V2.0\n"

OP_MESSAGE_DATA = 0x02
OP_BAG_HEADER = 0x03
OP_INDEX_DATA = 0x04
OP_CHUNK = 0x05
OP_CHUNK_INFO = 0x06
OP_CONNECTION = 0x07

BAG_HEADER_RECORD_LEN = 4096  # padded so it can be rewritten in place

U32 = struct.Struct("<I")
U64 = struct.Struct("<Q")
TIME = struct.Struct("<II")  # secs, nsecs

_MAX_HEADER_LEN = 16 * 1024 * 1024


@dataclass(slots=True)
class BagRecord:
    header_fields: dict[str, bytes]
    data: bytes
    start: int  # file offset of the record
    data_start: int  # file offset of the data blob

    @property
    def op(self) -> int:
        return _op_of(self.header_fields, self.start)


@dataclass(slots=True)
class Connection:
    conn_id: int
    topic: str
    msg_type: str


@dataclass(slots=True)
class BagMessage:
    topic: str
    timestamp: int  # ns
    payload: bytes
    conn_id: int


def _time_to_ns(raw: bytes, offset: int) -> int:
    if len(raw) != 8:
        raise CorruptBag(f"time field is {len(raw)} bytes, want 8", offset=offset)
    secs, nsecs = TIME.unpack(raw)
    return secs * 1_000_000_000 + nsecs


def _ns_to_time(ns: int) -> bytes:
    return TIME.pack(ns // 1_000_000_000, ns % 1_000_000_000)


def parse_header_fields(raw: bytes, base_offset: int = 0) -> dict[str, bytes]:
    """Decode a record header blob into {field name: raw value}."""
    fields: dict[str, bytes] = {}
    pos = 0
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise CorruptBag("truncated header field length", offset=base_offset + pos)
        (flen,) = U32.unpack_from(raw, pos)
        pos += 4
        if flen == 0 or pos + flen > len(raw):
            raise CorruptBag(f"header field overruns header ({flen} bytes)", offset=base_offset + pos)
        field = raw[pos : pos + flen]
        eq = field.find(b"=")
        if eq < 0:
            raise CorruptBag("header field without '='", offset=base_offset + pos)
        try:
            name = field[:eq].decode("ascii")
        except UnicodeDecodeError:
            raise CorruptBag("non-ascii header field name", offset=base_offset + pos) from None
        fields[name] = field[eq + 1 :]
        pos += flen
    return fields


def _encode_fields(fields: dict[str, bytes]) -> bytes:
    parts = []
    for name, value in fields.items():
        body = name.encode("ascii") + b"=" + value
        parts.append(U32.pack(len(body)) + body)
    return b"".join(parts)


def encode_record(fields: dict[str, bytes], data: bytes) -> bytes:
    header = _encode_fields(fields)
    return U32.pack(len(header)) + header + U32.pack(len(data)) + data


def read_record(f: BinaryIO) -> BagRecord | None:
    """Read one record at the current position.

    Returns None at a clean EOF; raises CorruptBag, with the byte
    offset, on truncation.
    """
    start = f.tell()
    raw = f.read(4)
    if not raw:
        return None
    if len(raw) < 4:
        raise CorruptBag("truncated record header length", offset=start)
    (hlen,) = U32.unpack(raw)
    if hlen > _MAX_HEADER_LEN:
        raise CorruptBag(f"implausible header length {hlen}", offset=start)
    header = f.read(hlen)
    if len(header) < hlen:
        raise CorruptBag("truncated record header", offset=start)
    raw = f.read(4)
    if len(raw) < 4:
        raise CorruptBag("truncated record data length", offset=start)
    (dlen,) = U32.unpack(raw)
    data_start = start + 4 + hlen + 4
    data = f.read(dlen)
    if len(data) < dlen:
        raise CorruptBag(f"truncated record data ({dlen} bytes claimed)", offset=start)
    return BagRecord(parse_header_fields(header, start + 4), data, start, data_start)


def _op_of(fields: dict[str, bytes], offset: int) -> int:
    op = fields.get("op")
    if op is None or len(op) != 1:
        raise CorruptBag("record without 1-byte op field", offset=offset)
    return op[0]


def _u32_field(fields: dict[str, bytes], name: str, offset: int) -> int:
    raw = fields.get(name)
    if raw is None or len(raw) != 4:
        raise CorruptBag(f"missing/odd u32 field {name!r}", offset=offset)
    return U32.unpack(raw)[0]


def _u64_field(fields: dict[str, bytes], name: str, offset: int) -> int:
    raw = fields.get(name)
    if raw is None or len(raw) != 8:
        raise CorruptBag(f"missing/odd u64 field {name!r}", offset=offset)
    return U64.unpack(raw)[0]


class BagFile:
    """Open bag: connection table plus a streaming message iterator."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self._f = open(self.path, "rb")
        magic = self._f.read(len(BAG_MAGIC))
        if magic != BAG_MAGIC:
            self._f.close()
            raise NotABag(f"{self.path} does not start with {BAG_MAGIC!r}")
        self.connections: dict[int, Connection] = {}
        self.index_pos = 0
        self.chunk_count = 0
        self._data_start = self._f.tell()
        self._read_bag_header()
        self._scan_trailing_index()

    def _read_bag_header(self) -> None:
        rec = read_record(self._f)
        if rec is None:
            raise CorruptBag("bag ends before the bag header record", offset=self._data_start)
        if rec.op != OP_BAG_HEADER:
            raise CorruptBag("first record is not the bag header", offset=rec.start)
        fields = rec.header_fields
        self.index_pos = _u64_field(fields, "index_pos", rec.start) if "index_pos" in fields else 0
        self.chunk_count = _u32_field(fields, "chunk_count", rec.start) if "chunk_count" in fields else 0
        self._data_start = self._f.tell()

    def _scan_trailing_index(self) -> None:
        """Read the connection records after index_pos, if present."""
        if self.index_pos == 0:
            return  # unindexed (in-progress) bag: discover inline
        size = os.fstat(self._f.fileno()).st_size
        if self.index_pos > size:
            raise CorruptBag(f"index_pos {self.index_pos} beyond EOF", offset=self.index_pos)
        self._f.seek(self.index_pos)
        while True:
            rec = read_record(self._f)
            if rec is None:
                break
            if rec.op == OP_CONNECTION:
                self._add_connection(rec.header_fields, rec.data, rec.start)
        self._f.seek(self._data_start)

    def _add_connection(self, fields: dict[str, bytes], data: bytes, offset: int) -> None:
        conn_id = _u32_field(fields, "conn", offset)
        topic_raw = fields.get("topic")
        if topic_raw is None:
            raise CorruptBag("connection record without topic", offset=offset)
        conn_fields = parse_header_fields(data, offset)
        msg_type = conn_fields.get("type", b"").decode("utf-8", "replace")
        topic = topic_raw.decode("utf-8", "replace")
        self.connections[conn_id] = Connection(conn_id, topic, msg_type)

    def topic_types(self) -> dict[str, str]:
        return {c.topic: c.msg_type for c in self.connections.values()}

    def _iter_embedded(self, data: bytes, base: int) -> Iterator[BagMessage]:
        """Records inside an uncompressed chunk blob."""
        import io

        sub = io.BytesIO(data)
        while True:
            start = base + sub.tell()
            try:
                rec = read_record(sub)
            except CorruptBag as e:
                raise CorruptBag(str(e), offset=start) from None
            if rec is None:
                return
            op = _op_of(rec.header_fields, start)
            if op == OP_CONNECTION:
                self._add_connection(rec.header_fields, rec.data, start)
            elif op == OP_MESSAGE_DATA:
                yield self._message(rec.header_fields, rec.data, start)

    def _message(self, fields: dict[str, bytes], payload: bytes, offset: int) -> BagMessage:
        conn_id = _u32_field(fields, "conn", offset)
        conn = self.connections.get(conn_id)
        if conn is None:
            raise CorruptBag(f"message references unknown connection {conn_id}", offset=offset)
        ts = _time_to_ns(fields.get("time", b""), offset)
        return BagMessage(conn.topic, ts, payload, conn_id)

    def read_messages(self) -> Iterator[BagMessage]:
        """Every message-data record, in chunk order."""
        self._f.seek(self._data_start)
        end = self.index_pos if self.index_pos else None
        while True:
            pos = self._f.tell()
            if end is not None and pos >= end:
                return
            rec = read_record(self._f)
            if rec is None:
                return
            op = rec.op
            if op == OP_CHUNK:
                compression = rec.header_fields.get("compression", b"none").decode("ascii", "replace")
                if compression != "none":
                    raise UnsupportedCompression(
                        f"chunk at offset {rec.start} uses {compression!r} compression"
                    )
                yield from self._iter_embedded(rec.data, rec.data_start)
            elif op == OP_CONNECTION:
                self._add_connection(rec.header_fields, rec.data, rec.start)
            elif op == OP_MESSAGE_DATA:
                yield self._message(rec.header_fields, rec.data, rec.start)  # unchunked tolerance
            # index data / chunk info records are skipped

    def close(self) -> None:
        self._f.close()

    def __enter__(self) -> "BagFile":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_bag(path: Path | str) -> BagFile:
    return BagFile(path)


parse_bag = open_bag


# ---------------------------------------------------------------------------
# Writer (fixture generator: structurally valid uncompressed v2.0)


class BagWriter:
    def __init__(self, path: Path | str, chunk_threshold: int = 768 * 1024):
        self.path = Path(path)
        self.chunk_threshold = chunk_threshold
        self._f = open(self.path, "wb")
        self._f.write(BAG_MAGIC)
        self._bag_header_pos = self._f.tell()
        self._write_bag_header(index_pos=0, conn_count=0, chunk_count=0)
        self._conns: dict[str, Connection] = {}
        self._chunk = bytearray()
        self._chunk_index: dict[int, list[tuple[int, int]]] = {}
        self._chunk_start_time = 0
        self._chunk_end_time = 0
        self._chunk_new_conns: list[Connection] = []
        self._chunk_infos: list[tuple[int, int, int, dict[int, int]]] = []
        self._closed = False

    def _write_bag_header(self, index_pos: int, conn_count: int, chunk_count: int) -> None:
        fields = {
            "op": bytes([OP_BAG_HEADER]),
            "index_pos": U64.pack(index_pos),
            "conn_count": U32.pack(conn_count),
            "chunk_count": U32.pack(chunk_count),
        }
        header = _encode_fields(fields)
        pad = BAG_HEADER_RECORD_LEN - 4 - len(header) - 4
        self._f.write(U32.pack(len(header)) + header + U32.pack(pad) + b" " * pad)

    def _conn_record(self, conn: Connection) -> bytes:
        data = _encode_fields(
            {
                "topic": conn.topic.encode(),
                "type": conn.msg_type.encode(),
                "md5sum": b"*",
                "message_definition": b"",
            }
        )
        return encode_record(
            {"op": bytes([OP_CONNECTION]), "conn": U32.pack(conn.conn_id), "topic": conn.topic.encode()},
            data,
        )

    def add_connection(self, topic: str, msg_type: str) -> Connection:
        conn = self._conns.get(topic)
        if conn is None:
            conn = Connection(len(self._conns), topic, msg_type)
            self._conns[topic] = conn
            self._chunk_new_conns.append(conn)
        return conn

    def write(self, topic: str, timestamp: int, payload: bytes, msg_type: str = "unknown") -> None:
        conn = self.add_connection(topic, msg_type)
        if conn in self._chunk_new_conns:
            # connection record precedes its first message inside the chunk
            self._chunk.extend(self._conn_record(conn))
            self._chunk_new_conns.remove(conn)
        offset = len(self._chunk)
        self._chunk.extend(
            encode_record(
                {
                    "op": bytes([OP_MESSAGE_DATA]),
                    "conn": U32.pack(conn.conn_id),
                    "time": _ns_to_time(timestamp),
                },
                payload,
            )
        )
        self._chunk_index.setdefault(conn.conn_id, []).append((timestamp, offset))
        if not self._chunk_start_time or timestamp < self._chunk_start_time:
            self._chunk_start_time = timestamp
        self._chunk_end_time = max(self._chunk_end_time, timestamp)
        if len(self._chunk) >= self.chunk_threshold:
            self._flush_chunk()

    def _flush_chunk(self) -> None:
        if not self._chunk:
            return
        chunk_pos = self._f.tell()
        data = bytes(self._chunk)
        self._f.write(
            encode_record(
                {"op": bytes([OP_CHUNK]), "compression": b"none", "size": U32.pack(len(data))},
                data,
            )
        )
        counts: dict[int, int] = {}
        for conn_id, entries in sorted(self._chunk_index.items()):
            counts[conn_id] = len(entries)
            blob = b"".join(_ns_to_time(ts) + U32.pack(off) for ts, off in entries)
            self._f.write(
                encode_record(
                    {
                        "op": bytes([OP_INDEX_DATA]),
                        "ver": U32.pack(1),
                        "conn": U32.pack(conn_id),
                        "count": U32.pack(len(entries)),
                    },
                    blob,
                )
            )
        self._chunk_infos.append((chunk_pos, self._chunk_start_time, self._chunk_end_time, counts))
        self._chunk.clear()
        self._chunk_index.clear()
        self._chunk_start_time = 0
        self._chunk_end_time = 0

    def close(self) -> None:
        if self._closed:
            return
        self._flush_chunk()
        index_pos = self._f.tell()
        for conn in self._conns.values():
            self._f.write(self._conn_record(conn))
        for chunk_pos, start, end, counts in self._chunk_infos:
            blob = b"".join(U32.pack(cid) + U32.pack(n) for cid, n in counts.items())
            self._f.write(
                encode_record(
                    {
                        "op": bytes([OP_CHUNK_INFO]),
                        "ver": U32.pack(1),
                        "chunk_pos": U64.pack(chunk_pos),
                        "start_time": _ns_to_time(start) if start else U64.pack(0),
                        "end_time": _ns_to_time(end) if end else U64.pack(0),
                        "count": U32.pack(len(counts)),
                    },
                    blob,
                )
            )
        self._f.seek(self._bag_header_pos)
        self._write_bag_header(index_pos, len(self._conns), len(self._chunk_infos))
        self._f.close()
        self._closed = True

    def __enter__(self) -> "BagWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_bag(
    path: Path | str,
    messages: Iterable[Message],
    connections: Mapping[str, str] | None = None,
    chunk_threshold: int = 768 * 1024,
) -> int:
    """Emit a structurally valid uncompressed v2.0 bag; returns count."""
    connections = dict(connections or {})
    n = 0
    with BagWriter(path, chunk_threshold=chunk_threshold) as w:
        for topic, msg_type in connections.items():
            w.add_connection(topic, msg_type)
        for msg in messages:
            w.write(msg.topic, msg.timestamp, msg.payload, connections.get(msg.topic, "unknown"))
            n += 1
    return n


# ---------------------------------------------------------------------------
# Conversion: replay a bag through the recorder


def convert_bag_to_container(
    bag_path: Path | str,
    container_root: Path | str,
    realtime: bool = False,
    policy: DurabilityPolicy | None = None,
) -> ContainerMetadata:
    """Drive a recording session with the bag's messages in chunk order.

    The parser feeds the recorder through its bounded queue (two
    threads); per-topic message order and payloads carry over exactly.
    """
    with open_bag(bag_path) as bag:
        source = (Message(m.timestamp, m.topic, m.payload) for m in bag.read_messages())
        if realtime:
            source = pace_messages(source)
        return record(
            container_root,
            source,
            policy=policy,
            message_types=lambda topic: bag.topic_types().get(topic, "unknown"),
        )
