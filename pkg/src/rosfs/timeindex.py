"""Persistent time index: on-disk B+ tree over (timestamp, topic, seq).

Maps composite keys (timestamp ns, topic_id, seq) to byte offsets in the
topic's brick file. A single inserter feeds an in-memory cache of pending
entries; a flusher drains it into the tree; any number of readers run
range and latest lookups against the committed state.

time.idx layout (little-endian, fixed page size, default 4096):

  page 0 (header):
    magic        4s   b"TIDX"
    version      u16  = 1
    page_size    u32
    checksum_alg u8   = 1 (crc32)
    pad          u8
    root_page    u64  page id of the root node (0 = empty tree)
    n_pages      u64  committed page count, including this page
    entry_count  u64
    watermark    u64 + u32 + u32  largest committed key (zeros = none)
    checksum     u32  crc32 of the page with this field zeroed

  node pages:
    node_type    u8   1 = leaf, 2 = internal
    pad          u8
    key_count    u16
    checksum     u32  crc32 of the page with this field zeroed
    leaf:     key_count x (ts u64, topic u32, seq u32, offset u64)
    internal: child0 u64, then key_count x (key 16 bytes, child u64)

Committed pages are immutable: every flush writes modified nodes to
freshly allocated pages and commits by rewriting the header last. A
writer killed mid-flush leaves the previous committed tree untouched;
pages past the committed n_pages are orphans, reclaimed on reopen.
Readers therefore never need locks - they re-read the header (checksum
verified, with retry against a torn concurrent header write) and walk
immutable pages below the committed n_pages.
"""

from __future__ import annotations

import os
import struct
import threading
import time
import zlib
from bisect import bisect_left, bisect_right, insort
from pathlib import Path
from typing import Callable, Iterable, Iterator, NamedTuple

from .errors import CorruptIndex, OutOfOrderTimestamp

MAGIC = b"TIDX"
VERSION = 1
DEFAULT_PAGE_SIZE = 4096
CHECKSUM_CRC32 = 1

HEADER = struct.Struct("<4sHIBBQQQQIII")
NODE_HEADER = struct.Struct("<BBHI")  # type, pad, key_count, checksum
LEAF_ENTRY = struct.Struct("<QIIQ")
KEY = struct.Struct("<QII")
CHILD = struct.Struct("<Q")
INTERNAL_ENTRY = struct.Struct("<QIIQ")  # key + child id

NODE_LEAF = 1
NODE_INTERNAL = 2

U32_MAX = 0xFFFFFFFF
U64_MAX = 0xFFFFFFFFFFFFFFFF


class IndexKey(NamedTuple):
    timestamp: int
    topic_id: int
    seq: int


class IndexEntry(NamedTuple):
    key: IndexKey
    offset: int


def min_key_at(timestamp: int) -> IndexKey:
    return IndexKey(timestamp, 0, 0)


def max_key_at(timestamp: int) -> IndexKey:
    return IndexKey(timestamp, U32_MAX, U32_MAX)


def _page_checksum(page: bytearray, cksum_off: int) -> int:
    stored = struct.unpack_from("<I", page, cksum_off)[0]
    struct.pack_into("<I", page, cksum_off, 0)
    actual = zlib.crc32(page)
    struct.pack_into("<I", page, cksum_off, stored)
    return actual


def leaf_capacity(page_size: int) -> int:
    return (page_size - NODE_HEADER.size) // LEAF_ENTRY.size


def internal_capacity(page_size: int) -> int:
    """Max separator keys per internal node; branching factor is +1."""
    return (page_size - NODE_HEADER.size - CHILD.size) // INTERNAL_ENTRY.size


class _Node:
    __slots__ = ("page_id", "leaf", "keys", "vals", "children")

    def __init__(self, page_id: int, leaf: bool):
        self.page_id = page_id
        self.leaf = leaf
        self.keys: list[tuple] = []
        self.vals: list[int] = []  # leaf only
        self.children: list[int] = []  # internal only

    def encode(self, page_size: int) -> bytes:
        buf = bytearray(page_size)
        ntype = NODE_LEAF if self.leaf else NODE_INTERNAL
        NODE_HEADER.pack_into(buf, 0, ntype, 0, len(self.keys), 0)
        pos = NODE_HEADER.size
        if self.leaf:
            for (ts, tid, seq), off in zip(self.keys, self.vals):
                LEAF_ENTRY.pack_into(buf, pos, ts, tid, seq, off)
                pos += LEAF_ENTRY.size
        else:
            CHILD.pack_into(buf, pos, self.children[0])
            pos += CHILD.size
            for key, child in zip(self.keys, self.children[1:]):
                INTERNAL_ENTRY.pack_into(buf, pos, key[0], key[1], key[2], child)
                pos += INTERNAL_ENTRY.size
        struct.pack_into("<I", buf, 4, zlib.crc32(bytes(buf[:4]) + b"\0\0\0\0" + bytes(buf[8:])))
        return bytes(buf)

    @classmethod
    def decode(cls, page_id: int, page: bytes) -> "_Node":
        ntype, _, count, stored = NODE_HEADER.unpack_from(page, 0)
        actual = zlib.crc32(page[:4] + b"\0\0\0\0" + page[8:])
        if actual != stored:
            raise CorruptIndex(f"checksum mismatch on page {page_id}", page_id=page_id)
        if ntype not in (NODE_LEAF, NODE_INTERNAL):
            raise CorruptIndex(f"bad node type {ntype} on page {page_id}", page_id=page_id)
        node = cls(page_id, ntype == NODE_LEAF)
        pos = NODE_HEADER.size
        if node.leaf:
            end = pos + count * LEAF_ENTRY.size
            if end > len(page):
                raise CorruptIndex(f"leaf overflows page {page_id}", page_id=page_id)
            for ts, tid, seq, off in LEAF_ENTRY.iter_unpack(page[pos:end]):
                node.keys.append((ts, tid, seq))
                node.vals.append(off)
        else:
            end = pos + CHILD.size + count * INTERNAL_ENTRY.size
            if end > len(page):
                raise CorruptIndex(f"internal node overflows page {page_id}", page_id=page_id)
            node.children.append(CHILD.unpack_from(page, pos)[0])
            for ts, tid, seq, child in INTERNAL_ENTRY.iter_unpack(page[pos + CHILD.size : end]):
                node.keys.append((ts, tid, seq))
                node.children.append(child)
        return node


class _Header:
    __slots__ = ("root_page", "n_pages", "entry_count", "watermark")

    def __init__(self, root_page=0, n_pages=1, entry_count=0, watermark=None):
        self.root_page = root_page
        self.n_pages = n_pages
        self.entry_count = entry_count
        self.watermark: IndexKey | None = watermark

    def encode(self, page_size: int) -> bytes:
        wm = self.watermark or (0, 0, 0)
        buf = bytearray(page_size)
        HEADER.pack_into(
            buf, 0, MAGIC, VERSION, page_size, CHECKSUM_CRC32, 0,
            self.root_page, self.n_pages, self.entry_count,
            wm[0], wm[1], wm[2], 0,
        )
        cksum_off = HEADER.size - 4
        struct.pack_into("<I", buf, cksum_off, 0)
        struct.pack_into("<I", buf, cksum_off, zlib.crc32(buf))
        return bytes(buf)

    @classmethod
    def decode(cls, page: bytes) -> "_Header":
        (magic, version, page_size, alg, _, root, n_pages, count,
         wm_ts, wm_topic, wm_seq, stored) = HEADER.unpack_from(page, 0)
        if magic != MAGIC:
            raise CorruptIndex(f"bad magic {magic!r}", page_id=0)
        if version != VERSION:
            raise CorruptIndex(f"unsupported index version {version}", page_id=0)
        if alg != CHECKSUM_CRC32:
            raise CorruptIndex(f"unknown checksum algorithm {alg}", page_id=0)
        if page_size != len(page):
            raise CorruptIndex(f"header page_size {page_size} != page length", page_id=0)
        buf = bytearray(page)
        cksum_off = HEADER.size - 4
        struct.pack_into("<I", buf, cksum_off, 0)
        if zlib.crc32(buf) != stored:
            raise CorruptIndex("header checksum mismatch", page_id=0)
        wm = IndexKey(wm_ts, wm_topic, wm_seq) if (wm_ts, wm_topic, wm_seq) != (0, 0, 0) else None
        return cls(root, n_pages, count, wm)


# ---------------------------------------------------------------------------
# Writer


class TimeIndexWriter:
    """Single-threaded tree mutator with copy-on-write commits.

    insert() only touches memory; commit() makes the state durable and
    visible to readers. If commit fails, the in-memory tree keeps the
    uncommitted entries and the next commit retries the page writes -
    nothing is lost and readers never see a partial flush.
    """

    def __init__(self, path: Path | str, page_size: int = DEFAULT_PAGE_SIZE):
        self.path = Path(path)
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT)
        size = os.fstat(self._fd).st_size
        if size >= HEADER.size:
            stored = struct.unpack("<I", os.pread(self._fd, 4, 6))[0]
            if stored < HEADER.size or stored > 1 << 20:
                raise CorruptIndex(f"implausible page size {stored}", page_id=0)
            page_size = stored
            self.page_size = page_size
            self._hdr = _Header.decode(os.pread(self._fd, page_size, 0))
            if size > self._hdr.n_pages * page_size:
                # orphans from an interrupted flush; reclaim
                os.ftruncate(self._fd, self._hdr.n_pages * page_size)
        else:
            self.page_size = page_size
            self._hdr = _Header()
            os.pwrite(self._fd, self._hdr.encode(page_size), 0)
        self._alloc = self._hdr.n_pages
        self._cache: dict[int, _Node] = {}
        self._dirty: set[int] = set()
        self._mem_root = self._hdr.root_page
        self._mem_count = self._hdr.entry_count
        self._mem_watermark = self._hdr.watermark
        self._leaf_cap = leaf_capacity(page_size)
        self._internal_cap = internal_capacity(page_size)

    @classmethod
    def create(cls, path: Path | str, page_size: int = DEFAULT_PAGE_SIZE) -> "TimeIndexWriter":
        return cls(path, page_size)

    @property
    def watermark(self) -> IndexKey | None:
        return self._hdr.watermark

    @property
    def entry_count(self) -> int:
        return self._hdr.entry_count

    def _node(self, page_id: int) -> _Node:
        node = self._cache.get(page_id)
        if node is None:
            page = os.pread(self._fd, self.page_size, page_id * self.page_size)
            if len(page) < self.page_size:
                raise CorruptIndex(f"short read of page {page_id}", page_id=page_id)
            node = _Node.decode(page_id, page)
            if len(self._cache) > 8192:
                for pid in [p for p in self._cache if p not in self._dirty][:4096]:
                    del self._cache[pid]
            self._cache[page_id] = node
        return node

    def _alloc_page(self) -> int:
        pid = self._alloc
        self._alloc += 1
        return pid

    def _make_dirty(self, node: _Node, parent: _Node | None) -> None:
        """Move a committed node to a fresh page id (copy-on-write)."""
        if node.page_id in self._dirty:
            return
        old_id = node.page_id
        new_id = self._alloc_page()
        self._cache.pop(old_id, None)
        node.page_id = new_id
        self._cache[new_id] = node
        self._dirty.add(new_id)
        if parent is None:
            self._mem_root = new_id
        else:
            parent.children[parent.children.index(old_id)] = new_id

    def insert(self, key: tuple, offset: int) -> None:
        key = tuple(key)
        if self._mem_root == 0:
            root = _Node(self._alloc_page(), leaf=True)
            self._cache[root.page_id] = root
            self._dirty.add(root.page_id)
            self._mem_root = root.page_id
            path = [root]
        else:
            path = []
            node = self._node(self._mem_root)
            self._make_dirty(node, None)
            path.append(node)
            while not node.leaf:
                child = self._node(node.children[bisect_right(node.keys, key)])
                self._make_dirty(child, node)
                path.append(child)
                node = child
        leaf = path[-1]
        pos = bisect_left(leaf.keys, key)
        if pos < len(leaf.keys) and leaf.keys[pos] == key:
            raise OutOfOrderTimestamp(f"duplicate index key {key}")
        leaf.keys.insert(pos, key)
        leaf.vals.insert(pos, offset)
        self._mem_count += 1
        if self._mem_watermark is None or key > tuple(self._mem_watermark):
            self._mem_watermark = IndexKey(*key)
        self._split_path(path)

    def _split_path(self, path: list[_Node]) -> None:
        for i in range(len(path) - 1, -1, -1):
            node = path[i]
            cap = self._leaf_cap if node.leaf else self._internal_cap
            if len(node.keys) <= cap:
                return
            right = _Node(self._alloc_page(), leaf=node.leaf)
            self._cache[right.page_id] = right
            self._dirty.add(right.page_id)
            if node.leaf:
                mid = len(node.keys) // 2
                right.keys = node.keys[mid:]
                right.vals = node.vals[mid:]
                del node.keys[mid:]
                del node.vals[mid:]
                sep = right.keys[0]
            else:
                mid = len(node.keys) // 2
                sep = node.keys[mid]
                right.keys = node.keys[mid + 1 :]
                right.children = node.children[mid + 1 :]
                del node.keys[mid:]
                del node.children[mid + 1 :]
            if i == 0:
                new_root = _Node(self._alloc_page(), leaf=False)
                new_root.keys = [sep]
                new_root.children = [node.page_id, right.page_id]
                self._cache[new_root.page_id] = new_root
                self._dirty.add(new_root.page_id)
                self._mem_root = new_root.page_id
            else:
                parent = path[i - 1]
                pos = bisect_left(parent.keys, sep)
                parent.keys.insert(pos, sep)
                parent.children.insert(pos + 1, right.page_id)

    def insert_many(self, entries: Iterable[tuple]) -> None:
        """Insert (key, offset) pairs; sorted insertion order for locality."""
        for key, offset in sorted(entries):
            self.insert(key, offset)

    def commit(self, sync: bool = False) -> IndexKey | None:
        """Write dirty pages, then the header. No-op when nothing changed."""
        if not self._dirty:
            return self._hdr.watermark
        for pid in sorted(self._dirty):
            os.pwrite(self._fd, self._cache[pid].encode(self.page_size), pid * self.page_size)
        if sync:
            os.fdatasync(self._fd)
        new_hdr = _Header(self._mem_root, self._alloc, self._mem_count, self._mem_watermark)
        os.pwrite(self._fd, new_hdr.encode(self.page_size), 0)
        if sync:
            os.fdatasync(self._fd)
        self._hdr = new_hdr
        self._dirty.clear()
        return self._hdr.watermark

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1


# ---------------------------------------------------------------------------
# Reader


class _PageSource:
    """Reads fixed pages through mmap when available, pread otherwise.

    The access path must not change observable behavior; mmap is remapped
    as the file grows.
    """

    def __init__(self, fd: int, page_size: int, use_mmap: bool):
        self._fd = fd
        self._page_size = page_size
        self._mm = None
        self._use_mmap = use_mmap
        if use_mmap:
            try:
                import mmap  # noqa: F401
            except ImportError:
                self._use_mmap = False

    def read(self, page_id: int) -> bytes:
        ps = self._page_size
        start = page_id * ps
        if self._use_mmap:
            if self._mm is None or start + ps > len(self._mm):
                self._remap()
            if self._mm is not None and start + ps <= len(self._mm):
                return bytes(self._mm[start : start + ps])
        return os.pread(self._fd, ps, start)

    def _remap(self):
        import mmap

        size = os.fstat(self._fd).st_size
        if self._mm is not None:
            self._mm.close()
            self._mm = None
        if size > 0:
            self._mm = mmap.mmap(self._fd, size, prot=mmap.PROT_READ)

    def close(self):
        if self._mm is not None:
            self._mm.close()
            self._mm = None


class TimeIndexReader:
    """Read-only view of the committed tree; safe beside a live writer."""

    _HEADER_RETRIES = 8

    def __init__(self, path: Path | str, use_mmap: bool = True):
        self.path = Path(path)
        self._fd = os.open(self.path, os.O_RDONLY)
        self._use_mmap = use_mmap
        self._pages: _PageSource | None = None
        self._hdr: _Header | None = None
        self.page_size = DEFAULT_PAGE_SIZE
        self.refresh()

    @classmethod
    def open(cls, path: Path | str, use_mmap: bool = True) -> "TimeIndexReader":
        return cls(path, use_mmap=use_mmap)

    def refresh(self) -> None:
        """Re-read the committed header; picks up new flushes."""
        size = os.fstat(self._fd).st_size
        if size < HEADER.size:
            self._hdr = None  # index not initialized yet: empty
            return
        last_err = None
        for attempt in range(self._HEADER_RETRIES):
            raw = os.pread(self._fd, max(size if size < 65536 else 65536, HEADER.size), 0)
            try:
                page_size = struct.unpack_from("<I", raw, 6)[0]
                if page_size < HEADER.size or page_size > 1 << 20:
                    raise CorruptIndex(f"implausible page size {page_size}", page_id=0)
                page = raw[:page_size]
                if len(page) < page_size:
                    page = os.pread(self._fd, page_size, 0)
                self._hdr = _Header.decode(page)
                if self.page_size != page_size or self._pages is None:
                    self.page_size = page_size
                    if self._pages:
                        self._pages.close()
                    self._pages = _PageSource(self._fd, page_size, self._use_mmap)
                return
            except (CorruptIndex, struct.error) as e:
                # may be a torn concurrent header write; retry briefly
                last_err = e
                time.sleep(0.001 * (attempt + 1))
        raise last_err if isinstance(last_err, CorruptIndex) else CorruptIndex(str(last_err), page_id=0)

    @property
    def watermark(self) -> IndexKey | None:
        return self._hdr.watermark if self._hdr else None

    @property
    def entry_count(self) -> int:
        return self._hdr.entry_count if self._hdr else 0

    def _node(self, page_id: int) -> _Node:
        if self._hdr and page_id >= self._hdr.n_pages:
            raise CorruptIndex(f"page {page_id} beyond committed extent", page_id=page_id)
        page = self._pages.read(page_id)
        if len(page) < self.page_size:
            raise CorruptIndex(f"short read of page {page_id}", page_id=page_id)
        return _Node.decode(page_id, page)

    def _iter_leaves_from(self, page_id: int, lo: tuple) -> Iterator[_Node]:
        node = self._node(page_id)
        if node.leaf:
            yield node
            return
        start = bisect_right(node.keys, lo)
        yield from self._iter_leaves_from(node.children[start], lo)
        for child in node.children[start + 1 :]:
            yield from self._iter_leaves_all(child)

    def _iter_leaves_all(self, page_id: int) -> Iterator[_Node]:
        node = self._node(page_id)
        if node.leaf:
            yield node
            return
        for child in node.children:
            yield from self._iter_leaves_all(child)

    def scan(self, lo: tuple, hi: tuple) -> Iterator[IndexEntry]:
        """Entries with lo <= key <= hi, in key order."""
        if self._hdr is None or self._hdr.root_page == 0:
            return
        lo = tuple(lo)
        hi = tuple(hi)
        if lo > hi:
            return
        first = True
        for leaf in self._iter_leaves_from(self._hdr.root_page, lo):
            keys = leaf.keys
            start = bisect_left(keys, lo) if first else 0
            first = False
            for i in range(start, len(keys)):
                key = keys[i]
                if key > hi:
                    return
                yield IndexEntry(IndexKey(*key), leaf.vals[i])

    def scan_all(self) -> Iterator[IndexEntry]:
        return self.scan((0, 0, 0), (U64_MAX, U32_MAX, U32_MAX))

    def search_range(
        self,
        start_time: int,
        end_time: int,
        topic_ids: Iterable[int],
        end_of: Callable[[int, int], int],
        include_start: bool = True,
    ) -> dict[int, tuple[int, int, int]]:
        """Per-topic (start_offset, end_offset, count) for keys in range.

        end_of(topic_id, last_offset) resolves one-past-the-end of the
        last selected record (the frame length lives in the brick, not
        here). Topics with nothing in range yield (0, 0, 0).
        """
        topic_ids = list(topic_ids)
        lo = (start_time if include_start else start_time + 1, 0, 0)
        hi = (end_time, U32_MAX, U32_MAX)
        wanted = set(topic_ids)
        first: dict[int, int] = {}
        last: dict[int, int] = {}
        count: dict[int, int] = {}
        for (ts, tid, seq), off in self.scan(lo, hi):
            if tid in wanted:
                if tid not in first:
                    first[tid] = off
                    count[tid] = 0
                last[tid] = off
                count[tid] += 1
        out: dict[int, tuple[int, int, int]] = {}
        for tid in topic_ids:
            if tid in first:
                out[tid] = (first[tid], end_of(tid, last[tid]), count[tid])
            else:
                out[tid] = (0, 0, 0)
        return out

    def search_latest(
        self,
        topic_ids: Iterable[int],
        time_len_ns: int,
        end_of: Callable[[int, int], int],
    ) -> tuple[dict[int, tuple[int, int, int]], IndexKey]:
        """Offsets for the window (watermark_ts - time_len, watermark_ts].

        Returns the watermark key alongside so callers can pin exactly
        which committed prefix the answer reflects.
        """
        from .errors import EmptyIndex

        wm = self.watermark
        if wm is None:
            raise EmptyIndex("time index has no committed entries")
        start = max(wm.timestamp - time_len_ns, 0)
        ranges = self.search_range(start, wm.timestamp, topic_ids, end_of, include_start=False)
        return ranges, wm

    def validate(self) -> dict:
        """Full structural check: checksums, key order, balance, occupancy.

        Returns stats; raises CorruptIndex (with page id) on any defect.
        """
        if self._hdr is None:
            return {"entries": 0, "leaves": 0, "internals": 0, "height": 0}
        if self._hdr.root_page == 0:
            if self._hdr.entry_count != 0 or self._hdr.watermark is not None:
                raise CorruptIndex("empty tree with nonzero header counters", page_id=0)
            return {"entries": 0, "leaves": 0, "internals": 0, "height": 0}
        stats = {"entries": 0, "leaves": 0, "internals": 0, "height": 0}
        last_key: list[tuple | None] = [None]
        min_children = (internal_capacity(self.page_size) + 1 + 1) // 2

        def walk(page_id: int, lo, hi, depth: int, is_root: bool):
            node = self._node(page_id)
            if node.leaf:
                stats["leaves"] += 1
                if stats["height"] == 0:
                    stats["height"] = depth
                elif stats["height"] != depth:
                    raise CorruptIndex(f"leaf {page_id} at uneven depth", page_id=page_id)
                stats["entries"] += len(node.keys)
                for key in node.keys:
                    if last_key[0] is not None and key <= last_key[0]:
                        raise CorruptIndex(f"key order violation in page {page_id}", page_id=page_id)
                    if (lo is not None and key < lo) or (hi is not None and key >= hi):
                        raise CorruptIndex(f"key outside separator bounds in page {page_id}", page_id=page_id)
                    last_key[0] = key
                return
            stats["internals"] += 1
            if not is_root and len(node.children) < min_children:
                raise CorruptIndex(f"underfull internal page {page_id}", page_id=page_id)
            if len(node.children) != len(node.keys) + 1:
                raise CorruptIndex(f"fanout mismatch in page {page_id}", page_id=page_id)
            if node.keys != sorted(node.keys):
                raise CorruptIndex(f"unsorted separators in page {page_id}", page_id=page_id)
            bounds = [lo] + list(node.keys) + [hi]
            for i, child in enumerate(node.children):
                walk(child, bounds[i], bounds[i + 1], depth + 1, False)

        walk(self._hdr.root_page, None, None, 1, True)
        if stats["entries"] != self._hdr.entry_count:
            raise CorruptIndex(
                f"entry count mismatch: tree has {stats['entries']}, header says {self._hdr.entry_count}",
                page_id=0,
            )
        if last_key[0] is not None and self._hdr.watermark != IndexKey(*last_key[0]):
            raise CorruptIndex("watermark does not match largest key", page_id=0)
        return stats

    def close(self) -> None:
        if self._pages:
            self._pages.close()
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1


def recover(path: Path | str, use_mmap: bool = True) -> tuple[TimeIndexReader, IndexKey | None]:
    """Open and fully validate an index; returns (reader, watermark)."""
    reader = TimeIndexReader(path, use_mmap=use_mmap)
    reader.validate()
    return reader, reader.watermark


def truncate_orphan_pages(path: Path | str) -> int:
    """Drop pages past the committed extent; returns bytes removed."""
    path = Path(path)
    size = path.stat().st_size
    fd = os.open(path, os.O_RDWR)
    try:
        if size < HEADER.size:
            return 0
        page_size = struct.unpack("<I", os.pread(fd, 4, 6))[0]
        hdr = _Header.decode(os.pread(fd, page_size, 0))
        committed = hdr.n_pages * page_size
        if size > committed:
            os.ftruncate(fd, committed)
            return size - committed
        return 0
    finally:
        os.close(fd)


# ---------------------------------------------------------------------------
# In-memory cache of pending entries


class IndexCache:
    """Buffer between the inserter and the flusher.

    insert() enforces the append-only contract (strictly increasing keys
    per topic). Entries become visible to readers only once a flush has
    committed them; the watermark here mirrors the last committed key.
    """

    def __init__(self, max_pending: int = 256):
        self.max_pending = max_pending
        self._pending: list[tuple[tuple, int]] = []
        self._last_by_topic: dict[int, tuple] = {}
        self._lock = threading.Lock()
        self._work = threading.Condition(self._lock)
        self.watermark: IndexKey | None = None

    def insert(self, key: tuple, offset: int) -> None:
        key = tuple(key)
        with self._work:
            last = self._last_by_topic.get(key[1])
            if last is not None and key <= last:
                raise OutOfOrderTimestamp(f"index key {key} not after {last}")
            self._last_by_topic[key[1]] = key
            self._pending.append((key, offset))
            if len(self._pending) >= self.max_pending:
                self._work.notify_all()

    def __len__(self) -> int:
        with self._lock:
            return len(self._pending)

    def drain(self) -> list[tuple[tuple, int]]:
        with self._lock:
            batch, self._pending = self._pending, []
            return batch

    def requeue_front(self, entries: list[tuple[tuple, int]]) -> None:
        with self._lock:
            self._pending = list(entries) + self._pending

    def wait_for_work(self, timeout: float) -> None:
        with self._work:
            if len(self._pending) < self.max_pending:
                self._work.wait(timeout)

    def notify(self) -> None:
        with self._work:
            self._work.notify_all()


def flush_cache(
    cache: IndexCache,
    writer: TimeIndexWriter,
    sync: bool = False,
    after_drain: Callable[[list[tuple[tuple, int]]], None] | None = None,
) -> IndexKey | None:
    """Drain pending entries into the tree and commit.

    after_drain(batch) runs before any insert - the write path uses it to
    push the drained entries' brick bytes to the OS, so a commit never
    publishes an offset whose bytes are still buffered. On failure the
    un-inserted remainder goes back to the front of the cache and
    already-inserted entries stay dirty in the writer, so the next flush
    retries; the committed watermark never moves on error.
    """
    batch = cache.drain()
    if batch:
        if after_drain is not None:
            try:
                after_drain(batch)
            except BaseException:
                cache.requeue_front(batch)
                raise
        ordered = sorted(batch)
        done = 0
        try:
            for key, offset in ordered:
                writer.insert(key, offset)
                done += 1
        except OutOfOrderTimestamp:
            cache.requeue_front(ordered[done + 1 :])  # duplicate key can never succeed; keep the rest
            raise
        except BaseException:
            cache.requeue_front(ordered[done:])  # transient failure: nothing lost
            raise
    wm = writer.commit(sync=sync)
    cache.watermark = wm
    return wm
