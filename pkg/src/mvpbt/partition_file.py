"""Immutable persisted partitions and the append-only index file.

Each eviction appends one extent: [leaf pages][internal pages][filter block]
[footer page], all 8 KiB pages, little-endian, footer magic "MVPB" with a
CRC-32.  Footers chain backwards so the newest footer (last page of the file)
reaches every partition.  Page writes are coalesced through a write buffer so
physical writes are large sequential runs.

Reconciliation collapses adjacent same-key regular/replacement records into
condensed multi-entry records at persist time; readers expand them back.
"""

from __future__ import annotations

import io
import os
import struct
import threading
import zlib
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Union

from .config import Config
from .errors import CorruptPage, InternalOrderViolation, StorageFull
from .filters import FilterSet, build_filters, filter_deserialize, filter_serialize
from .heap import RecordID
from .metrics import Metrics, WriteTrace
from .records import (
    CONDENSED_BIT,
    IndexRecord,
    RecordKind,
    decode_from,
    encode,
    sort_key,
)

NO_PREV = 0xFFFFFFFFFFFFFFFF
_LEAF_TYPE = 0x4C  # 'L'
_INTERNAL_TYPE = 0x49  # 'I'
_PAGE_HEAD = struct.Struct("<BHH")  # type, count, used
_GROUP_HEAD = struct.Struct("<BHH")  # b0, partition_no, key_len
_TS = struct.Struct("<Q")
_RID = struct.Struct("<IH")
_COUNT = struct.Struct("<H")
_CHILD = struct.Struct("<I")
_KLEN = struct.Struct("<H")

FOOTER_MAGIC = b"MVPB"
_FOOTER_FIXED = struct.Struct("<4sHHIIIQQQQQQQ")
FOOTER_VERSION = 1

MAX_GROUP_ENTRIES = 256


class IndexFile:
    """Append-only page store with write buffering and an I/O trace hook."""

    def __init__(
        self,
        path: str | None = None,
        *,
        page_size: int = 8192,
        write_buffer_bytes: int = 64 * 1024,
        metrics: Metrics | None = None,
        trace: WriteTrace | None = None,
        file_id: str = "index",
    ):
        self.page_size = page_size
        self.write_buffer_bytes = max(page_size, write_buffer_bytes)
        self.metrics = metrics or Metrics()
        self.trace = trace
        self.file_id = file_id
        self._lock = threading.Lock()
        self._buf = bytearray()
        if path is None:
            self._f = io.BytesIO()
            self._append_off = 0
        else:
            exists = os.path.exists(path) and os.path.getsize(path) > 0
            self._f = open(path, "r+b" if exists else "w+b")
            self._f.seek(0, io.SEEK_END)
            self._append_off = self._f.tell()

    @property
    def append_offset(self) -> int:
        return self._append_off + len(self._buf)

    def append_block(self, data: bytes) -> None:
        with self._lock:
            self._buf.extend(data)
            if len(self._buf) >= self.write_buffer_bytes:
                self._flush_locked()

    def flush(self) -> None:
        with self._lock:
            self._flush_locked()
            self._f.flush()

    def _flush_locked(self) -> None:
        if not self._buf:
            return
        data = bytes(self._buf)
        self._f.seek(self._append_off)
        self._f.write(data)
        if self.trace is not None:
            self.trace.record(self.file_id, self._append_off, len(data))
        self.metrics.add("index_bytes_written", len(data))
        self._append_off += len(data)
        self._buf.clear()

    def read_at(self, offset: int, length: int) -> bytes:
        with self._lock:
            self._f.seek(offset)
            data = self._f.read(length)
        if len(data) != length:
            raise CorruptPage(f"short read at {offset}: wanted {length}, got {len(data)}")
        return data

    def size(self) -> int:
        with self._lock:
            self._f.seek(0, io.SEEK_END)
            return self._f.tell()

    def close(self) -> None:
        self.flush()
        if not isinstance(self._f, io.BytesIO):
            self._f.close()


# -- reconciliation -------------------------------------------------------------


@dataclass
class CondensedRecord:
    """Several same-key regular or replacement records packed as one."""

    kind: RecordKind
    partition_no: int
    key: bytes
    entries: list[tuple[int, RecordID, Optional[RecordID]]]  # (ts, matter, anti)

    def expand(self) -> list[IndexRecord]:
        return [
            IndexRecord(self.kind, self.partition_no, self.key, ts, matter, anti)
            for ts, matter, anti in self.entries
        ]


Packed = Union[IndexRecord, CondensedRecord]


def reconcile(records: Sequence[IndexRecord], max_entries: int = MAX_GROUP_ENTRIES) -> list[Packed]:
    """Collapse adjacent same-key REGULAR/REPLACEMENT runs; order-preserving."""
    out: list[Packed] = []
    run: list[IndexRecord] = []

    def close_run() -> None:
        if not run:
            return
        if len(run) == 1:
            out.append(run[0])
        else:
            head = run[0]
            for i in range(0, len(run), max_entries):
                chunk = run[i : i + max_entries]
                if len(chunk) == 1:
                    out.append(chunk[0])
                else:
                    out.append(
                        CondensedRecord(
                            head.kind,
                            head.partition_no,
                            head.key,
                            [(r.ts, r.rid_matter, r.rid_anti) for r in chunk],
                        )
                    )
        run.clear()

    for record in records:
        collapsible = record.kind in (RecordKind.REGULAR, RecordKind.REPLACEMENT) and not record.gc
        if run and (
            not collapsible
            or run[0].kind is not record.kind
            or run[0].key != record.key
            or run[0].partition_no != record.partition_no
        ):
            close_run()
        if collapsible:
            run.append(record)
        else:
            out.append(record)
    close_run()
    return out


def expand_packed(items: Sequence[Packed]) -> list[IndexRecord]:
    out: list[IndexRecord] = []
    for item in items:
        if isinstance(item, CondensedRecord):
            out.extend(item.expand())
        else:
            out.append(item)
    return out


def _encode_packed(item: Packed, partition_no: int) -> bytes:
    if isinstance(item, IndexRecord):
        moved = IndexRecord(
            item.kind, partition_no, item.key, item.ts, item.rid_matter, item.rid_anti, item.gc
        )
        return encode(moved)
    b0 = int(item.kind) | CONDENSED_BIT
    parts = [
        _GROUP_HEAD.pack(b0, partition_no, len(item.key)),
        item.key,
        _COUNT.pack(len(item.entries)),
    ]
    with_anti = item.kind is RecordKind.REPLACEMENT
    for ts, matter, anti in item.entries:
        parts.append(_TS.pack(ts))
        parts.append(_RID.pack(*matter))
        if with_anti:
            parts.append(_RID.pack(*anti))
    return b"".join(parts)


def _decode_packed(buf: bytes, off: int) -> tuple[list[IndexRecord], int]:
    b0 = buf[off]
    if not b0 & CONDENSED_BIT:
        record, off = decode_from(buf, off)
        return [record], off
    _, partition_no, key_len = _GROUP_HEAD.unpack_from(buf, off)
    kind = RecordKind(b0 & 0x03)
    off += _GROUP_HEAD.size
    key = bytes(buf[off : off + key_len])
    off += key_len
    (count,) = _COUNT.unpack_from(buf, off)
    off += _COUNT.size
    with_anti = kind is RecordKind.REPLACEMENT
    out = []
    for _ in range(count):
        (ts,) = _TS.unpack_from(buf, off)
        off += _TS.size
        matter = RecordID(*_RID.unpack_from(buf, off))
        off += _RID.size
        anti = None
        if with_anti:
            anti = RecordID(*_RID.unpack_from(buf, off))
            off += _RID.size
        out.append(IndexRecord(kind, partition_no, key, ts, matter, anti))
    return out, off


# -- persisted partition ----------------------------------------------------------


@dataclass
class PartitionFooter:
    partition_no: int
    leaf_count: int
    internal_count: int
    root_idx: int
    filter_off: int
    filter_len: int
    record_count: int
    min_ts: int
    max_ts: int
    prev_footer: int
    extent_off: int
    min_key: bytes
    max_key: bytes

    def to_page(self, page_size: int) -> bytes:
        fixed = _FOOTER_FIXED.pack(
            FOOTER_MAGIC,
            FOOTER_VERSION,
            self.partition_no,
            self.leaf_count,
            self.internal_count,
            self.root_idx,
            self.filter_off,
            self.filter_len,
            self.record_count,
            self.min_ts,
            self.max_ts,
            self.prev_footer,
            self.extent_off,
        )
        payload = (
            fixed
            + _KLEN.pack(len(self.min_key))
            + self.min_key
            + _KLEN.pack(len(self.max_key))
            + self.max_key
        )
        payload += struct.pack("<I", zlib.crc32(payload))
        if len(payload) > page_size:
            raise StorageFull("footer exceeds a page")
        return payload + b"\x00" * (page_size - len(payload))

    @classmethod
    def from_page(cls, data: bytes) -> "PartitionFooter":
        try:
            fields = _FOOTER_FIXED.unpack_from(data, 0)
        except struct.error as exc:
            raise CorruptPage("truncated footer") from exc
        if fields[0] != FOOTER_MAGIC:
            raise CorruptPage(f"bad footer magic {fields[0]!r}")
        off = _FOOTER_FIXED.size
        (min_len,) = _KLEN.unpack_from(data, off)
        off += 2
        min_key = bytes(data[off : off + min_len])
        off += min_len
        (max_len,) = _KLEN.unpack_from(data, off)
        off += 2
        max_key = bytes(data[off : off + max_len])
        off += max_len
        (crc,) = struct.unpack_from("<I", data, off)
        if zlib.crc32(data[:off]) != crc:
            raise CorruptPage("footer checksum mismatch")
        return cls(*fields[2:], min_key=min_key, max_key=max_key)


def _pack_leaves(blobs: list[tuple[bytes, bytes]], page_size: int) -> tuple[list[bytes], list[bytes]]:
    """Dense-pack (key, blob) pairs into leaf pages; returns (pages, max_keys)."""
    usable = page_size - _PAGE_HEAD.size
    pages: list[bytes] = []
    max_keys: list[bytes] = []
    cur: list[bytes] = []
    cur_bytes, cur_count, cur_max = 0, 0, b""

    def close() -> None:
        nonlocal cur, cur_bytes, cur_count, cur_max
        if not cur_count:
            return
        body = b"".join(cur)
        head = _PAGE_HEAD.pack(_LEAF_TYPE, cur_count, _PAGE_HEAD.size + len(body))
        pages.append(head + body + b"\x00" * (usable - len(body)))
        max_keys.append(cur_max)
        cur, cur_bytes, cur_count, cur_max = [], 0, 0, b""

    for key, blob in blobs:
        if len(blob) > usable:
            raise StorageFull("index record larger than a page")
        if cur_bytes + len(blob) > usable:
            close()
        cur.append(blob)
        cur_bytes += len(blob)
        cur_count += 1
        cur_max = key
    close()
    return pages, max_keys


def _pack_internal_level(
    entries: list[tuple[bytes, int]], page_size: int
) -> tuple[list[bytes], list[tuple[bytes, int]]]:
    usable = page_size - _PAGE_HEAD.size
    pages: list[bytes] = []
    parents: list[tuple[bytes, int]] = []  # (max_key, page position within this level)
    cur: list[bytes] = []
    cur_bytes, cur_count, cur_max = 0, 0, b""

    def close() -> None:
        nonlocal cur, cur_bytes, cur_count, cur_max
        if not cur_count:
            return
        body = b"".join(cur)
        head = _PAGE_HEAD.pack(_INTERNAL_TYPE, cur_count, _PAGE_HEAD.size + len(body))
        pages.append(head + body + b"\x00" * (usable - len(body)))
        parents.append((cur_max, len(pages) - 1))
        cur, cur_bytes, cur_count, cur_max = [], 0, 0, b""

    for max_key, child in entries:
        blob = _KLEN.pack(len(max_key)) + max_key + _CHILD.pack(child)
        if len(blob) > usable:
            raise StorageFull("separator key larger than a page")
        if cur_bytes + len(blob) > usable:
            close()
        cur.append(blob)
        cur_bytes += len(blob)
        cur_count += 1
        cur_max = max_key
    close()
    return pages, parents


class PersistentPartition:
    """Reader over one immutable extent; root page and filters are cached."""

    def __init__(self, file: IndexFile, footer: PartitionFooter, footer_off: int, metrics: Metrics):
        self.file = file
        self.footer = footer
        self.footer_off = footer_off
        self.metrics = metrics
        self.partition_no = footer.partition_no
        self.filters: FilterSet = filter_deserialize(
            file.read_at(footer.filter_off, footer.filter_len)
        )
        self._root_entries = self._parse_internal(self._read_raw(footer.root_idx))

    # -- page access -------------------------------------------------------------

    def _read_raw(self, idx: int) -> bytes:
        off = self.footer.extent_off + idx * self.file.page_size
        return self.file.read_at(off, self.file.page_size)

    def _read_page(self, idx: int) -> bytes:
        self.metrics.add("persisted_page_fetches")
        return self._read_raw(idx)

    @staticmethod
    def _parse_internal(data: bytes) -> list[tuple[bytes, int]]:
        page_type, count, _used = _PAGE_HEAD.unpack_from(data, 0)
        if page_type != _INTERNAL_TYPE:
            raise CorruptPage(f"expected internal page, found type {page_type:#x}")
        off = _PAGE_HEAD.size
        entries = []
        for _ in range(count):
            (klen,) = _KLEN.unpack_from(data, off)
            off += 2
            key = bytes(data[off : off + klen])
            off += klen
            (child,) = _CHILD.unpack_from(data, off)
            off += _CHILD.size
            entries.append((key, child))
        return entries

    @staticmethod
    def _parse_leaf(data: bytes) -> list[IndexRecord]:
        page_type, count, _used = _PAGE_HEAD.unpack_from(data, 0)
        if page_type != _LEAF_TYPE:
            raise CorruptPage(f"expected leaf page, found type {page_type:#x}")
        off = _PAGE_HEAD.size
        records: list[IndexRecord] = []
        for _ in range(count):
            expanded, off = _decode_packed(data, off)
            records.extend(expanded)
        return records

    # -- search -----------------------------------------------------------------

    def _descend(self, low: bytes | None) -> int:
        """Root-to-leaf: index of the leftmost leaf that may contain ``low``."""
        entries = self._root_entries
        self.metrics.add("root_cache_hits")
        while True:
            pos = 0
            if low is not None:
                pos = _leftmost_geq(entries, low)
                if pos == len(entries):
                    return self.footer.leaf_count  # past the last key
            child = entries[pos][1]
            if child < self.footer.leaf_count:
                return child
            entries = self._parse_internal(self._read_page(child))

    def iterate(self, low: bytes | None = None, high: bytes | None = None) -> Iterator[IndexRecord]:
        leaf = self._descend(low)
        while leaf < self.footer.leaf_count:
            records = self._parse_leaf(self._read_page(leaf))
            for record in records:
                if low is not None and record.key < low:
                    continue
                if high is not None and record.key > high:
                    return
                yield record
            leaf += 1


def _leftmost_geq(entries: list[tuple[bytes, int]], low: bytes) -> int:
    lo, hi = 0, len(entries)
    while lo < hi:
        mid = (lo + hi) // 2
        if entries[mid][0] < low:
            lo = mid + 1
        else:
            hi = mid
    return lo


def persist_partition(
    records: Sequence[IndexRecord],
    out: IndexFile,
    new_partition_no: int,
    cfg: Config,
    prev_footer: int = NO_PREV,
    metrics: Metrics | None = None,
) -> PersistentPartition:
    """Stream an ordered record set into a new immutable extent.

    Records arrive stamped with the sealed partition's number; they are stored
    under ``new_partition_no`` (the number decremented by the eviction).
    """
    metrics = metrics or out.metrics
    last = None
    for record in records:
        sk = sort_key(record)[1:]  # partition stamp is rewritten below
        if last is not None and sk < last:
            raise InternalOrderViolation("record stream for persist is not sorted")
        last = sk
    packed = reconcile(records)
    blobs = [(item.key, _encode_packed(item, new_partition_no)) for item in packed]

    extent_off = out.append_offset
    leaf_pages, leaf_max_keys = _pack_leaves(blobs, cfg.page_size)
    if not leaf_pages:
        raise InternalOrderViolation("refusing to persist an empty partition")
    for page in leaf_pages:
        out.append_block(page)

    level = [(mk, idx) for idx, mk in enumerate(leaf_max_keys)]
    next_idx = len(leaf_pages)
    internal_count = 0
    root_idx = None
    while True:
        pages, parents = _pack_internal_level(level, cfg.page_size)
        for page in pages:
            out.append_block(page)
        level = [(mk, next_idx + pos) for mk, pos in parents]
        next_idx += len(pages)
        internal_count += len(pages)
        if len(pages) == 1:
            root_idx = next_idx - 1
            break

    filter_off = out.append_offset
    stored = [
        IndexRecord(r.kind, new_partition_no, r.key, r.ts, r.rid_matter, r.rid_anti)
        for r in records
    ]
    fs = build_filters(stored, cfg.bloom_fpr, cfg.pbf_fpr, cfg.pbf_prefix_len)
    filter_bytes = filter_serialize(fs)
    padded_len = -(-len(filter_bytes) // cfg.page_size) * cfg.page_size
    out.append_block(filter_bytes + b"\x00" * (padded_len - len(filter_bytes)))

    footer = PartitionFooter(
        partition_no=new_partition_no,
        leaf_count=len(leaf_pages),
        internal_count=internal_count,
        root_idx=root_idx,
        filter_off=filter_off,
        filter_len=len(filter_bytes),
        record_count=len(records),
        min_ts=fs.min_ts,
        max_ts=max(r.ts for r in records),
        prev_footer=prev_footer,
        extent_off=extent_off,
        min_key=fs.min_key or b"",
        max_key=fs.max_key or b"",
    )
    footer_off = out.append_offset
    out.append_block(footer.to_page(cfg.page_size))
    out.flush()
    return PersistentPartition(out, footer, footer_off, metrics)


def open_partitions(file: IndexFile, metrics: Metrics) -> list[PersistentPartition]:
    """Walk the footer chain from the end of the file; newest first."""
    size = file.size()
    if size == 0:
        return []
    out = []
    off = size - file.page_size
    while off != NO_PREV:
        footer = PartitionFooter.from_page(file.read_at(off, file.page_size))
        out.append(PersistentPartition(file, footer, off, metrics))
        off = footer.prev_footer
    return out
