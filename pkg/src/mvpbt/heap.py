"""Append-only base table of physically materialized version records.

Chains are new-to-old: the entry point is the newest version and each record
links to its predecessor.  No invalidation timestamp is stored; a version is
invalidated implicitly by the existence of a successor.  ``resolve_visible``
is the brute-force chain-walk visibility oracle the index is tested against.

File format (little-endian): a sequence of fixed-size pages.  Page header is
{page_no: u32, record_count: u16, free_offset: u16}; record bytes grow from
the header end, the slot directory (u16 record offsets) grows from the page
end.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional

from .errors import StorageFull, UnknownRecordID
from .metrics import Metrics
from .txn import Snapshot, Timestamp, TransactionHandle, TransactionManager

PAGE_HEADER = struct.Struct("<IHH")
_REC_FIXED = struct.Struct("<QIHBHH")  # ts, pred_page, pred_slot, flags, key_len, payload_len
_F_TOMBSTONE = 0x01
_F_HAS_PRED = 0x02


class RecordID(NamedTuple):
    page_no: int
    slot: int


@dataclass
class VersionRecord:
    key: bytes
    payload: bytes
    t_creation: Timestamp
    predecessor: Optional[RecordID] = None
    tombstone: bool = False

    def encoded_size(self) -> int:
        return _REC_FIXED.size + len(self.key) + len(self.payload)


class HeapPage:
    def __init__(self, page_no: int, page_size: int):
        self.page_no = page_no
        self.page_size = page_size
        self.records: list[VersionRecord] = []
        self.used = PAGE_HEADER.size  # record bytes incl. header

    def free_space(self) -> int:
        return self.page_size - self.used - 2 * len(self.records)

    def fits(self, record: VersionRecord) -> bool:
        return record.encoded_size() + 2 <= self.free_space()

    def append(self, record: VersionRecord) -> int:
        self.records.append(record)
        self.used += record.encoded_size()
        return len(self.records) - 1

    def to_bytes(self) -> bytes:
        buf = bytearray(self.page_size)
        PAGE_HEADER.pack_into(buf, 0, self.page_no, len(self.records), self.used)
        off = PAGE_HEADER.size
        slots = []
        for rec in self.records:
            slots.append(off)
            flags = (_F_TOMBSTONE if rec.tombstone else 0) | (
                _F_HAS_PRED if rec.predecessor is not None else 0
            )
            pred = rec.predecessor or RecordID(0, 0)
            _REC_FIXED.pack_into(
                buf, off, rec.t_creation, pred.page_no, pred.slot, flags, len(rec.key), len(rec.payload)
            )
            off += _REC_FIXED.size
            buf[off : off + len(rec.key)] = rec.key
            off += len(rec.key)
            buf[off : off + len(rec.payload)] = rec.payload
            off += len(rec.payload)
        for i, slot_off in enumerate(slots):
            struct.pack_into("<H", buf, self.page_size - 2 * (i + 1), slot_off)
        return bytes(buf)

    @classmethod
    def from_bytes(cls, data: bytes, page_size: int) -> "HeapPage":
        page_no, count, used = PAGE_HEADER.unpack_from(data, 0)
        page = cls(page_no, page_size)
        for i in range(count):
            (slot_off,) = struct.unpack_from("<H", data, page_size - 2 * (i + 1))
            ts, pred_page, pred_slot, flags, key_len, payload_len = _REC_FIXED.unpack_from(
                data, slot_off
            )
            off = slot_off + _REC_FIXED.size
            key = bytes(data[off : off + key_len])
            off += key_len
            payload = bytes(data[off : off + payload_len])
            pred = RecordID(pred_page, pred_slot) if flags & _F_HAS_PRED else None
            page.append(
                VersionRecord(key, payload, ts, predecessor=pred, tombstone=bool(flags & _F_TOMBSTONE))
            )
        page.used = used
        return page


class VersionHeap:
    """Single appender, arbitrarily many readers of already-written records."""

    def __init__(
        self,
        page_size: int = 8192,
        path: str | None = None,
        metrics: Metrics | None = None,
        max_pages: int | None = None,
    ):
        self.page_size = page_size
        self.metrics = metrics or Metrics()
        self.max_pages = max_pages
        self.pages: list[HeapPage] = []
        self._flushed_upto = 0  # pages durable in their final form
        self._file = None
        if path is not None:
            exists = os.path.exists(path) and os.path.getsize(path) > 0
            self._file = open(path, "r+b" if exists else "w+b")
            if exists:
                self._load()

    def _load(self) -> None:
        self._file.seek(0, io.SEEK_END)
        size = self._file.tell()
        if size % self.page_size:
            raise StorageFull(f"heap file size {size} is not page aligned")
        self._file.seek(0)
        for _ in range(size // self.page_size):
            self.pages.append(HeapPage.from_bytes(self._file.read(self.page_size), self.page_size))
        self._flushed_upto = max(0, len(self.pages) - 1)

    # -- write path ----------------------------------------------------------

    def _tail(self, record: VersionRecord) -> HeapPage:
        if record.encoded_size() + 2 > self.page_size - PAGE_HEADER.size:
            raise StorageFull("record larger than a heap page")
        if not self.pages or not self.pages[-1].fits(record):
            if self.max_pages is not None and len(self.pages) >= self.max_pages:
                raise StorageFull("heap page budget exhausted")
            self._flush_full()
            self.pages.append(HeapPage(len(self.pages), self.page_size))
        return self.pages[-1]

    def _append(self, record: VersionRecord) -> RecordID:
        page = self._tail(record)
        slot = page.append(record)
        return RecordID(page.page_no, slot)

    def heap_insert(self, tx: TransactionHandle, key: bytes, payload: bytes) -> RecordID:
        return self._append(VersionRecord(key, payload, tx.ts))

    def heap_append_successor(
        self,
        tx: TransactionHandle,
        predecessor: RecordID,
        key: bytes,
        payload: bytes,
        tombstone: bool = False,
    ) -> RecordID:
        self._check_rid(predecessor)
        return self._append(
            VersionRecord(key, b"" if tombstone else payload, tx.ts, predecessor, tombstone)
        )

    # -- read path -----------------------------------------------------------

    def _check_rid(self, rid: RecordID) -> None:
        if rid.page_no >= len(self.pages) or rid.slot >= len(self.pages[rid.page_no].records):
            raise UnknownRecordID(f"no record at {rid}")

    def _get(self, rid: RecordID) -> VersionRecord:
        """Uncounted access, used by the oracle and internal evaluation."""
        self._check_rid(rid)
        return self.pages[rid.page_no].records[rid.slot]

    def heap_fetch(self, rid: RecordID) -> VersionRecord:
        record = self._get(rid)
        self.metrics.add("heap_fetches")
        return record

    def resolve_visible(
        self, entry: RecordID, snap: Snapshot, mgr: TransactionManager
    ) -> Optional[RecordID]:
        """Chain-walk oracle: newest-to-oldest, first version whose creator is
        visible to the snapshot; a visible tombstone ends the chain."""
        rid: Optional[RecordID] = entry
        while rid is not None:
            record = self._get(rid)
            if mgr.ts_visible(record.t_creation, snap):
                return None if record.tombstone else rid
            rid = record.predecessor
        return None

    # -- durability ------------------------------------------------------------

    def _flush_full(self) -> None:
        """Write pages that can no longer change (all but the tail)."""
        if self._file is None or not self.pages:
            return
        for idx in range(self._flushed_upto, len(self.pages) - 1):
            self._write_page(idx)
        self._flushed_upto = max(self._flushed_upto, len(self.pages) - 1)

    def _write_page(self, idx: int) -> None:
        self._file.seek(idx * self.page_size)
        self._file.write(self.pages[idx].to_bytes())
        self.metrics.add("heap_bytes_written", self.page_size)

    def flush(self) -> None:
        if self._file is None:
            return
        self._flush_full()
        if self.pages:
            self._write_page(len(self.pages) - 1)
        self._file.flush()

    def close(self) -> None:
        if self._file is not None:
            self.flush()
            self._file.close()
            self._file = None

    # -- introspection -----------------------------------------------------------

    def count_reclaimable(self, entries: list[RecordID], cutoff: Timestamp, mgr) -> int:
        """Heap GC stub: counts versions superseded for every snapshot at or
        after the cutoff; no compaction is performed."""
        reclaimable = 0
        for entry in entries:
            rid, newest_kept = entry, False
            while rid is not None:
                record = self._get(rid)
                state = mgr.state_of(record.t_creation)
                committed_old = state.name == "COMMITTED" and record.t_creation < cutoff
                if committed_old:
                    if newest_kept:
                        reclaimable += 1
                    newest_kept = True
                rid = record.predecessor
        return reclaimable
