"""Index record kinds, their flags, total ordering, and wire format.

The four kinds map the four logical events: REGULAR (insert), REPLACEMENT
(non-key update: new matter plus anti-matter for the predecessor), ANTI (key
update: pure anti-matter under the old key), TOMBSTONE (delete: anti-matter
extinguishing the whole chain).

Scan order within a tree: partition number ascending, key ascending, then
timestamp descending so newer versions are always met first; at equal
timestamps anti-matter-heavy kinds sort first so a transaction's own later
operations suppress its earlier ones.

Wire format (little-endian): 1 byte kind+flags, u16 partition number, u16 key
length, key bytes, u64 timestamp, then one 6-byte rid (u32 page, u16 slot)
per rid the kind carries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

from .errors import CorruptRecord, MalformedRecord
from .heap import RecordID
from .txn import Timestamp


class RecordKind(IntEnum):
    REGULAR = 0
    REPLACEMENT = 1
    ANTI = 2
    TOMBSTONE = 3


# Tiebreak rank for equal (key, ts): records carrying the invalidation come
# first so they are scanned before what they invalidate.
KIND_SCAN_RANK = {
    RecordKind.TOMBSTONE: 0,
    RecordKind.ANTI: 1,
    RecordKind.REPLACEMENT: 2,
    RecordKind.REGULAR: 3,
}

MATTER = "MATTER"
ANTI_MATTER = "ANTI_MATTER"
GC = "GC"

_KIND_MASK = 0x03
_GC_BIT = 0x04
CONDENSED_BIT = 0x08

_HEAD = struct.Struct("<BHH")
_TS = struct.Struct("<Q")
_RID = struct.Struct("<IH")
RID_WIRE_SIZE = _RID.size


@dataclass
class IndexRecord:
    kind: RecordKind
    partition_no: int
    key: bytes
    ts: Timestamp
    rid_matter: Optional[RecordID] = None
    rid_anti: Optional[RecordID] = None
    gc: bool = field(default=False, compare=True)

    @property
    def flags(self) -> frozenset[str]:
        out = set()
        if self.kind in (RecordKind.REGULAR, RecordKind.REPLACEMENT):
            out.add(MATTER)
        if self.kind in (RecordKind.REPLACEMENT, RecordKind.ANTI, RecordKind.TOMBSTONE):
            out.add(ANTI_MATTER)
        if self.gc:
            out.add(GC)
        return frozenset(out)

    @property
    def is_matter(self) -> bool:
        return self.kind in (RecordKind.REGULAR, RecordKind.REPLACEMENT)

    @property
    def is_anti_matter(self) -> bool:
        return self.kind in (RecordKind.REPLACEMENT, RecordKind.ANTI, RecordKind.TOMBSTONE)


def make_record(
    kind: RecordKind,
    partition_no: int,
    key: bytes,
    ts: Timestamp,
    rid_matter: Optional[RecordID] = None,
    rid_anti: Optional[RecordID] = None,
) -> IndexRecord:
    """Build a well-formed record; rid presence must match the kind."""
    want_matter = kind in (RecordKind.REGULAR, RecordKind.REPLACEMENT)
    want_anti = kind in (RecordKind.REPLACEMENT, RecordKind.ANTI, RecordKind.TOMBSTONE)
    if (rid_matter is not None) != want_matter or (rid_anti is not None) != want_anti:
        raise MalformedRecord(
            f"{kind.name} record takes matter={want_matter}, anti={want_anti}; "
            f"got matter={rid_matter}, anti={rid_anti}"
        )
    return IndexRecord(kind, partition_no, key, ts, rid_matter, rid_anti)


def sort_key(record: IndexRecord) -> tuple:
    return (record.partition_no, record.key, -record.ts, KIND_SCAN_RANK[record.kind])


def compare(a: IndexRecord, b: IndexRecord) -> int:
    """-1/0/+1 under the scan ordering (rid content does not participate)."""
    ka, kb = sort_key(a), sort_key(b)
    return -1 if ka < kb else (1 if ka > kb else 0)


def encoded_size(record: IndexRecord) -> int:
    rids = (record.rid_matter is not None) + (record.rid_anti is not None)
    return _HEAD.size + len(record.key) + _TS.size + rids * _RID.size


def encode(record: IndexRecord) -> bytes:
    b0 = int(record.kind) | (_GC_BIT if record.gc else 0)
    parts = [
        _HEAD.pack(b0, record.partition_no, len(record.key)),
        record.key,
        _TS.pack(record.ts),
    ]
    if record.rid_matter is not None:
        parts.append(_RID.pack(*record.rid_matter))
    if record.rid_anti is not None:
        parts.append(_RID.pack(*record.rid_anti))
    return b"".join(parts)


def decode_from(buf: bytes, off: int) -> tuple[IndexRecord, int]:
    """Decode one record starting at ``off``; returns (record, next offset)."""
    try:
        b0, partition_no, key_len = _HEAD.unpack_from(buf, off)
    except struct.error as exc:
        raise CorruptRecord("truncated record header") from exc
    if b0 & CONDENSED_BIT:
        raise CorruptRecord("condensed record outside a partition page")
    kind = RecordKind(b0 & _KIND_MASK)
    off += _HEAD.size
    if off + key_len + _TS.size > len(buf):
        raise CorruptRecord("truncated record body")
    key = bytes(buf[off : off + key_len])
    off += key_len
    (ts,) = _TS.unpack_from(buf, off)
    off += _TS.size
    rid_matter = rid_anti = None
    if kind in (RecordKind.REGULAR, RecordKind.REPLACEMENT):
        rid_matter, off = _read_rid(buf, off)
    if kind in (RecordKind.REPLACEMENT, RecordKind.ANTI, RecordKind.TOMBSTONE):
        rid_anti, off = _read_rid(buf, off)
    record = IndexRecord(kind, partition_no, key, ts, rid_matter, rid_anti, gc=bool(b0 & _GC_BIT))
    return record, off


def _read_rid(buf: bytes, off: int) -> tuple[RecordID, int]:
    try:
        page_no, slot = _RID.unpack_from(buf, off)
    except struct.error as exc:
        raise CorruptRecord("truncated rid") from exc
    return RecordID(page_no, slot), off + _RID.size


def decode(buf: bytes) -> IndexRecord:
    record, consumed = decode_from(buf, 0)
    if consumed != len(buf):
        raise CorruptRecord(f"{len(buf) - consumed} trailing bytes after record")
    return record
