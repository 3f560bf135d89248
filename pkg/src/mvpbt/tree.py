"""The multi-version partitioned B-tree: tree-level modifications, search,
scan, and the index-only visibility check.

Search and scan walk partitions newest-first (mutable partition, then any
sealed-but-not-yet-persisted ones, then persisted extents by descending
partition number), carrying one anti-matter map across all of them.  Filters
prune persisted partitions; a point lookup stops at the first visible hit
because older partitions can only hold older records.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from .config import Config
from .errors import UniqueViolation
from .filters import may_contain_point, may_contain_range
from .heap import RecordID
from .mem_partition import MemPage, MemPartition
from .metrics import Metrics
from .partition_file import IndexFile, PersistentPartition
from .records import IndexRecord, RecordKind, make_record
from .txn import Snapshot, Timestamp, TransactionHandle, TransactionManager


class Visibility(Enum):
    VISIBLE = "VISIBLE"
    INVISIBLE = "INVISIBLE"


class AntiMap:
    """Greatest invalidating timestamp seen per recordID, scoped to one scan."""

    def __init__(self) -> None:
        self._map: dict[RecordID, Timestamp] = {}

    def register(self, rid: RecordID, ts: Timestamp) -> None:
        prior = self._map.get(rid)
        if prior is None or ts > prior:
            self._map[rid] = ts

    def get(self, rid: RecordID) -> Optional[Timestamp]:
        return self._map.get(rid)


def visibility_check(
    record: IndexRecord,
    snap: Snapshot,
    anti_map: AntiMap,
    mgr: TransactionManager,
    gc_hook=None,
) -> Visibility:
    """Decide visibility of one index record during a newest-first scan.

    A record whose writer is invisible to the snapshot contributes nothing.
    Visible records first consult the anti-map: if a newer (or same-
    transaction) invalidation for their matter rid was already seen they are
    suppressed, propagating their own anti rid so suppression chains across
    partitions.  GC-flagged records are never returned but still propagate
    their anti-matter, which keeps scans stable between GC phases.
    """
    if not mgr.ts_visible(record.ts, snap):
        return Visibility.INVISIBLE
    if record.gc:
        if record.rid_anti is not None:
            anti_map.register(record.rid_anti, record.ts)
        return Visibility.INVISIBLE
    if record.rid_matter is not None:
        ts_anti = anti_map.get(record.rid_matter)
        if ts_anti is not None and ts_anti >= record.ts:
            if gc_hook is not None:
                gc_hook(record, ts_anti)
            if record.rid_anti is not None:
                anti_map.register(record.rid_anti, record.ts)
            return Visibility.INVISIBLE
    if record.rid_anti is not None:
        anti_map.register(record.rid_anti, record.ts)
    return Visibility.VISIBLE if record.is_matter else Visibility.INVISIBLE


@dataclass
class ResultSet:
    """Visible (key, rid) pairs, partition numbers and timestamps stripped."""

    rows: list[tuple[bytes, RecordID]] = field(default_factory=list)

    def add(self, key: bytes, rid: RecordID) -> None:
        self.rows.append((key, rid))

    def sorted_rows(self) -> list[tuple[bytes, RecordID]]:
        return sorted(self.rows)

    def __len__(self) -> int:
        return len(self.rows)


class MvPbt:
    """One tree: a single mutable partition plus immutable history."""

    def __init__(
        self,
        name: str,
        cfg: Config,
        mgr: TransactionManager,
        metrics: Metrics | None = None,
        file: IndexFile | None = None,
        unique: bool | None = None,
    ):
        self.name = name
        self.cfg = cfg
        self.mgr = mgr
        self.metrics = metrics or Metrics()
        self.file = file or IndexFile(
            page_size=cfg.page_size,
            write_buffer_bytes=cfg.write_buffer_bytes,
            metrics=self.metrics,
            file_id=name,
        )
        self.unique = cfg.unique if unique is None else unique
        self.lock = threading.RLock()
        self.mem = MemPartition(1, cfg.page_size, self.metrics)
        self.sealed: tuple[MemPartition, ...] = ()
        self.persisted: tuple[PersistentPartition, ...] = ()
        self.buffer = None  # wired by the buffer manager on registration
        self._gc_hooks_enabled = cfg.gc_enabled

    # -- partition bookkeeping ------------------------------------------------

    @classmethod
    def open(cls, name: str, cfg: Config, mgr: TransactionManager, file: IndexFile,
             metrics: Metrics | None = None, mem_partition_no: int | None = None) -> "MvPbt":
        from .partition_file import open_partitions

        tree = cls(name, cfg, mgr, metrics=metrics, file=file)
        tree.persisted = tuple(open_partitions(file, tree.metrics))
        if tree.persisted:
            default_no = tree.persisted[0].partition_no + 2
        else:
            default_no = 1
        tree.mem = MemPartition(
            mem_partition_no if mem_partition_no is not None else default_no,
            cfg.page_size,
            tree.metrics,
        )
        return tree

    def partitions_snapshot(self) -> tuple[tuple[MemPartition, ...], tuple[PersistentPartition, ...]]:
        with self.lock:
            return (self.mem, *self.sealed), self.persisted

    @property
    def persisted_count(self) -> int:
        return len(self.persisted)

    def last_footer_off(self) -> int:
        from .partition_file import NO_PREV

        return self.persisted[0].footer_off if self.persisted else NO_PREV

    # -- modifications -----------------------------------------------------------

    def _place(self, record: IndexRecord) -> None:
        from .maintenance import gc_phase2_reclaim

        with self.lock:  # serializes against the eviction's partition swap
            mem = self.mem
            if self._gc_hooks_enabled:
                page = mem.page_for_key(record.key)
                if page is not None and page.has_garbage:
                    gc_phase2_reclaim(mem, page, self.mgr)
            mem.insert(record)
        if self.buffer is not None:
            self.buffer.note_touch(self)

    def index_insert(self, tx: TransactionHandle, key: bytes, rid: RecordID) -> None:
        if self.unique and self.search(tx, key) is not None:
            raise UniqueViolation(f"key {key!r} already visible in unique tree {self.name}")
        self._place(make_record(RecordKind.REGULAR, self.mem.partition_no, key, tx.ts, rid_matter=rid))

    def index_update_nonkey(
        self, tx: TransactionHandle, key: bytes, rid_old: RecordID, rid_new: RecordID
    ) -> None:
        self._place(
            make_record(
                RecordKind.REPLACEMENT, self.mem.partition_no, key, tx.ts,
                rid_matter=rid_new, rid_anti=rid_old,
            )
        )

    def index_update_key(
        self,
        tx: TransactionHandle,
        key_old: bytes,
        key_new: bytes,
        rid_old: RecordID,
        rid_new: RecordID,
    ) -> None:
        if self.unique and self.search(tx, key_new) is not None:
            raise UniqueViolation(f"key {key_new!r} already visible in unique tree {self.name}")
        pno = self.mem.partition_no
        self._place(make_record(RecordKind.ANTI, pno, key_old, tx.ts, rid_anti=rid_old))
        self._place(
            make_record(RecordKind.REPLACEMENT, pno, key_new, tx.ts, rid_matter=rid_new, rid_anti=rid_old)
        )

    def index_delete(self, tx: TransactionHandle, key: bytes, rid_latest: RecordID) -> None:
        self._place(
            make_record(RecordKind.TOMBSTONE, self.mem.partition_no, key, tx.ts, rid_anti=rid_latest)
        )

    # -- reads --------------------------------------------------------------------

    def _mem_stream(self, part: MemPartition, low, high, cutoff) -> Iterable[IndexRecord]:
        from .maintenance import gc_phase1_mark

        page_hook = None
        if self._gc_hooks_enabled and not part.immutable:
            def page_hook(page: MemPage, records: list[IndexRecord]) -> None:
                gc_phase1_mark(page, records, cutoff, self.mgr)

        return part.iterate(low, high, page_hook=page_hook)

    def _partition_streams(self, tx, low, high, point: bool):
        """Yield (stream, gc_page_lookup) per non-skippable partition, newest first."""
        mems, persisted = self.partitions_snapshot()
        cutoff = self.mgr.cutoff_timestamp()
        for part in mems:
            yield self._mem_stream(part, low, high, cutoff), part
        for pp in persisted:
            if self.cfg.filters_enabled:
                self.metrics.add("filter_probes")
                if point:
                    ok = may_contain_point(pp.filters, low) and pp.filters.min_ts <= tx.snapshot.own_ts
                else:
                    ok = may_contain_range(pp.filters, low, high)
                if not ok:
                    self.metrics.add("filter_skips")
                    continue
            yield pp.iterate(low, high), None

    def _make_gc_hook(self, mem_part: Optional[MemPartition]):
        if mem_part is None or not self._gc_hooks_enabled or mem_part.immutable:
            return None
        cutoff = self.mgr.cutoff_timestamp()

        def hook(record: IndexRecord, ts_anti: Timestamp) -> None:
            # Suppressed by an invalidation old enough that no live or future
            # snapshot can need this record: flag it (GC phase-1 marking).
            if ts_anti < cutoff and not record.gc:
                record.gc = True
                page = mem_part.page_for_key(record.key)
                if page is not None:
                    page.has_garbage = True

        return hook

    def search(
        self, tx: TransactionHandle, low: bytes, high: bytes | None = None
    ) -> Optional[tuple[bytes, RecordID]]:
        """First visible match; a point lookup stops at the newest hit."""
        high = low if high is None else high
        point = low == high
        anti_map = AntiMap()
        if not self.cfg.visibility_check:
            return self._search_oblivious(tx, low, high)
        for stream, mem_part in self._partition_streams(tx, low, high, point):
            hook = self._make_gc_hook(mem_part)
            for record in stream:
                self.metrics.add("records_examined")
                if visibility_check(record, tx.snapshot, anti_map, self.mgr, hook) is Visibility.VISIBLE:
                    return record.key, record.rid_matter
        return None

    def _search_oblivious(self, tx, low, high):
        """Version-oblivious emulation: every candidate must be examined."""
        first = None
        for stream, _ in self._partition_streams(tx, low, high, low == high):
            for record in stream:
                self.metrics.add("records_examined")
                if not record.gc and first is None:
                    rid = record.rid_matter or record.rid_anti
                    first = (record.key, rid)
        return first

    def scan(self, tx: TransactionHandle, low: bytes | None, high: bytes | None) -> ResultSet:
        """All visible matches in [low, high], one per chain, in key order."""
        result = ResultSet()
        anti_map = AntiMap()
        check = self.cfg.visibility_check
        for stream, mem_part in self._partition_streams(tx, low, high, False):
            hook = self._make_gc_hook(mem_part)
            for record in stream:
                self.metrics.add("records_examined")
                if not check:
                    if not record.gc:
                        result.add(record.key, record.rid_matter or record.rid_anti)
                    continue
                if visibility_check(record, tx.snapshot, anti_map, self.mgr, hook) is Visibility.VISIBLE:
                    result.add(record.key, record.rid_matter)
        result.rows.sort()
        return result
