"""The mutable in-memory partition P_N: page-shaped sorted leaves.

Leaves split in half when full, which converges to the classic ~67% average
fill under random inserts; garbage flags live on records, with a hasGarbage
bit per page header.  Pages are replaced functionally on split and reclaim so
in-flight readers keep a consistent view of the page objects they captured.
"""

from __future__ import annotations

import bisect
import itertools
from typing import Iterator, Optional

from .errors import ImmutablePartition
from .metrics import Metrics
from .records import IndexRecord, KIND_SCAN_RANK, encoded_size
from .util import RWLatch, key_in_range

# Entry = (sortkey, size, record); sortkey ends with a negated insertion
# sequence so fully-equal (key, ts, kind) records iterate newest-insert first.
Entry = tuple[tuple, int, IndexRecord]


class MemPage:
    __slots__ = ("entries", "bytes_used", "has_garbage")

    def __init__(self, entries: list[Entry] | None = None):
        self.entries: list[Entry] = entries or []
        self.bytes_used = sum(e[1] for e in self.entries)
        self.has_garbage = False

    def first_key(self) -> tuple:
        return self.entries[0][0]

    def fill_fraction(self, page_size: int) -> float:
        return self.bytes_used / page_size


class MemPartition:
    def __init__(self, partition_no: int, page_size: int = 8192, metrics: Metrics | None = None):
        self.partition_no = partition_no
        self.page_size = page_size
        self.metrics = metrics or Metrics()
        self.immutable = False
        self.latch = RWLatch()
        self._seq = itertools.count(1)
        self._pages: list[MemPage] = []
        self._firsts: list[tuple] = []  # first sortkey per page, kept parallel

    # -- accounting -----------------------------------------------------------

    @property
    def resident_bytes(self) -> int:
        return len(self._pages) * self.page_size

    @property
    def record_count(self) -> int:
        return sum(len(p.entries) for p in self._pages)

    @property
    def pages(self) -> list[MemPage]:
        return self._pages

    def _sort_key(self, record: IndexRecord) -> tuple:
        return (record.key, -record.ts, KIND_SCAN_RANK[record.kind], -next(self._seq))

    # -- mutation ---------------------------------------------------------------

    def insert(self, record: IndexRecord) -> None:
        if self.immutable:
            raise ImmutablePartition(f"partition {self.partition_no} is sealed")
        if record.partition_no != self.partition_no:
            raise ImmutablePartition(
                f"record stamped P{record.partition_no} offered to P{self.partition_no}"
            )
        sk = self._sort_key(record)
        entry = (sk, encoded_size(record), record)
        with self.latch.exclusive():
            self.metrics.add("mem_page_fetches")
            if not self._pages:
                self._pages = [MemPage([entry])]
                self._firsts = [sk]
                return
            idx = max(0, bisect.bisect_right(self._firsts, sk) - 1)
            page = self._pages[idx]
            pos = bisect.bisect_left(page.entries, sk, key=lambda e: e[0])
            page.entries.insert(pos, entry)
            page.bytes_used += entry[1]
            if pos == 0:
                self._firsts[idx] = sk
            if page.bytes_used > self.page_size:
                self._split(idx)

    def _split(self, idx: int) -> None:
        """Replace an overflowing page with two halves (by byte weight)."""
        page = self._pages[idx]
        half, acc = 0, 0
        for i, entry in enumerate(page.entries):
            acc += entry[1]
            if acc * 2 >= page.bytes_used:
                half = i + 1
                break
        half = min(max(half, 1), len(page.entries) - 1) if len(page.entries) > 1 else 1
        left = MemPage(page.entries[:half])
        right = MemPage(page.entries[half:])
        left.has_garbage = right.has_garbage = page.has_garbage
        self._pages[idx : idx + 1] = [left, right]
        self._firsts[idx : idx + 1] = [left.first_key(), right.first_key()]

    def replace_page(self, old: MemPage, new: MemPage | None) -> None:
        """Swap in a rebuilt page (GC reclaim); None drops an emptied page."""
        with self.latch.exclusive():
            idx = self._pages.index(old)
            if new is None or not new.entries:
                del self._pages[idx]
                del self._firsts[idx]
            else:
                self._pages[idx] = new
                self._firsts[idx] = new.first_key()

    def seal(self) -> None:
        self.immutable = True

    # -- reads ---------------------------------------------------------------------

    def _page_snapshot(self) -> list[MemPage]:
        with self.latch.shared():
            return list(self._pages)

    def page_for_key(self, key: bytes) -> Optional[MemPage]:
        with self.latch.shared():
            if not self._pages:
                return None
            idx = max(0, bisect.bisect_right(self._firsts, (key,)) - 1)
            return self._pages[idx]

    def iterate(
        self,
        low: bytes | None = None,
        high: bytes | None = None,
        *,
        count_fetches: bool = True,
        page_hook=None,
    ) -> Iterator[IndexRecord]:
        """Yield records in scan order within [low, high].

        ``page_hook(page, records)`` runs per page after its records are
        captured; garbage-collection marking piggybacks on it.
        """
        pages = self._page_snapshot()
        start = 0
        if low is not None:
            firsts = [p.first_key() for p in pages]
            start = max(0, bisect.bisect_right(firsts, (low,)) - 1)
        for page in pages[start:]:
            with self.latch.shared():
                chunk = list(page.entries)
            if count_fetches:
                self.metrics.add("mem_page_fetches")
            selected = [rec for _, _, rec in chunk if key_in_range(rec.key, low, high)]
            if page_hook is not None:
                page_hook(page, [rec for _, _, rec in chunk])
            yield from selected
            if high is not None and chunk and chunk[-1][2].key > high:
                break

    def all_records(self) -> list[IndexRecord]:
        """Uncounted full snapshot in scan order (maintenance use)."""
        return [rec for page in self._page_snapshot() for _, _, rec in page.entries]

    def mean_leaf_fill(self) -> float:
        pages = self._page_snapshot()
        if not pages:
            return 0.0
        return sum(p.fill_fraction(self.page_size) for p in pages) / len(pages)
