"""Version-oblivious baseline B+-tree: one (key, rid) entry per committed
tuple-version, no version information, in-place page writes.

Visibility of scan hits must be established from the base table: every
matching entry costs one heap fetch, and chains are then evaluated over the
fetched records (with uncounted reads for chain members that fell outside
the scanned range).  This is the experimental control the partitioned tree
is compared against.
"""

from __future__ import annotations

import bisect
from typing import Callable, Optional

from .errors import DuplicateEntry
from .heap import RecordID, VersionHeap
from .metrics import Metrics, WriteTrace
from .tree import ResultSet
from .txn import TransactionHandle, TransactionManager
from .util import key_in_range

_ENTRY_OVERHEAD = 8  # modeled per-entry bytes beyond the key: rid + slot


class _LeafPage:
    __slots__ = ("entries", "bytes_used", "offset")

    def __init__(self, offset: int, entries: list[tuple[bytes, RecordID]] | None = None):
        self.entries = entries or []
        self.bytes_used = sum(len(k) + _ENTRY_OVERHEAD for k, _ in self.entries)
        self.offset = offset  # stable file position: updates are in place


class BaselineTree:
    """Ordered (key, rid) set with page-granular write accounting."""

    def __init__(
        self,
        heap: VersionHeap,
        mgr: TransactionManager,
        chain_entry_of: Callable[[RecordID], RecordID],
        page_size: int = 8192,
        metrics: Metrics | None = None,
        trace: WriteTrace | None = None,
        file_id: str = "baseline",
    ):
        self.heap = heap
        self.mgr = mgr
        self.chain_entry_of = chain_entry_of
        self.page_size = page_size
        self.metrics = metrics or Metrics()
        self.trace = trace
        self.file_id = file_id
        self._pages: list[_LeafPage] = []
        self._firsts: list[tuple[bytes, RecordID]] = []
        self._next_offset = 0

    def _alloc_offset(self) -> int:
        off = self._next_offset
        self._next_offset += self.page_size
        return off

    def _page_write(self, page: _LeafPage) -> None:
        self.metrics.add("index_bytes_written", self.page_size)
        if self.trace is not None:
            self.trace.record(self.file_id, page.offset, self.page_size)

    # -- maintenance ------------------------------------------------------------

    def insert(self, key: bytes, rid: RecordID) -> None:
        entry = (key, rid)
        if not self._pages:
            page = _LeafPage(self._alloc_offset(), [entry])
            self._pages.append(page)
            self._firsts.append(entry)
            self._page_write(page)
            return
        idx = max(0, bisect.bisect_right(self._firsts, entry) - 1)
        page = self._pages[idx]
        pos = bisect.bisect_left(page.entries, entry)
        if pos < len(page.entries) and page.entries[pos] == entry:
            raise DuplicateEntry(f"{entry} already indexed")
        page.entries.insert(pos, entry)
        page.bytes_used += len(key) + _ENTRY_OVERHEAD
        if pos == 0:
            self._firsts[idx] = entry
        self._page_write(page)
        if page.bytes_used > self.page_size:
            half = len(page.entries) // 2
            right = _LeafPage(self._alloc_offset(), page.entries[half:])
            page.entries = page.entries[:half]
            page.bytes_used -= right.bytes_used
            self._pages.insert(idx + 1, right)
            self._firsts.insert(idx + 1, right.entries[0])
            self._page_write(page)
            self._page_write(right)

    def delete_entry(self, key: bytes, rid: RecordID) -> bool:
        entry = (key, rid)
        idx = max(0, bisect.bisect_right(self._firsts, entry) - 1)
        if not self._pages:
            return False
        page = self._pages[idx]
        pos = bisect.bisect_left(page.entries, entry)
        if pos >= len(page.entries) or page.entries[pos] != entry:
            return False
        page.entries.pop(pos)
        page.bytes_used -= len(key) + _ENTRY_OVERHEAD
        if not page.entries:
            self._pages.pop(idx)
            self._firsts.pop(idx)
        elif pos == 0:
            self._firsts[idx] = page.entries[0]
        self._page_write(page)
        return True

    # -- reads ----------------------------------------------------------------------

    def entries_in_range(self, low: bytes | None, high: bytes | None) -> list[tuple[bytes, RecordID]]:
        out = []
        start = 0
        if low is not None and self._firsts:
            start = max(0, bisect.bisect_right(self._firsts, (low, RecordID(0, 0))) - 1)
        for page in self._pages[start:]:
            self.metrics.add("persisted_page_fetches")
            for key, rid in page.entries:
                if key_in_range(key, low, high):
                    out.append((key, rid))
            if high is not None and page.entries and page.entries[-1][0] > high:
                break
        return out

    def scan_visible(
        self, tx: TransactionHandle, low: bytes | None, high: bytes | None
    ) -> ResultSet:
        """Fetch every matching entry's version record, then resolve chains."""
        matches = self.entries_in_range(low, high)
        chains: dict[RecordID, None] = {}
        for _key, rid in matches:
            self.heap.heap_fetch(rid)  # the per-entry random I/O
            self.metrics.add("records_examined")
            chains.setdefault(self.chain_entry_of(rid), None)
        result = ResultSet()
        for entry in chains:
            visible = self.heap.resolve_visible(entry, tx.snapshot, self.mgr)
            if visible is None:
                continue
            record = self.heap._get(visible)
            if key_in_range(record.key, low, high):
                result.add(record.key, visible)
        result.rows.sort()
        return result

    @property
    def entry_count(self) -> int:
        return sum(len(p.entries) for p in self._pages)
