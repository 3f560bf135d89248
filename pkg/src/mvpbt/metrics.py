"""Per-engine operation counters; the currency of every experiment."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, fields


@dataclass(frozen=True)
class MetricsSample:
    """Immutable snapshot of the counters at one instant."""

    ops_completed: int = 0
    errors: int = 0
    heap_fetches: int = 0
    mem_page_fetches: int = 0
    persisted_page_fetches: int = 0
    root_cache_hits: int = 0
    filter_probes: int = 0
    filter_skips: int = 0
    records_examined: int = 0
    index_bytes_written: int = 0
    heap_bytes_written: int = 0

    def delta(self, earlier: "MetricsSample") -> "MetricsSample":
        return MetricsSample(
            **{f.name: getattr(self, f.name) - getattr(earlier, f.name) for f in fields(self)}
        )

    @property
    def index_page_fetches(self) -> int:
        return self.mem_page_fetches + self.persisted_page_fetches


class Metrics:
    """Monotone counters, safe under concurrent worker threads."""

    _COUNTERS = [f.name for f in fields(MetricsSample)]

    def __init__(self) -> None:
        self._lock = threading.Lock()
        for name in self._COUNTERS:
            setattr(self, name, 0)

    def add(self, name: str, amount: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + amount)

    def sample(self) -> MetricsSample:
        with self._lock:
            return MetricsSample(**{name: getattr(self, name) for name in self._COUNTERS})


@dataclass
class WriteTrace:
    """Ordered log of physical writes: (seq, file_id, offset, length)."""

    entries: list[tuple[int, str, int, int]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, file_id: str, offset: int, length: int) -> None:
        with self._lock:
            self.entries.append((len(self.entries), file_id, offset, length))

    def dump(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for seq, file_id, offset, length in self.entries:
                fh.write(f"{seq}\t{file_id}\t{offset}\t{length}\n")

    @staticmethod
    def load(path: str) -> "WriteTrace":
        trace = WriteTrace()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                seq, file_id, offset, length = line.rstrip("\n").split("\t")
                trace.entries.append((int(seq), file_id, int(offset), int(length)))
        return trace
