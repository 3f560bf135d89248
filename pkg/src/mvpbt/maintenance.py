"""Buffer management, partition eviction, and cooperative garbage collection.

GC reasons per version chain: once every transaction below the cutoff has
finished, any committed sub-cutoff version whose invalidation is also
committed and sub-cutoff can never be seen again, so its index records are
obsolete.  The newest sub-cutoff anti-matter record of a chain is exempt: it
is what keeps suppressing that chain's older records living in persisted
partitions.  When flagged victims are physically removed, the surviving
anti-matter record's anti rid is spliced to the oldest committed victim's
anti rid so suppression still reaches below the removed range.

Phase 1 piggybacks scans and only flags (page-local chain fragments).
Phase 2 runs on the update path when a page carries garbage: it splices,
removes, and reclaims the space.  Phase 3 runs on the sealed partition before
eviction with full cross-page chains; its output stream excludes victims.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Iterable, Optional

from .errors import EmptyBuffer, StorageFull
from .heap import RecordID
from .mem_partition import MemPage, MemPartition
from .partition_file import persist_partition
from .records import IndexRecord, encoded_size
from .txn import Timestamp, TransactionManager, TxState

if TYPE_CHECKING:  # pragma: no cover
    from .tree import MvPbt


# -- chain analysis ---------------------------------------------------------------


@dataclass
class ChainIndex:
    """Version chains reconstructed from record rids; eviction-scoped."""

    chains: dict[int, list[IndexRecord]] = field(default_factory=dict)

    @classmethod
    def build(cls, records: Iterable[IndexRecord]) -> "ChainIndex":
        parent: dict[RecordID, RecordID] = {}

        def find(rid: RecordID) -> RecordID:
            root = rid
            while parent.get(root, root) != root:
                root = parent[root]
            while parent.get(rid, rid) != rid:
                parent[rid], rid = root, parent[rid]
            return root

        def union(a: RecordID, b: RecordID) -> None:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[ra] = rb

        members: list[tuple[RecordID, IndexRecord]] = []
        for record in records:
            anchor = record.rid_matter or record.rid_anti
            parent.setdefault(anchor, anchor)
            if record.rid_matter is not None and record.rid_anti is not None:
                parent.setdefault(record.rid_anti, record.rid_anti)
                union(record.rid_matter, record.rid_anti)
            members.append((anchor, record))

        index = cls()
        roots: dict[RecordID, int] = {}
        for anchor, record in members:
            root = find(anchor)
            chain_id = roots.setdefault(root, len(roots))
            index.chains.setdefault(chain_id, []).append(record)
        return index


@dataclass
class GcPlan:
    victims: list[IndexRecord] = field(default_factory=list)
    # (record to rewrite, replacement anti rid)
    splices: list[tuple[IndexRecord, RecordID]] = field(default_factory=list)


def _analyze_chain(
    records: list[IndexRecord], cutoff: Timestamp, mgr: TransactionManager
) -> GcPlan:
    """Flag/splice plan for one chain's records (any order)."""
    plan = GcPlan()
    committed_old: list[IndexRecord] = []
    for record in records:
        state = mgr.state_of(record.ts)
        if state is TxState.ABORTED:
            plan.victims.append(record)
        elif state is TxState.COMMITTED and record.ts < cutoff:
            committed_old.append(record)
    if not committed_old:
        return plan
    invalidated = {r.rid_anti for r in committed_old if r.rid_anti is not None}
    antis = [r for r in committed_old if r.is_anti_matter]
    exempt = max(antis, key=lambda r: (r.ts, r.is_matter)) if antis else None
    committed_victims = []
    for record in committed_old:
        if record is exempt:
            continue
        if record.is_matter and record.rid_matter not in invalidated:
            continue  # still the newest sub-cutoff version
        committed_victims.append(record)
    plan.victims.extend(committed_victims)
    with_anti = [r for r in committed_victims if r.rid_anti is not None]
    if exempt is not None and with_anti:
        splice_anti = min(with_anti, key=lambda r: r.ts).rid_anti
        if exempt.rid_anti != splice_anti:
            plan.splices.append((exempt, splice_anti))
    return plan


# -- the three phases -----------------------------------------------------------


def gc_phase1_mark(
    page: MemPage,
    records: list[IndexRecord],
    cutoff: Timestamp,
    mgr: TransactionManager,
) -> int:
    """Flag obsolete records among one page's chain fragments (no removal)."""
    flagged = 0
    for chain in ChainIndex.build(records).chains.values():
        plan = _analyze_chain(chain, cutoff, mgr)
        for victim in plan.victims:
            if not victim.gc:
                victim.gc = True
                flagged += 1
    if flagged or any(r.gc for r in records):
        page.has_garbage = True
    return flagged


def gc_phase2_reclaim(part: MemPartition, page: MemPage, mgr: TransactionManager) -> int:
    """Remove flagged records from one page, splicing survivors first.

    Committed victims are only removed when the chain fragment's surviving
    anti-matter record sits on the same page (so the splice can happen);
    anything else stays flagged for phase 3.
    """
    if not page.has_garbage:
        return 0
    records = [rec for _, _, rec in page.entries]
    removable: set[int] = set()
    spliced: dict[int, IndexRecord] = {}
    for chain in ChainIndex.build(records).chains.values():
        flagged = [r for r in chain if r.gc]
        if not flagged:
            continue
        aborted_ids = {id(r) for r in flagged if mgr.state_of(r.ts) is TxState.ABORTED}
        committed = [r for r in flagged if id(r) not in aborted_ids]
        removable.update(aborted_ids)
        if not committed:
            continue
        survivors_anti = [r for r in chain if not r.gc and r.is_anti_matter]
        if not survivors_anti:
            continue  # defer: splice target not on this page
        target = min(survivors_anti, key=lambda r: r.ts)  # oldest surviving anti-matter
        with_anti = [r for r in committed if r.rid_anti is not None]
        if with_anti:
            splice_anti = min(with_anti, key=lambda r: r.ts).rid_anti
            if target.rid_anti != splice_anti:
                spliced[id(target)] = replace(target, rid_anti=splice_anti)
        removable.update(id(r) for r in committed)
    if not removable:
        return 0
    new_entries = []
    for sk, size, rec in page.entries:
        if id(rec) in removable:
            continue
        if id(rec) in spliced:
            rec = spliced[id(rec)]
            size = encoded_size(rec)
        new_entries.append((sk, size, rec))
    new_page = MemPage(new_entries)
    new_page.has_garbage = any(rec.gc for _, _, rec in new_entries)
    part.replace_page(page, new_page if new_entries else None)
    return len(removable)


def gc_phase3_full(
    records: list[IndexRecord], cutoff: Timestamp, mgr: TransactionManager
) -> list[IndexRecord]:
    """Full-partition cleanup before eviction; returns the survivor stream.

    Survivors are copies where splicing applies, so sealed in-memory pages
    that concurrent readers still traverse are never mutated.
    """
    drop: set[int] = {id(r) for r in records if r.gc}
    swap: dict[int, IndexRecord] = {}
    for chain in ChainIndex.build(records).chains.values():
        plan = _analyze_chain(chain, cutoff, mgr)
        for victim in plan.victims:
            victim.gc = True
            drop.add(id(victim))
        for target, anti in plan.splices:
            swap[id(target)] = replace(target, rid_anti=anti)
    return [swap.get(id(r), r) for r in records if id(r) not in drop]


# -- buffer management and eviction --------------------------------------------


class MvPbtBuffer:
    """Shared budget for all trees' mutable partitions.

    Victim selection: any tree untouched for ``staleness_evictions``
    consecutive evictions goes first, otherwise the largest resident
    partition.
    """

    def __init__(self, capacity_bytes: int, threshold_pct: int = 90, staleness: int = 4):
        self.capacity = capacity_bytes
        self.threshold = capacity_bytes * threshold_pct / 100.0
        self.staleness = staleness
        self._lock = threading.Lock()
        self.trees: list["MvPbt"] = []
        self.eviction_count = 0
        self._last_touch: dict[str, int] = {}

    def register(self, tree: "MvPbt") -> None:
        with self._lock:
            self.trees.append(tree)
            self._last_touch[tree.name] = self.eviction_count
        tree.buffer = self

    def note_touch(self, tree: "MvPbt") -> None:
        self._last_touch[tree.name] = self.eviction_count

    def occupancy(self) -> int:
        return sum(t.mem.resident_bytes for t in self.trees)

    def select_eviction_victim(self) -> "MvPbt":
        candidates = [t for t in self.trees if t.mem.record_count]
        if not candidates:
            raise EmptyBuffer("no tree has a non-empty mutable partition")
        stale = [
            t
            for t in candidates
            if self.eviction_count - self._last_touch.get(t.name, 0) >= self.staleness
        ]
        pool = stale or candidates
        return max(pool, key=lambda t: (t.mem.resident_bytes, t.mem.record_count))

    def maybe_evict(self) -> int:
        """Evict until occupancy is back under the threshold; returns count."""
        evictions = 0
        with self._lock:
            while self.occupancy() >= self.threshold:
                victim = self.select_eviction_victim()
                evict(victim)
                self.eviction_count += 1
                self._last_touch[victim.name] = self.eviction_count
                evictions += 1
        return evictions


def evict(tree: "MvPbt") -> Optional[object]:
    """Run the eviction pipeline on a tree's mutable partition.

    Readers that began before the swap keep scanning the sealed pages until
    the new extent is registered; the partition list is replaced atomically
    at both transitions so every record is seen exactly once.
    """
    with tree.lock:
        if tree.mem.record_count == 0:
            return None
        sealed = tree.mem
        sealed.seal()
        tree.mem = MemPartition(sealed.partition_no + 1, tree.cfg.page_size, tree.metrics)
        tree.sealed = (sealed, *tree.sealed)
    cutoff = tree.mgr.cutoff_timestamp()
    records = sealed.all_records()
    if tree.cfg.gc_enabled:
        survivors = gc_phase3_full(records, cutoff, tree.mgr)
    else:
        survivors = [r for r in records if not r.gc]
    try:
        if survivors:
            pp = persist_partition(
                survivors,
                tree.file,
                sealed.partition_no - 1,
                tree.cfg,
                prev_footer=tree.last_footer_off(),
                metrics=tree.metrics,
            )
        else:
            pp = None
    except StorageFull:
        # Sealed partition stays readable and the eviction can be retried.
        raise
    with tree.lock:
        tree.sealed = tuple(p for p in tree.sealed if p is not sealed)
        if pp is not None:
            tree.persisted = (pp, *tree.persisted)
        elif tree.mem.record_count == 0 and tree.mem.partition_no == sealed.partition_no + 1:
            # Nothing survived GC: reuse the sealed number so persisted
            # partition numbers stay dense.
            tree.mem = MemPartition(sealed.partition_no, tree.cfg.page_size, tree.metrics)
    return pp
