"""Storage engine façade: transactions, heap, indexes, and tuple chains.

A logical tuple is a chain of heap versions; the engine tracks each chain's
entry point and current key so updates know what they supersede and the
visibility oracle knows where chains start.  Write-write conflicts follow
snapshot isolation's first-updater-wins: a chain touched by an active
transaction is locked against other writers.

Modes: "mvpbt", "baseline", or "both" (both indexes maintained over one heap
and transaction manager, which is how equivalence tests cross-check them).

On close the engine flushes the heap, evicts the mutable partition, and
writes a small metadata file (next timestamp, aborted timestamps, chain
directory) so a reopened process answers scans identically.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

from .baseline import BaselineTree
from .config import Config
from .errors import MvPbtError, WriteConflict
from .heap import RecordID, VersionHeap
from .maintenance import MvPbtBuffer, evict
from .metrics import Metrics, WriteTrace
from .partition_file import IndexFile
from .tree import MvPbt, ResultSet
from .txn import TransactionHandle, TransactionManager, TxState

META_FILE = "engine.meta"
HEAP_FILE = "heap.dat"
INDEX_FILE = "primary.mvpbt"


@dataclass
class Chain:
    tuple_id: int
    entry: RecordID
    key: bytes
    deleted: bool = False
    locked_by: Optional[int] = None  # writer timestamp holding the row lock


class Engine:
    def __init__(self, cfg: Config | None = None, mode: str = "mvpbt", data_dir: str | None = None):
        if mode not in ("mvpbt", "baseline", "both"):
            raise MvPbtError(f"unknown engine mode {mode!r}")
        self.cfg = cfg or Config()
        self.mode = mode
        self.data_dir = data_dir
        self.metrics = Metrics()
        self.trace = WriteTrace() if self.cfg.trace_enabled else None

        heap_path = index_path = None
        meta = None
        if data_dir is not None:
            os.makedirs(data_dir, exist_ok=True)
            heap_path = os.path.join(data_dir, HEAP_FILE)
            index_path = os.path.join(data_dir, INDEX_FILE)
            meta_path = os.path.join(data_dir, META_FILE)
            if os.path.exists(meta_path):
                with open(meta_path, "r", encoding="utf-8") as fh:
                    meta = json.load(fh)

        if meta is not None:
            self.mgr = TransactionManager(
                base_ts=meta["next_ts"], historical_aborted=set(meta["aborted"])
            )
        else:
            self.mgr = TransactionManager()
        self.heap = VersionHeap(self.cfg.page_size, heap_path, self.metrics)

        self.tree: Optional[MvPbt] = None
        self.baseline: Optional[BaselineTree] = None
        self.buffer: Optional[MvPbtBuffer] = None
        if mode in ("mvpbt", "both"):
            file = IndexFile(
                index_path,
                page_size=self.cfg.page_size,
                write_buffer_bytes=self.cfg.write_buffer_bytes,
                metrics=self.metrics,
                trace=self.trace,
                file_id="primary",
            )
            if meta is not None:
                self.tree = MvPbt.open(
                    "primary", self.cfg, self.mgr, file, self.metrics,
                    mem_partition_no=meta.get("mem_partition_no"),
                )
            else:
                self.tree = MvPbt("primary", self.cfg, self.mgr, self.metrics, file)
            self.buffer = MvPbtBuffer(
                self.cfg.buffer_capacity_bytes,
                self.cfg.evict_threshold_pct,
                self.cfg.staleness_evictions,
            )
            self.buffer.register(self.tree)
        if mode in ("baseline", "both"):
            self.baseline = BaselineTree(
                self.heap, self.mgr, self._chain_entry_of,
                self.cfg.page_size, self.metrics, self.trace,
            )

        self.chains: dict[int, Chain] = {}
        self._rid_chain: dict[RecordID, int] = {}
        self._next_tuple = 0
        self._undo: dict[int, list[tuple]] = {}
        if meta is not None:
            self._restore_chains(meta)
            if self.baseline is not None:
                for chain in self.chains.values():
                    self._reindex_baseline_chain(chain)

    # -- restart plumbing -----------------------------------------------------

    def _restore_chains(self, meta: dict) -> None:
        for tid, key_hex, page_no, slot, deleted in meta["chains"]:
            chain = Chain(tid, RecordID(page_no, slot), bytes.fromhex(key_hex), deleted)
            self.chains[tid] = chain
        self._next_tuple = meta["next_tuple"]
        for chain in self.chains.values():
            rid: Optional[RecordID] = chain.entry
            while rid is not None:
                self._rid_chain[rid] = chain.tuple_id
                rid = self.heap._get(rid).predecessor

    def _reindex_baseline_chain(self, chain: Chain) -> None:
        rid: Optional[RecordID] = chain.entry
        while rid is not None:
            record = self.heap._get(rid)
            self.baseline.insert(record.key, rid)
            rid = record.predecessor

    def close(self) -> None:
        if self.tree is not None:
            evict(self.tree)
        if self.data_dir is not None:
            self.heap.flush()
            if self.tree is not None:
                self.tree.file.flush()
            meta = {
                "next_ts": self.mgr.next_ts(),
                "aborted": sorted(self.mgr.aborted_timestamps()),
                "next_tuple": self._next_tuple,
                "mem_partition_no": self.tree.mem.partition_no if self.tree else 1,
                "chains": [
                    [c.tuple_id, c.key.hex(), c.entry.page_no, c.entry.slot, c.deleted]
                    for c in self.chains.values()
                ],
            }
            with open(os.path.join(self.data_dir, META_FILE), "w", encoding="utf-8") as fh:
                json.dump(meta, fh)
        self.heap.close()
        if self.tree is not None:
            self.tree.file.close()

    # -- transactions ------------------------------------------------------------

    def begin(self) -> TransactionHandle:
        tx = self.mgr.begin()
        self._undo[tx.ts] = []
        return tx

    def commit(self, tx: TransactionHandle) -> None:
        self.mgr.commit(tx)
        self._release(tx)
        self._undo.pop(tx.ts, None)

    def abort(self, tx: TransactionHandle) -> None:
        self.mgr.abort(tx)
        for chain, entry, key, deleted in reversed(self._undo.pop(tx.ts, [])):
            if entry is None:
                # Aborted insert: the chain stays (its only versions are
                # aborted, hence invisible) so indexed rids keep resolving.
                chain.deleted = True
            else:
                chain.entry, chain.key, chain.deleted = entry, key, deleted
        self._release(tx)

    def _release(self, tx: TransactionHandle) -> None:
        for chain in self.chains.values():
            if chain.locked_by == tx.ts:
                chain.locked_by = None

    def _lock(self, tx: TransactionHandle, chain: Chain) -> None:
        if chain.locked_by is not None and chain.locked_by != tx.ts:
            if self.mgr.state_of(chain.locked_by) is TxState.ACTIVE:
                raise WriteConflict(
                    f"chain {chain.tuple_id} is write-locked by {chain.locked_by}"
                )
            chain.locked_by = None
        chain.locked_by = tx.ts

    def _chain_entry_of(self, rid: RecordID) -> RecordID:
        return self.chains[self._rid_chain[rid]].entry

    # -- logical tuple operations ---------------------------------------------------

    def insert(self, tx: TransactionHandle, key: bytes, payload: bytes = b"") -> int:
        rid = self.heap.heap_insert(tx, key, payload)
        tid = self._next_tuple
        self._next_tuple += 1
        chain = Chain(tid, rid, key, locked_by=tx.ts)
        self.chains[tid] = chain
        self._rid_chain[rid] = tid
        self._undo[tx.ts].append((chain, None, None, None))
        if self.tree is not None:
            self.tree.index_insert(tx, key, rid)
        if self.baseline is not None:
            self.baseline.insert(key, rid)
        self._post_write()
        return tid

    def _supersede(self, tx: TransactionHandle, chain: Chain) -> RecordID:
        self._lock(tx, chain)
        self._undo[tx.ts].append((chain, chain.entry, chain.key, chain.deleted))
        return chain.entry

    def update_value(self, tx: TransactionHandle, tuple_id: int, payload: bytes) -> None:
        chain = self.chains[tuple_id]
        rid_old = self._supersede(tx, chain)
        rid_new = self.heap.heap_append_successor(tx, rid_old, chain.key, payload)
        self._rid_chain[rid_new] = tuple_id
        chain.entry = rid_new
        if self.tree is not None:
            self.tree.index_update_nonkey(tx, chain.key, rid_old, rid_new)
        if self.baseline is not None:
            self.baseline.insert(chain.key, rid_new)
        self._post_write()

    def update_key(
        self, tx: TransactionHandle, tuple_id: int, key_new: bytes, payload: bytes = b""
    ) -> None:
        chain = self.chains[tuple_id]
        key_old = chain.key
        rid_old = self._supersede(tx, chain)
        rid_new = self.heap.heap_append_successor(tx, rid_old, key_new, payload)
        self._rid_chain[rid_new] = tuple_id
        chain.entry, chain.key = rid_new, key_new
        if self.tree is not None:
            self.tree.index_update_key(tx, key_old, key_new, rid_old, rid_new)
        if self.baseline is not None:
            self.baseline.insert(key_new, rid_new)
        self._post_write()

    def delete(self, tx: TransactionHandle, tuple_id: int) -> None:
        chain = self.chains[tuple_id]
        rid_old = self._supersede(tx, chain)
        rid_new = self.heap.heap_append_successor(tx, rid_old, chain.key, b"", tombstone=True)
        self._rid_chain[rid_new] = tuple_id
        chain.entry, chain.deleted = rid_new, True
        if self.tree is not None:
            self.tree.index_delete(tx, chain.key, rid_old)
        if self.baseline is not None:
            self.baseline.insert(chain.key, rid_new)
        self._post_write()

    def _post_write(self) -> None:
        if self.buffer is not None:
            self.buffer.maybe_evict()

    def flush(self) -> None:
        """Force-evict the mutable partition (test and load-phase hook)."""
        if self.tree is not None:
            evict(self.tree)

    # -- reads -----------------------------------------------------------------------

    def search_mvpbt(self, tx: TransactionHandle, key: bytes) -> Optional[tuple[bytes, RecordID]]:
        return self.tree.search(tx, key)

    def scan_mvpbt(self, tx: TransactionHandle, low: bytes | None, high: bytes | None) -> ResultSet:
        return self.tree.scan(tx, low, high)

    def scan_baseline(self, tx, low: bytes | None, high: bytes | None) -> ResultSet:
        return self.baseline.scan_visible(tx, low, high)

    def scan_oracle(self, tx, low: bytes | None, high: bytes | None) -> list[tuple[bytes, RecordID]]:
        """Ground truth: resolve every chain against the snapshot."""
        out = []
        for chain in self.chains.values():
            rid = self.heap.resolve_visible(chain.entry, tx.snapshot, self.mgr)
            if rid is None:
                continue
            record = self.heap._get(rid)
            if (low is None or record.key >= low) and (high is None or record.key <= high):
                out.append((record.key, rid))
        out.sort()
        return out
