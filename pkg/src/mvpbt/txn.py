"""Logical transaction timestamps, snapshots, and the visibility predicates.

Timestamps are assigned once at begin and grow strictly; a snapshot captures
the set of transactions that were still active at begin time.  Visibility of
a writer's timestamp to a reader snapshot is: committed, begun before the
reader, and not active when the reader began.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum

from .errors import DoubleFinish, UnknownTimestamp

Timestamp = int


class TxState(Enum):
    ACTIVE = "ACTIVE"
    COMMITTED = "COMMITTED"
    ABORTED = "ABORTED"


@dataclass(frozen=True)
class Snapshot:
    """Immutable view taken at transaction begin.

    horizon: every transaction with ts < horizon had finished at begin time.
    active_set: transactions begun but not finished at begin time.
    """

    own_ts: Timestamp
    horizon: Timestamp
    active_set: frozenset[Timestamp]


@dataclass
class TransactionHandle:
    ts: Timestamp
    snapshot: Snapshot
    state: TxState = TxState.ACTIVE


class TransactionManager:
    """Timestamp source plus commit table.

    ``base_ts`` supports process restarts: timestamps below it belong to
    historical transactions that are treated as committed unless listed in
    ``historical_aborted`` (the commit table itself is not durable).
    """

    def __init__(self, base_ts: Timestamp = 1, historical_aborted: set[Timestamp] | None = None):
        self._lock = threading.Lock()
        self._base = base_ts
        self._next = base_ts
        self._states: dict[Timestamp, TxState] = {}
        self._active: set[Timestamp] = set()
        self._historical_aborted = set(historical_aborted or ())
        self._aborted_log: set[Timestamp] = set(self._historical_aborted)

    # -- lifecycle ---------------------------------------------------------

    def begin(self) -> TransactionHandle:
        with self._lock:
            ts = self._next
            self._next += 1
            active = frozenset(self._active)
            horizon = min(active) if active else ts
            self._states[ts] = TxState.ACTIVE
            self._active.add(ts)
        return TransactionHandle(ts=ts, snapshot=Snapshot(ts, horizon, active))

    def commit(self, tx: TransactionHandle) -> None:
        self._finish(tx, TxState.COMMITTED)

    def abort(self, tx: TransactionHandle) -> None:
        self._finish(tx, TxState.ABORTED)

    def _finish(self, tx: TransactionHandle, final: TxState) -> None:
        with self._lock:
            if self._states.get(tx.ts) is not TxState.ACTIVE:
                raise DoubleFinish(f"transaction {tx.ts} already finished")
            self._states[tx.ts] = final
            self._active.discard(tx.ts)
            if final is TxState.ABORTED:
                self._aborted_log.add(tx.ts)
        tx.state = final

    # -- state lookups -----------------------------------------------------

    def state_of(self, ts: Timestamp) -> TxState:
        with self._lock:
            state = self._states.get(ts)
            if state is not None:
                return state
            if ts < self._base:
                return TxState.ABORTED if ts in self._historical_aborted else TxState.COMMITTED
        raise UnknownTimestamp(f"timestamp {ts} was never assigned")

    def precedes(self, ts: Timestamp, reader: Snapshot) -> bool:
        """True iff ts's transaction committed before the reader's snapshot."""
        return (
            self.state_of(ts) is TxState.COMMITTED
            and ts < reader.own_ts
            and ts not in reader.active_set
        )

    def is_concurrent(self, ts: Timestamp, reader: Snapshot) -> bool:
        self.state_of(ts)  # validates the timestamp
        if ts == reader.own_ts:
            return False
        return ts in reader.active_set or ts > reader.own_ts

    def ts_visible(self, ts: Timestamp, reader: Snapshot) -> bool:
        """Own writes are visible; otherwise the transaction must precede."""
        return ts == reader.own_ts or self.precedes(ts, reader)

    def cutoff_timestamp(self) -> Timestamp:
        """Oldest active timestamp; next-to-assign when nothing is active."""
        with self._lock:
            return min(self._active) if self._active else self._next

    # -- restart support ----------------------------------------------------

    def next_ts(self) -> Timestamp:
        with self._lock:
            return self._next

    def aborted_timestamps(self) -> set[Timestamp]:
        with self._lock:
            return set(self._aborted_log)
