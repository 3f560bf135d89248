"""Exception types shared across the engine."""


class MvPbtError(Exception):
    """Base class for all engine errors."""


class DoubleFinish(MvPbtError):
    """Commit or abort on a transaction that already finished."""


class UnknownTimestamp(MvPbtError):
    """Timestamp was never assigned to a transaction."""


class WriteConflict(MvPbtError):
    """Write-write conflict: the target chain is locked by another active transaction."""


class StorageFull(MvPbtError):
    """Storage capacity exhausted (or a record too large for a page)."""


class UnknownRecordID(MvPbtError):
    """RecordID does not name a stored version record."""


class MalformedRecord(MvPbtError):
    """Record construction violates the kind's rid invariants."""


class CorruptRecord(MvPbtError):
    """Byte sequence is not a valid encoded index record."""


class CorruptPage(MvPbtError):
    """On-disk page failed checksum or shape validation."""


class CorruptFilter(MvPbtError):
    """Filter block failed checksum or shape validation."""


class ImmutablePartition(MvPbtError):
    """Mutation attempted on a sealed partition."""


class InternalOrderViolation(MvPbtError):
    """Record stream handed to the partition writer was not sorted."""


class UniqueViolation(MvPbtError):
    """Insert or key-update would duplicate a visible key in a unique tree."""


class DuplicateEntry(MvPbtError):
    """Exact (key, rid) pair already present in the baseline tree."""


class EmptyBuffer(MvPbtError):
    """Eviction requested but no tree has a non-empty mutable partition."""


class InvalidSpec(MvPbtError):
    """Workload or configuration specification is inconsistent."""
