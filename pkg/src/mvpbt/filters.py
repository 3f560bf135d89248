"""Per-partition skip filters: key range, minimum timestamp, bloom filter for
points, prefix bloom filter for ranges.

Hashing is two independent 64-bit halves of blake2b with double hashing
g_i = h1 + i*h2 (mod m), so filter bits are reproducible across processes.
"""

from __future__ import annotations

import hashlib
import math
import struct
import zlib
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .errors import CorruptFilter
from .records import IndexRecord
from .txn import Timestamp


def _hash_pair(key: bytes) -> tuple[int, int]:
    digest = hashlib.blake2b(key, digest_size=16).digest()
    h1, h2 = struct.unpack("<QQ", digest)
    return h1, h2 | 1  # odd step so probes cover the array


class BloomFilter:
    def __init__(self, m: int, k: int, n: int = 0):
        self.m = max(1, m)
        self.k = max(1, k)
        self.n = n
        self.bits = bytearray((self.m + 7) // 8)

    @classmethod
    def sized(cls, n: int, target_fpr: float) -> "BloomFilter":
        if n <= 0:
            return cls(1, 1, 0)
        ln2 = math.log(2)
        m = math.ceil(-n * math.log(target_fpr) / (ln2 * ln2))
        k = max(1, round(m / n * ln2))
        return cls(m, k, 0)

    def add(self, key: bytes) -> None:
        h1, h2 = _hash_pair(key)
        for i in range(self.k):
            pos = (h1 + i * h2) % self.m
            self.bits[pos >> 3] |= 1 << (pos & 7)
        self.n += 1

    def may_contain(self, key: bytes) -> bool:
        h1, h2 = _hash_pair(key)
        for i in range(self.k):
            pos = (h1 + i * h2) % self.m
            if not self.bits[pos >> 3] & (1 << (pos & 7)):
                return False
        return True

    def to_bytes(self) -> bytes:
        return struct.pack("<QHQ", self.m, self.k, self.n) + bytes(self.bits)

    @classmethod
    def from_bytes(cls, data: bytes, off: int) -> tuple["BloomFilter", int]:
        try:
            m, k, n = struct.unpack_from("<QHQ", data, off)
        except struct.error as exc:
            raise CorruptFilter("truncated bloom header") from exc
        off += 18
        nbytes = (m + 7) // 8
        if off + nbytes > len(data):
            raise CorruptFilter("truncated bloom bit array")
        bloom = cls(m, k, n)
        bloom.bits = bytearray(data[off : off + nbytes])
        return bloom, off + nbytes


@dataclass
class PrefixBloomFilter:
    bloom: BloomFilter
    prefix_len: int

    def add_key(self, key: bytes) -> None:
        self.bloom.add(key[: self.prefix_len])

    def may_contain_prefix(self, prefix: bytes) -> bool:
        return self.bloom.may_contain(prefix)


@dataclass
class FilterSet:
    min_key: Optional[bytes]
    max_key: Optional[bytes]
    min_ts: Timestamp
    bloom: BloomFilter
    prefix_bloom: Optional[PrefixBloomFilter]

    @property
    def empty(self) -> bool:
        return self.min_key is None


def build_filters(
    records: Sequence[IndexRecord],
    target_fpr: float = 0.02,
    pbf_fpr: float = 0.10,
    prefix_len: int = 4,
) -> FilterSet:
    """One pass over a sorted record stream; sized for its distinct keys."""
    if not records:
        return FilterSet(None, None, 0, BloomFilter.sized(0, target_fpr), None)
    distinct_keys = 1
    distinct_prefixes = 1
    for prev, cur in zip(records, records[1:]):
        if cur.key != prev.key:
            distinct_keys += 1
            if cur.key[:prefix_len] != prev.key[:prefix_len]:
                distinct_prefixes += 1
    bloom = BloomFilter.sized(distinct_keys, target_fpr)
    pbf = PrefixBloomFilter(BloomFilter.sized(distinct_prefixes, pbf_fpr), prefix_len)
    last_key: Optional[bytes] = None
    min_ts = records[0].ts
    for record in records:
        if record.key != last_key:
            bloom.add(record.key)
            pbf.add_key(record.key)
            last_key = record.key
        if record.ts < min_ts:
            min_ts = record.ts
    return FilterSet(records[0].key, records[-1].key, min_ts, bloom, pbf)


def may_contain_point(fs: FilterSet, key: bytes) -> bool:
    if fs.empty or key < fs.min_key or key > fs.max_key:
        return False
    return fs.bloom.may_contain(key)


def may_contain_range(fs: FilterSet, low: bytes | None, high: bytes | None) -> bool:
    if fs.empty:
        return False
    if low is not None and fs.max_key < low:
        return False
    if high is not None and fs.min_key > high:
        return False
    if (
        fs.prefix_bloom is not None
        and low is not None
        and high is not None
        and len(low) >= fs.prefix_bloom.prefix_len
        and low[: fs.prefix_bloom.prefix_len] == high[: fs.prefix_bloom.prefix_len]
    ):
        return fs.prefix_bloom.may_contain_prefix(low[: fs.prefix_bloom.prefix_len])
    return True


# -- serialization (partition filter block) ------------------------------------

_FS_HEAD = struct.Struct("<BHHQ")  # flags, min_key_len, max_key_len, min_ts
_FLAG_NONEMPTY = 0x01
_FLAG_HAS_PBF = 0x02


def filter_serialize(fs: FilterSet) -> bytes:
    flags = 0
    min_key = fs.min_key or b""
    max_key = fs.max_key or b""
    if not fs.empty:
        flags |= _FLAG_NONEMPTY
    if fs.prefix_bloom is not None:
        flags |= _FLAG_HAS_PBF
    body = [
        _FS_HEAD.pack(flags, len(min_key), len(max_key), fs.min_ts),
        min_key,
        max_key,
        fs.bloom.to_bytes(),
    ]
    if fs.prefix_bloom is not None:
        body.append(struct.pack("<H", fs.prefix_bloom.prefix_len))
        body.append(fs.prefix_bloom.bloom.to_bytes())
    payload = b"".join(body)
    return payload + struct.pack("<I", zlib.crc32(payload))


def filter_deserialize(data: bytes) -> FilterSet:
    if len(data) < _FS_HEAD.size + 4:
        raise CorruptFilter("filter block too short")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise CorruptFilter("filter block checksum mismatch")
    flags, min_len, max_len, min_ts = _FS_HEAD.unpack_from(payload, 0)
    off = _FS_HEAD.size
    min_key = bytes(payload[off : off + min_len])
    off += min_len
    max_key = bytes(payload[off : off + max_len])
    off += max_len
    bloom, off = BloomFilter.from_bytes(payload, off)
    pbf = None
    if flags & _FLAG_HAS_PBF:
        (prefix_len,) = struct.unpack_from("<H", payload, off)
        off += 2
        inner, off = BloomFilter.from_bytes(payload, off)
        pbf = PrefixBloomFilter(inner, prefix_len)
    if off != len(payload):
        raise CorruptFilter("trailing bytes in filter block")
    if not flags & _FLAG_NONEMPTY:
        return FilterSet(None, None, min_ts, bloom, pbf)
    return FilterSet(min_key, max_key, min_ts, bloom, pbf)
