"""Membership structures for request/response correlation.

Three structures live here:

* ``BloomFilter``: a plain m-bit filter with k double-hashed indices.
* ``SlidingWindowFilter``: b Bloom filters rotating through write/read/clean
  roles every ``tau`` seconds of simulation time.
* ``CountingBloomFilter``: the decrement-on-response baseline with 8-bit
  saturating counters.

All three share the same index derivation, so a key hashed once can be probed
against every window of a sliding filter.
"""

from __future__ import annotations

import hashlib
import struct
from typing import NamedTuple

_MASK64 = (1 << 64) - 1
_KEY_STRUCT = struct.Struct(">HI")


class TxnKey(NamedTuple):
    """Transaction identity: 16-bit transaction ID plus client IPv4 address.

    The client address is the request source or the response destination.
    """

    txn_id: int
    client_ip: int

    def to_bytes(self) -> bytes:
        return _KEY_STRUCT.pack(self.txn_id, self.client_ip)


def is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def floor_power_of_two(n: int) -> int:
    """Largest power of two <= n."""
    if n < 1:
        raise ValueError(f"cannot round {n} down to a power of two")
    return 1 << (n.bit_length() - 1)


class IndexHasher:
    """Derives k indices in [0, m) for a key by double hashing.

    Two 64-bit digests h1, h2 come from one keyed BLAKE2b call; index i is
    ``(h1 + i*h2) mod m``.
    """

    __slots__ = ("m", "k", "seed", "_mask", "_hkey")

    def __init__(self, m: int, k: int, seed: int = 0):
        if not is_power_of_two(m):
            raise ValueError(f"filter size must be a power of two, got {m}")
        if k < 1:
            raise ValueError(f"need at least one index function, got k={k}")
        self.m = m
        self.k = k
        self.seed = seed
        self._mask = m - 1
        self._hkey = (seed & _MASK64).to_bytes(8, "big")

    def indices(self, key: TxnKey | tuple[int, int]) -> tuple[int, ...]:
        return self.indices_of(key[0], key[1])

    def indices_of(self, txn_id: int, client_ip: int) -> tuple[int, ...]:
        digest = hashlib.blake2b(
            _KEY_STRUCT.pack(txn_id, client_ip), digest_size=16, key=self._hkey
        ).digest()
        x = int.from_bytes(digest, "little")
        h1 = x & _MASK64
        h2 = x >> 64
        mask = self._mask
        return tuple((h1 + i * h2) & mask for i in range(self.k))


class BloomFilter:
    """m-bit Bloom filter; one byte per bit so probes are plain indexing."""

    __slots__ = ("hasher", "bits")

    def __init__(self, m: int, k: int = 2, seed: int = 0, hasher: IndexHasher | None = None):
        self.hasher = hasher if hasher is not None else IndexHasher(m, k, seed)
        self.bits = bytearray(self.hasher.m)

    @property
    def m(self) -> int:
        return self.hasher.m

    @property
    def k(self) -> int:
        return self.hasher.k

    @property
    def seed(self) -> int:
        return self.hasher.seed

    def insert(self, key: TxnKey | tuple[int, int]) -> None:
        self.insert_indices(self.hasher.indices(key))

    def check(self, key: TxnKey | tuple[int, int]) -> bool:
        return self.check_indices(self.hasher.indices(key))

    def insert_indices(self, idx: tuple[int, ...]) -> None:
        bits = self.bits
        for i in idx:
            bits[i] = 1

    def check_indices(self, idx: tuple[int, ...]) -> bool:
        bits = self.bits
        for i in idx:
            if not bits[i]:
                return False
        return True

    def clear(self) -> None:
        # Hardware walks the array with a recirculated helper packet; here it is instantaneous.
        self.bits = bytearray(self.hasher.m)

    def popcount(self) -> int:
        return self.bits.count(1)

    def __contains__(self, key) -> bool:
        return self.check(key)


def bf_insert(filter: BloomFilter, key: TxnKey) -> None:
    filter.insert(key)


def bf_check(filter: BloomFilter, key: TxnKey) -> bool:
    return filter.check(key)


def bf_clear(filter: BloomFilter) -> None:
    filter.clear()


class SlidingWindowFilter:
    """b Bloom filters used as a sliding window over time.

    At any instant one window takes writes. With b >= 3 the window after it
    (cyclically) is being cleaned and is never consulted; the rest are
    read-only. With b == 2 there is no clean window: rotation zeroes the stale
    window and makes it the new write window.

    Rotations happen at ``start_time + n*tau``. Every time-taking method first
    performs any rotations that are due, so callers may either drive rotation
    explicitly (``rotate``/``advance``) or just pass timestamps.

    A key inserted at t' is guaranteed positive at t whenever
    ``t - t' < tau*(b-2)`` (b >= 3) or ``t - t' < tau`` (b == 2), and is gone
    once ``t - t' >= tau*(b-1)`` (b >= 3) or ``tau*b`` (b == 2) unless a
    colliding key was inserted since.
    """

    def __init__(self, b: int, m: int, tau: float, k: int = 2, seed: int = 0,
                 start_time: float = 0.0):
        if b < 2:
            raise ValueError(f"sliding window needs b >= 2 filters, got {b}")
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}")
        self.hasher = IndexHasher(m, k, seed)
        self.windows = [BloomFilter(m, hasher=self.hasher) for _ in range(b)]
        self.tau = float(tau)
        self.write_index = 0
        self.rotation_count = 0
        self.start_time = float(start_time)
        self.last_rotation_time = float(start_time)
        self._next_rotation = self.start_time + self.tau

    @property
    def b(self) -> int:
        return len(self.windows)

    @property
    def m(self) -> int:
        return self.hasher.m

    @property
    def k(self) -> int:
        return self.hasher.k

    @property
    def clean_index(self) -> int | None:
        if self.b == 2:
            return None
        return (self.write_index + 1) % self.b

    @property
    def next_rotation_time(self) -> float:
        return self._next_rotation

    def roles(self) -> list[str]:
        clean = self.clean_index
        out = []
        for i in range(self.b):
            if i == self.write_index:
                out.append("write")
            elif i == clean:
                out.append("clean")
            else:
                out.append("read")
        return out

    def rotate(self, now: float) -> None:
        if now < self._next_rotation:
            raise ValueError(
                f"rotation at t={now} precedes the scheduled time {self._next_rotation}"
            )
        b = self.b
        self.write_index = (self.write_index + 1) % b
        if b == 2:
            self.windows[self.write_index].clear()
        else:
            # The window entering the clean phase is wiped now; since nothing
            # writes to it, it is still empty when it becomes the write window.
            self.windows[(self.write_index + 1) % b].clear()
        self.rotation_count += 1
        self.last_rotation_time = self._next_rotation
        self._next_rotation = self.start_time + (self.rotation_count + 1) * self.tau

    def advance(self, now: float) -> int:
        """Perform every rotation due at or before ``now``; returns how many."""
        n = 0
        while now >= self._next_rotation:
            self.rotate(self._next_rotation)
            n += 1
        return n

    def insert(self, key: TxnKey | tuple[int, int], now: float) -> None:
        self.advance(now)
        self.windows[self.write_index].insert_indices(self.hasher.indices(key))

    def check(self, key: TxnKey | tuple[int, int], now: float,
              include_write_window: bool = True) -> bool:
        self.advance(now)
        return self.check_indices(self.hasher.indices(key), include_write_window)

    def insert_indices(self, idx: tuple[int, ...]) -> None:
        self.windows[self.write_index].insert_indices(idx)

    def check_indices(self, idx: tuple[int, ...], include_write_window: bool = True) -> bool:
        """Probe without advancing time; the caller is responsible for ``advance``."""
        w = self.write_index
        clean = self.clean_index
        for i, bf in enumerate(self.windows):
            if i == clean or (i == w and not include_write_window):
                continue
            if bf.check_indices(idx):
                return True
        return False

    def dump(self) -> str:
        """One line per window: index, role, set-bit count."""
        return "\n".join(
            f"{i}\t{role}\t{bf.popcount()}"
            for i, (role, bf) in enumerate(zip(self.roles(), self.windows))
        )


def swf_insert(swf: SlidingWindowFilter, key: TxnKey, now: float) -> None:
    swf.insert(key, now)


def swf_check(swf: SlidingWindowFilter, key: TxnKey, now: float,
              include_write_window: bool = True) -> bool:
    return swf.check(key, now, include_write_window)


def swf_rotate(swf: SlidingWindowFilter, now: float) -> None:
    swf.rotate(now)


class CountingBloomFilter:
    """Counting Bloom filter with 8-bit saturating counters.

    Responses delete their request by decrementing its counters, which is
    exactly what lets forged responses evict pending legitimate requests.
    """

    MAX_COUNT = 255

    __slots__ = ("hasher", "counters")

    def __init__(self, m: int, k: int = 2, seed: int = 0):
        self.hasher = IndexHasher(m, k, seed)
        self.counters = bytearray(m)

    @property
    def m(self) -> int:
        return self.hasher.m

    @property
    def k(self) -> int:
        return self.hasher.k

    def insert(self, key: TxnKey | tuple[int, int]) -> None:
        self.insert_indices(self.hasher.indices(key))

    def check_and_decrement(self, key: TxnKey | tuple[int, int]) -> bool:
        return self.check_and_decrement_indices(self.hasher.indices(key))

    def insert_indices(self, idx: tuple[int, ...]) -> None:
        c = self.counters
        for i in idx:
            if c[i] < 255:
                c[i] += 1

    def check_and_decrement_indices(self, idx: tuple[int, ...]) -> bool:
        c = self.counters
        if len(set(idx)) < len(idx):
            # a repeated index was incremented once per occurrence on insert
            for i in set(idx):
                if c[i] < idx.count(i):
                    return False
        else:
            for i in idx:
                if not c[i]:
                    return False
        for i in idx:
            c[i] -= 1
        return True

    def total(self) -> int:
        return sum(self.counters)


def cbf_insert(cbf: CountingBloomFilter, key: TxnKey) -> None:
    cbf.insert(key)


def cbf_check_and_decrement(cbf: CountingBloomFilter, key: TxnKey) -> bool:
    return cbf.check_and_decrement(key)
