"""Independent reference implementations used as test oracles.

Everything here is deliberately written from scratch against the
primitive definitions (RFC 5869 HKDF by hand, exhaustive search for
covers, per-leaf booleans for access), not by calling the code under
test.
"""

import hashlib
import hmac
from functools import lru_cache

KDF_SALT = b"cactus-keytree-v1".ljust(32, b"\x00")


def hkdf32_ref(ikm: bytes, salt: bytes = KDF_SALT) -> bytes:
    """RFC 5869 extract+expand, one 32-byte block, empty info."""
    prk = hmac.new(salt, ikm, hashlib.sha256).digest()
    return hmac.new(prk, b"\x01", hashlib.sha256).digest()


def child_key_ref(parent: bytes, bit: int) -> bytes:
    """Left child: HKDF(parent); right child: HKDF(parent ^ 0x01 in last byte)."""
    ikm = parent if bit == 0 else parent[:-1] + bytes([parent[-1] ^ 0x01])
    return hkdf32_ref(ikm)


def leaf_keys_ref(seed: bytes, depth: int) -> list[bytes]:
    """All 2**depth leaf keys by walking every root-to-leaf path."""
    leaves = []
    for leaf in range(1 << depth):
        key = seed
        for level in range(depth):
            bit = (leaf >> (depth - level - 1)) & 1
            key = child_key_ref(key, bit)
        leaves.append(key)
    return leaves


def min_cover_size_ref(depth: int, first: int, last: int) -> int:
    """Minimum number of aligned subtree blocks exactly covering [first, last].

    Dynamic program over all choices of the block starting at the left
    edge (any exact cover's leftmost block must start there).
    """

    @lru_cache(maxsize=None)
    def best(a: int, b: int) -> int:
        if a > b:
            return 0
        best_here = None
        size = 1
        while size <= (1 << depth):
            if a % size == 0 and a + size - 1 <= b:
                candidate = 1 + best(a + size, b)
                if best_here is None or candidate < best_here:
                    best_here = candidate
            size <<= 1
        return best_here

    return best(first, last)


class LeafAccessModel:
    """Brute-force per-leaf access booleans mirroring a key store."""

    def __init__(self, depth: int, bits: int | None = None):
        self.depth = depth
        self.n = 1 << depth
        self.bits = ((1 << self.n) - 1) if bits is None else bits

    def clone(self) -> "LeafAccessModel":
        return LeafAccessModel(self.depth, self.bits)

    def derivable(self, epoch: int) -> bool:
        return bool((self.bits >> epoch) & 1)

    def bitmap(self) -> int:
        return self.bits

    def covers(self, first: int, last: int) -> bool:
        mask = ((1 << (last - first + 1)) - 1) << first
        return (self.bits & mask) == mask

    def delete_range(self, first: int, last: int) -> "LeafAccessModel":
        mask = ((1 << (last - first + 1)) - 1) << first
        return LeafAccessModel(self.depth, self.bits & ~mask)

    def advance_frontier(self, last_finished: int) -> "LeafAccessModel":
        return self.delete_range(0, last_finished)

    def delegated(self, first: int, last: int) -> "LeafAccessModel":
        mask = ((1 << (last - first + 1)) - 1) << first
        return LeafAccessModel(self.depth, mask)
