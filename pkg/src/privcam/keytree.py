"""Fixed-depth binary tree of symmetric keys with one-way derivation.

Leaf ``j`` of a depth-``d`` tree holds the 256-bit key for epoch ``j``,
the wall-clock interval ``[t0 + j*delta, t0 + (j+1)*delta)``.  A child
key is an HKDF-SHA256 output of its parent (right child: parent key
with the last byte XORed with 0x01), so holding any node grants exactly
the leaves below it and nothing above or beside it.  That single
property carries the whole system:

* delegation hands over the minimal set of nodes covering a range;
* deletion replaces covering nodes with the cover of what survives,
  after which the deleted epochs are gone for everyone who only held
  ancestors;
* the recording device keeps a frontier of at most ``d`` nodes covering
  the future and wipes everything older.

Stores are immutable; every mutation returns a new store.  Dropped node
keys are zeroized as soon as the last store holding them is released.
"""

import struct
import weakref
from dataclasses import dataclass
from typing import Iterable, Iterator

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (
    BeforeOriginError,
    BeyondLifespanError,
    KeyWipedError,
    MalformedStoreError,
    NoAccessError,
    ParentIsLeafError,
    RangeInvalidError,
    VersionMismatchError,
)

KEY_BYTES = 32
MAX_DEPTH = 40
SECONDS_PER_YEAR = 365 * 86400  # calendar year as used in the sizing tables

# Fixed KDF parameters so keys are reproducible across implementations.
KDF_SALT = b"cactus-keytree-v1".ljust(32, b"\x00")

STORE_MAGIC = b"CKT1"
_STORE_HEADER = struct.Struct("<4sBIQI")
_STORE_NODE = struct.Struct("<BQ32s")


@dataclass(frozen=True, slots=True)
class TreeParams:
    """Tree shape and its anchoring in wall-clock time.

    depth: number of edge levels; the tree has ``2**depth`` leaves.
    epoch_seconds: seconds covered by one leaf.
    origin_ms: UTC milliseconds of epoch 0's start.
    """

    depth: int
    epoch_seconds: int
    origin_ms: int

    def __post_init__(self):
        if not 1 <= self.depth <= MAX_DEPTH:
            raise RangeInvalidError(f"depth must be in [1, {MAX_DEPTH}], got {self.depth}")
        if self.epoch_seconds < 1:
            raise RangeInvalidError("epoch_seconds must be >= 1")
        if self.origin_ms < 0:
            raise RangeInvalidError("origin_ms must be >= 0")

    @property
    def n_epochs(self) -> int:
        return 1 << self.depth

    def lifespan_seconds(self) -> int:
        return self.n_epochs * self.epoch_seconds

    def lifespan_years(self) -> float:
        return self.lifespan_seconds() / SECONDS_PER_YEAR

    def worst_case_key_storage_bytes(self) -> int:
        # Every other epoch deleted: 2**(depth-1) retained leaves, 32 B each.
        return (1 << (self.depth - 1)) * KEY_BYTES

    def epoch_of(self, t_ms: int) -> int:
        """Epoch index containing UTC millisecond ``t_ms`` (half-open intervals)."""
        if t_ms < self.origin_ms:
            raise BeforeOriginError(f"{t_ms} ms precedes origin {self.origin_ms} ms")
        epoch = (t_ms - self.origin_ms) // (self.epoch_seconds * 1000)
        if epoch >= self.n_epochs:
            raise BeyondLifespanError(f"{t_ms} ms is past the end of the tree's lifespan")
        return epoch

    def epoch_start_ms(self, epoch: int) -> int:
        return self.origin_ms + epoch * self.epoch_seconds * 1000

    def pack(self) -> bytes:
        return struct.pack("<BIQ", self.depth, self.epoch_seconds, self.origin_ms)

    @classmethod
    def unpack(cls, data: bytes) -> "TreeParams":
        if len(data) != 13:
            raise MalformedStoreError("bad params encoding")
        depth, eps, origin = struct.unpack("<BIQ", data)
        return cls(depth, eps, origin)


@dataclass(frozen=True, slots=True, order=True)
class NodeId:
    """Position in the tree: (level, index); level 0 is the root."""

    level: int
    index: int

    def validate(self, depth: int) -> None:
        if not 0 <= self.level <= depth:
            raise RangeInvalidError(f"level {self.level} outside [0, {depth}]")
        if not 0 <= self.index < (1 << self.level):
            raise RangeInvalidError(f"index {self.index} outside [0, 2**{self.level})")

    def is_leaf(self, depth: int) -> bool:
        return self.level == depth

    def child(self, side: str) -> "NodeId":
        bit = {"left": 0, "right": 1}[side]
        return NodeId(self.level + 1, 2 * self.index + bit)

    def span(self, depth: int) -> tuple[int, int]:
        """Inclusive (first, last) leaf/epoch interval this node covers."""
        width = 1 << (depth - self.level)
        return self.index * width, (self.index + 1) * width - 1

    def covers(self, epoch: int, depth: int) -> bool:
        first, last = self.span(depth)
        return first <= epoch <= last


# Live-key registry; lets tests audit that retired keys are actually gone.
_live_keys: "weakref.WeakSet[NodeKey]" = weakref.WeakSet()


def live_node_keys() -> list["NodeKey"]:
    return [nk for nk in _live_keys if not nk.wiped]


class NodeKey:
    """A node position plus its 32-byte secret, held in a wipeable buffer.

    Zeroization is best-effort (Python copies bytes freely), but the
    owned buffer is cleared on :meth:`wipe` and on garbage collection,
    which is what the frontier-rotation audit checks.
    """

    __slots__ = ("id", "_buf", "__weakref__")

    def __init__(self, node_id: NodeId, key: bytes):
        if len(key) != KEY_BYTES:
            raise MalformedStoreError(f"node key must be {KEY_BYTES} bytes")
        self.id = node_id
        self._buf = bytearray(key)
        _live_keys.add(self)

    @property
    def key(self) -> bytes:
        if self.wiped:
            raise KeyWipedError(f"key material for {self.id} was erased")
        return bytes(self._buf)

    @property
    def wiped(self) -> bool:
        return len(self._buf) == 0

    def wipe(self) -> None:
        for i in range(len(self._buf)):
            self._buf[i] = 0
        del self._buf[:]

    def __del__(self):
        try:
            self.wipe()
        except Exception:
            pass

    def __repr__(self):
        state = "wiped" if self.wiped else "live"
        return f"NodeKey(level={self.id.level}, index={self.id.index}, {state})"


def _hkdf32(ikm: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=KEY_BYTES, salt=KDF_SALT, info=b"").derive(ikm)


def derive_child(parent: NodeKey, side: str, depth: int) -> NodeKey:
    """One-way step down the tree.

    Left child key = HKDF(parent key); right child key = HKDF(parent key
    with its final byte XORed with 0x01).
    """
    if side not in ("left", "right"):
        raise RangeInvalidError(f"side must be 'left' or 'right', got {side!r}")
    if parent.id.level >= depth:
        raise ParentIsLeafError(f"{parent.id} is a leaf in a depth-{depth} tree")
    ikm = parent.key
    if side == "right":
        ikm = ikm[:-1] + bytes([ikm[-1] ^ 0x01])
    return NodeKey(parent.id.child(side), _hkdf32(ikm))


def cover_set(params: TreeParams, first: int, last: int) -> list[NodeId]:
    """Minimal antichain of nodes whose spans exactly partition [first, last].

    Greedy over maximal aligned blocks; the result is unique, at most
    ``2*depth`` nodes, and sorted by coverage start.
    """
    _check_range(params, first, last)
    depth = params.depth
    ids = []
    pos = first
    while pos <= last:
        size = 1
        while size < (1 << depth):
            nxt = size << 1
            if pos % nxt != 0 or pos + nxt - 1 > last:
                break
            size = nxt
        level = depth - size.bit_length() + 1
        ids.append(NodeId(level, pos // size))
        pos += size
    return ids


def _check_range(params: TreeParams, first: int, last: int) -> None:
    if not (0 <= first <= last < params.n_epochs):
        raise RangeInvalidError(
            f"epoch range [{first}, {last}] invalid for a depth-{params.depth} tree")


class KeyStore:
    """An immutable set of node keys with pairwise disjoint coverage.

    Disjointness implies the antichain invariant (an ancestor's span
    contains its descendant's), which is asserted on every construction.
    """

    __slots__ = ("params", "_nodes")

    def __init__(self, params: TreeParams, nodes: Iterable[NodeKey]):
        self.params = params
        ordered = sorted(nodes, key=lambda nk: nk.id.span(params.depth)[0])
        prev_last = -1
        for nk in ordered:
            nk.id.validate(params.depth)
            first, last = nk.id.span(params.depth)
            if first <= prev_last:
                raise MalformedStoreError(
                    f"overlapping coverage at {nk.id}; store is not an antichain")
            prev_last = last
        self._nodes = tuple(ordered)

    @classmethod
    def from_seed(cls, params: TreeParams, seed: bytes) -> "KeyStore":
        """Store holding the root only: derives every epoch of the tree."""
        return cls(params, [NodeKey(NodeId(0, 0), seed)])

    @classmethod
    def empty(cls, params: TreeParams) -> "KeyStore":
        return cls(params, [])

    @property
    def nodes(self) -> tuple[NodeKey, ...]:
        return self._nodes

    @property
    def node_ids(self) -> tuple[NodeId, ...]:
        return tuple(nk.id for nk in self._nodes)

    def __len__(self) -> int:
        return len(self._nodes)

    def __iter__(self) -> Iterator[NodeKey]:
        return iter(self._nodes)

    def _covering_node(self, epoch: int) -> NodeKey | None:
        for nk in self._nodes:
            first, last = nk.id.span(self.params.depth)
            if first <= epoch <= last:
                return nk
            if first > epoch:
                break
        return None

    def derivable(self, epoch: int) -> bool:
        _check_range(self.params, epoch, epoch)
        return self._covering_node(epoch) is not None

    def coverage_bitmap(self) -> int:
        """Bit ``e`` set iff epoch ``e`` is derivable. Test/oracle aid."""
        bits = 0
        for nk in self._nodes:
            first, last = nk.id.span(self.params.depth)
            bits |= ((1 << (last - first + 1)) - 1) << first
        return bits

    def _walk_down(self, start: NodeKey, target: NodeId) -> NodeKey:
        # target must lie in start's subtree
        steps = target.level - start.id.level
        assert target.index >> steps == start.id.index
        if steps == 0:
            # hand out a copy: callers own (and may wipe) what they extract
            return NodeKey(start.id, start.key)
        nk = start
        for k in range(steps - 1, -1, -1):
            bit = (target.index >> k) & 1
            nk = derive_child(nk, "right" if bit else "left", self.params.depth)
        return nk

    def extract(self, epoch: int) -> NodeKey:
        """Leaf key for ``epoch``, derived from the covering stored node."""
        _check_range(self.params, epoch, epoch)
        src = self._covering_node(epoch)
        if src is None:
            raise NoAccessError(f"no stored node covers epoch {epoch}")
        return self._walk_down(src, NodeId(self.params.depth, epoch))

    def extract_at(self, t_ms: int) -> NodeKey:
        return self.extract(self.params.epoch_of(t_ms))

    def delegate_keys(self, first: int, last: int) -> list[NodeKey]:
        """Node keys for the minimal cover of [first, last].

        A store built from the result derives exactly those epochs.
        Partial coverage is an error, never a silent truncation.
        """
        ids = cover_set(self.params, first, last)
        out = []
        for nid in ids:
            span_first, span_last = nid.span(self.params.depth)
            src = self._covering_node(span_first)
            if src is None or src.id.span(self.params.depth)[1] < span_last:
                raise NoAccessError(
                    f"store cannot derive all of epochs [{first}, {last}]")
            out.append(self._walk_down(src, nid))
        return out

    def delegated(self, first: int, last: int) -> "KeyStore":
        return KeyStore(self.params, self.delegate_keys(first, last))

    def delete_range(self, first: int, last: int) -> "KeyStore":
        """Store deriving nothing in [first, last] and the same epochs elsewhere.

        Each stored node overlapping the range is replaced by the cover
        of its surviving sub-intervals; at most ``2*depth`` nodes are
        added per contiguous range.
        """
        _check_range(self.params, first, last)
        depth = self.params.depth
        kept: list[NodeKey] = []
        for nk in self._nodes:
            nfirst, nlast = nk.id.span(depth)
            if nlast < first or nfirst > last:
                kept.append(nk)
                continue
            for sub_first, sub_last in ((nfirst, first - 1), (last + 1, nlast)):
                if sub_first <= sub_last:
                    for nid in cover_set(self.params, sub_first, sub_last):
                        kept.append(self._walk_down(nk, nid))
        return KeyStore(self.params, kept)

    def advance_frontier(self, last_finished: int) -> "KeyStore":
        """Drop everything up to and including epoch ``last_finished``.

        For a store that covers a contiguous suffix (the recording
        device's case) the result is the canonical suffix cover of at
        most ``depth`` nodes.  Keys no longer referenced are zeroized
        once the previous store is released.
        """
        return self.delete_range(0, last_finished)

    def to_bytes(self) -> bytes:
        out = bytearray(_STORE_HEADER.pack(
            STORE_MAGIC, self.params.depth, self.params.epoch_seconds,
            self.params.origin_ms, len(self._nodes)))
        for nk in self._nodes:
            out += _STORE_NODE.pack(nk.id.level, nk.id.index, nk.key)
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes, params: TreeParams | None = None) -> "KeyStore":
        if len(data) < _STORE_HEADER.size:
            raise MalformedStoreError("store blob shorter than header")
        magic, depth, eps, origin, count = _STORE_HEADER.unpack_from(data)
        if magic != STORE_MAGIC:
            if magic[:3] == STORE_MAGIC[:3]:
                raise VersionMismatchError(f"unsupported store version {magic!r}")
            raise MalformedStoreError("bad store magic")
        try:
            file_params = TreeParams(depth, eps, origin)
        except RangeInvalidError as exc:
            raise MalformedStoreError(str(exc)) from exc
        if params is not None and params != file_params:
            raise MalformedStoreError("store parameters do not match expected tree")
        expected = _STORE_HEADER.size + count * _STORE_NODE.size
        if len(data) != expected:
            raise MalformedStoreError("store blob length mismatch")
        nodes = []
        pos = _STORE_HEADER.size
        for _ in range(count):
            level, index, key = _STORE_NODE.unpack_from(data, pos)
            pos += _STORE_NODE.size
            nid = NodeId(level, index)
            try:
                nid.validate(depth)
            except RangeInvalidError as exc:
                raise MalformedStoreError(str(exc)) from exc
            nodes.append(NodeKey(nid, key))
        return cls(file_params, nodes)
