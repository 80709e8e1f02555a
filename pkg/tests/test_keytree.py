import gc
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from privcam.errors import (
    BeforeOriginError,
    BeyondLifespanError,
    KeyWipedError,
    MalformedStoreError,
    NoAccessError,
    ParentIsLeafError,
    RangeInvalidError,
    VersionMismatchError,
)
from privcam.keytree import (
    KeyStore,
    NodeId,
    NodeKey,
    TreeParams,
    cover_set,
    derive_child,
)

from oracles import LeafAccessModel, leaf_keys_ref, min_cover_size_ref

SEED = b"\x42" * 32


def root_store(depth: int, epoch_seconds: int = 10, origin: int = 0) -> KeyStore:
    return KeyStore.from_seed(TreeParams(depth, epoch_seconds, origin), SEED)


# --- derivation ------------------------------------------------------------------

def test_derive_child_deterministic():
    parent = NodeKey(NodeId(0, 0), SEED)
    a = derive_child(parent, "left", depth=3)
    b = derive_child(parent, "left", depth=3)
    assert a.key == b.key
    assert a.id == NodeId(1, 0)


def test_derive_child_sides_differ():
    parent = NodeKey(NodeId(0, 0), SEED)
    left = derive_child(parent, "left", depth=3)
    right = derive_child(parent, "right", depth=3)
    assert left.key != right.key
    assert right.id == NodeId(1, 1)


def test_derive_child_rejects_leaf():
    leaf = NodeKey(NodeId(3, 5), SEED)
    with pytest.raises(ParentIsLeafError):
        derive_child(leaf, "left", depth=3)


def test_depth3_leaves_match_hand_rolled_reference():
    # independent oracle: raw hmac/hashlib HKDF walked along all 8 paths
    expected = leaf_keys_ref(SEED, 3)
    store = root_store(3)
    got = [store.extract(e).key for e in range(8)]
    assert got == expected


@pytest.mark.parametrize("depth", [1, 2, 5, 8])
def test_extract_matches_full_tree_oracle(depth):
    expected = leaf_keys_ref(SEED, depth)
    store = root_store(depth)
    for e in range(1 << depth):
        assert store.extract(e).key == expected[e]


# --- epoch arithmetic ---------------------------------------------------------------

def test_epoch_of_origin_is_zero():
    params = TreeParams(3, 10, 1_000)
    assert params.epoch_of(1_000) == 0


def test_epoch_of_half_open_boundary():
    params = TreeParams(3, 10, 0)
    assert params.epoch_of(9_999) == 0
    assert params.epoch_of(10_000) == 1


def test_epoch_of_floor():
    params = TreeParams(3, 10, 0)
    assert params.epoch_of(35_000) == 3


def test_epoch_of_bounds():
    params = TreeParams(3, 10, 500)
    with pytest.raises(BeforeOriginError):
        params.epoch_of(499)
    with pytest.raises(BeyondLifespanError):
        params.epoch_of(500 + 8 * 10_000)


# --- lifespan and storage tables ------------------------------------------------------

@pytest.mark.parametrize("depth,years10,years60", [
    (24, 5, 32), (26, 21, 128), (28, 85, 511), (30, 340, 2043), (32, 1362, 8172),
])
def test_lifespan_years_table(depth, years10, years60):
    assert round(TreeParams(depth, 10, 0).lifespan_years()) == years10
    assert round(TreeParams(depth, 60, 0).lifespan_years()) == years60


def test_lifespan_tiny_tree():
    assert TreeParams(1, 1, 0).lifespan_seconds() == 2


@pytest.mark.parametrize("depth,expected", [
    (24, 256 << 20), (26, 1 << 30), (28, 4 << 30), (30, 16 << 30), (32, 64 << 30),
    (1, 32),
])
def test_worst_case_storage(depth, expected):
    assert TreeParams(depth, 10, 0).worst_case_key_storage_bytes() == expected


# --- cover sets -------------------------------------------------------------------------

def test_cover_full_range_is_root():
    params = TreeParams(4, 10, 0)
    assert cover_set(params, 0, 15) == [NodeId(0, 0)]


def test_cover_examples_depth3():
    params = TreeParams(3, 10, 0)
    assert cover_set(params, 2, 3) == [NodeId(2, 1)]
    assert cover_set(params, 1, 6) == [NodeId(3, 1), NodeId(2, 1),
                                       NodeId(2, 2), NodeId(3, 6)]


def test_cover_rejects_bad_range():
    params = TreeParams(3, 10, 0)
    with pytest.raises(RangeInvalidError):
        cover_set(params, 5, 3)
    with pytest.raises(RangeInvalidError):
        cover_set(params, 0, 8)


@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_cover_minimality_exhaustive_small(depth):
    params = TreeParams(depth, 10, 0)
    n = 1 << depth
    for a in range(n):
        for b in range(a, n):
            cover = cover_set(params, a, b)
            assert len(cover) == min_cover_size_ref(depth, a, b)
            assert len(cover) <= 2 * depth
            # exact partition, sorted by start
            spans = [nid.span(depth) for nid in cover]
            assert spans[0][0] == a and spans[-1][1] == b
            for (f1, l1), (f2, l2) in zip(spans, spans[1:]):
                assert f2 == l1 + 1


@given(depth=st.integers(1, 10), data=st.data())
@settings(max_examples=150, deadline=None)
def test_cover_partitions_exactly(depth, data):
    n = 1 << depth
    a = data.draw(st.integers(0, n - 1))
    b = data.draw(st.integers(a, n - 1))
    params = TreeParams(depth, 10, 0)
    covered = []
    for nid in cover_set(params, a, b):
        first, last = nid.span(depth)
        covered.extend(range(first, last + 1))
    assert covered == list(range(a, b + 1))


# --- delegation --------------------------------------------------------------------------

def test_delegate_single_epoch_is_one_leaf():
    store = root_store(3)
    keys = store.delegate_keys(5, 5)
    assert [nk.id for nk in keys] == [NodeId(3, 5)]


def test_delegated_store_derives_exactly_the_range():
    store = root_store(3)
    sub = store.delegated(2, 3)
    assert [nk.id for nk in sub.nodes] == [NodeId(2, 1)]
    expected = leaf_keys_ref(SEED, 3)
    for e in range(8):
        if 2 <= e <= 3:
            assert sub.extract(e).key == expected[e]
        else:
            with pytest.raises(NoAccessError):
                sub.extract(e)


def test_redelegation_within_and_outside_window():
    sub = root_store(3).delegated(2, 3)
    again = sub.delegated(2, 2)
    assert again.derivable(2) and not again.derivable(3)
    with pytest.raises(NoAccessError):
        sub.delegate_keys(1, 2)  # partial coverage must not silently truncate


def test_one_wayness_proxy_exhaustive_depth5():
    # holding any delegated cover never reaches an epoch outside the range
    store = root_store(5)
    n = 1 << 5
    rng = random.Random(7)
    for _ in range(40):
        a = rng.randrange(n)
        b = rng.randrange(a, n)
        sub = store.delegated(a, b)
        for e in range(n):
            if a <= e <= b:
                sub.extract(e)
            else:
                with pytest.raises(NoAccessError):
                    sub.extract(e)


# --- deletion and frontier -----------------------------------------------------------------

def test_delete_first_epoch_retains_spine():
    # depth-3 tree, epochs A..H: deleting A must retain exactly
    # {B, CD, EFGH} so everything else stays decryptable
    after = root_store(3).delete_range(0, 0)
    assert set(after.node_ids) == {NodeId(3, 1), NodeId(2, 1), NodeId(1, 1)}
    expected = leaf_keys_ref(SEED, 3)
    for e in range(1, 8):
        assert after.extract(e).key == expected[e]
    with pytest.raises(NoAccessError):
        after.extract(0)


def test_delete_full_range_empties_store():
    after = root_store(3).delete_range(0, 7)
    assert len(after) == 0
    assert after.coverage_bitmap() == 0


def test_delete_random_ranges_match_leaf_model():
    rng = random.Random(123)
    for depth in (2, 4, 6, 8):
        store = root_store(depth)
        model = LeafAccessModel(depth)
        n = 1 << depth
        for _ in range(12):
            a = rng.randrange(n)
            b = rng.randrange(a, n)
            store = store.delete_range(a, b)
            model = model.delete_range(a, b)
            assert store.coverage_bitmap() == model.bitmap()


def test_delete_growth_bound():
    for depth in (4, 8, 12):
        store = root_store(depth)
        n = 1 << depth
        after = store.delete_range(n // 2 - 1, n // 2)
        assert len(after) <= len(store) + 2 * depth


def test_advance_frontier_after_first_epoch():
    after = root_store(3).advance_frontier(0)
    assert set(after.node_ids) == {NodeId(3, 1), NodeId(2, 1), NodeId(1, 1)}
    assert len(after) <= 3


def test_advance_frontier_past_everything():
    after = root_store(3).advance_frontier(7)
    assert len(after) == 0


@pytest.mark.parametrize("depth", [1, 3, 6, 9])
def test_advance_frontier_sweep(depth):
    n = 1 << depth
    for j in range(n):
        after = root_store(depth).advance_frontier(j)
        assert len(after) <= depth
        expected_bitmap = ((1 << n) - 1) & ~((1 << (j + 1)) - 1)
        assert after.coverage_bitmap() == expected_bitmap


def test_sequential_frontier_stays_canonical():
    depth = 6
    store = root_store(depth)
    for j in range(1 << depth):
        store = store.advance_frontier(j)
        assert len(store) <= depth


# --- invariants ---------------------------------------------------------------------

def _assert_antichain(store: KeyStore) -> None:
    spans = sorted(nk.id.span(store.params.depth) for nk in store.nodes)
    for (f1, l1), (f2, l2) in zip(spans, spans[1:]):
        assert f2 > l1, "stored coverage intervals overlap"


@given(depth=st.integers(1, 8), ops=st.lists(st.tuples(st.integers(0, 2 ** 8 - 1),
                                                       st.integers(0, 2 ** 8 - 1)),
                                             max_size=8))
@settings(max_examples=120, deadline=None)
def test_antichain_preserved_by_random_deletions(depth, ops):
    store = root_store(depth)
    model = LeafAccessModel(depth)
    n = 1 << depth
    for x, y in ops:
        a, b = sorted((x % n, y % n))
        store = store.delete_range(a, b)
        model = model.delete_range(a, b)
        _assert_antichain(store)
        assert store.coverage_bitmap() == model.bitmap()


def test_store_constructor_rejects_overlap():
    params = TreeParams(3, 10, 0)
    with pytest.raises(MalformedStoreError):
        KeyStore(params, [NodeKey(NodeId(0, 0), SEED), NodeKey(NodeId(2, 1), SEED)])


# --- zeroization ------------------------------------------------------------------------

def test_wipe_blocks_reads():
    nk = NodeKey(NodeId(0, 0), SEED)
    nk.wipe()
    assert nk.wiped
    with pytest.raises(KeyWipedError):
        _ = nk.key


def test_extract_returns_caller_owned_copy():
    store = root_store(3).advance_frontier(0)  # leaf (3,1) is now a stored node
    leaf = store.extract(1)
    leaf.wipe()
    assert store.extract(1).key  # the store's own copy is untouched


def test_released_store_wipes_dropped_keys():
    store = root_store(4)
    survivor = store.advance_frontier(3)
    # watch the raw buffers: holding NodeKey objects would keep them alive
    dropped_bufs = [nk._buf for nk in store.nodes]
    del store
    gc.collect()
    assert all(len(buf) == 0 for buf in dropped_bufs)
    assert all(not nk.wiped for nk in survivor.nodes)


# --- serialization -----------------------------------------------------------------------

def test_store_round_trip():
    store = root_store(5, epoch_seconds=7, origin=123456).delete_range(3, 9)
    blob = store.to_bytes()
    back = KeyStore.from_bytes(blob, store.params)
    assert back.node_ids == store.node_ids
    assert [nk.key for nk in back.nodes] == [nk.key for nk in store.nodes]
    assert back.params == store.params


def test_store_version_mismatch():
    blob = bytearray(root_store(3).to_bytes())
    blob[3] = ord("9")
    with pytest.raises(VersionMismatchError):
        KeyStore.from_bytes(bytes(blob))


def test_store_malformed():
    blob = root_store(3).to_bytes()
    with pytest.raises(MalformedStoreError):
        KeyStore.from_bytes(blob[:10])
    with pytest.raises(MalformedStoreError):
        KeyStore.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(MalformedStoreError):
        KeyStore.from_bytes(blob + b"\x00")


def test_store_params_cross_check():
    store = root_store(3)
    with pytest.raises(MalformedStoreError):
        KeyStore.from_bytes(store.to_bytes(), TreeParams(4, 10, 0))


def test_params_validation():
    with pytest.raises(RangeInvalidError):
        TreeParams(0, 10, 0)
    with pytest.raises(RangeInvalidError):
        TreeParams(41, 10, 0)
    with pytest.raises(RangeInvalidError):
        TreeParams(3, 0, 0)
