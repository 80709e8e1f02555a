import gc
import math

import pytest

from privcam import client
from privcam.camera import (
    CameraConfig,
    Recorder,
    handle_admin,
    make_frame_payload,
    parse_frame_payload,
)
from privcam.errors import BeyondLifespanError, StorageUnavailableError
from privcam.keytree import live_node_keys
from privcam.protocols import (
    AdminOperation,
    CameraDevice,
    PairingConfig,
    issue_admin,
    run_init_pairing,
)
from privcam.storage import InMemoryBlobStore
from privcam.streamcrypto import VerifyingKey, decode_block, verify_block
from privcam.timebase import VirtualClock


@pytest.fixture
def rig(factory_identity, owner_identity, camera_op_identity):
    device = CameraDevice(factory_identity)
    ctx, passphrase = run_init_pairing(
        device, config=PairingConfig(depth=8, epoch_seconds=2, origin_ms=0),
        owner_identity=owner_identity, camera_op_identity=camera_op_identity)
    return device, ctx, passphrase, InMemoryBlobStore()


def small_config(**kw):
    defaults = dict(frame_rate=10, frame_bytes=256, block_size=10,
                    upload_backoff_ms=0.01)
    defaults.update(kw)
    return CameraConfig(**defaults)


def test_frame_payload_round_trip():
    payload = make_frame_payload(b"\x01" * 16, 7, 1234, 100)
    assert len(payload) == 100
    assert parse_frame_payload(payload) == (b"\x01" * 16, 7, 1234)


def test_three_epoch_run_block_count_and_verification(rig):
    device, ctx, _, store = rig
    # 3 epochs at 2 s and 10 fps with 10-frame blocks: 60 frames, 6 blocks
    stats = Recorder(device, small_config(), store).record(60)
    assert stats.frames_captured == 60
    assert stats.blocks_uploaded == math.ceil(60 / 10)
    vk = VerifyingKey.from_der(ctx.camera_pub.rsa_der)
    metas = store.list_blocks(device.camera_id, 0, 2 ** 62)
    assert len(metas) == 6
    for meta in metas:
        block = decode_block(store.get_block(device.camera_id,
                                             meta.locator.start_ms))
        assert verify_block(vk, block, expected_camera_id=device.camera_id,
                            expected_start_ms=meta.locator.start_ms)
    # every uploaded block decrypts under the owner's root store
    result = client.stream_range(ctx, store)
    assert result.session.rendered == 60


def test_frontier_advances_and_old_epochs_unreachable(rig):
    device, _, _, store = rig
    Recorder(device, small_config(), store).record(60)  # finishes during epoch 2
    assert not device.store.derivable(0)
    assert not device.store.derivable(1)
    assert device.store.derivable(2)


def test_camera_store_bounded_by_depth(rig):
    device, _, _, store = rig
    config = small_config(block_size=5)
    recorder = Recorder(device, config, store)
    for chunk in range(6):
        recorder.record(20, start_ms=chunk * 2000, start_counter=chunk * 20)
        assert len(device.store) <= 8


def test_secure_erase_audit(rig):
    device, _, _, store = rig
    Recorder(device, small_config(), store).record(60)
    gc.collect()
    stale = [nk for nk in live_node_keys()
             if nk.id.level == 8 and nk.id.index < 2]
    assert stale == [], f"retired leaf keys still live: {stale}"


def test_blocks_cut_at_epoch_boundaries(rig):
    device, _, _, store = rig
    # 25-frame blocks would span the 20-frame epochs; boundary must cut them
    Recorder(device, small_config(block_size=25), store).record(60)
    params = device.store.params
    for meta in store.list_blocks(device.camera_id, 0, 2 ** 62):
        assert params.epoch_of(meta.locator.start_ms) == params.epoch_of(meta.end_ms)


class FlakyStore:
    """Fails a window of put calls, then recovers."""

    def __init__(self, inner, fail_from: int, fail_until: int):
        self.inner = inner
        self.calls = 0
        self.window = range(fail_from, fail_until)

    def put_block(self, camera_id, start_ms, data):
        self.calls += 1
        if self.calls - 1 in self.window:
            raise StorageUnavailableError("simulated outage")
        return self.inner.put_block(camera_id, start_ms, data)

    def __getattr__(self, name):
        return getattr(self.inner, name)


def test_outage_buffers_then_flushes_in_order(rig):
    device, ctx, _, store = rig
    flaky = FlakyStore(store, fail_from=2, fail_until=1000)
    config = small_config(upload_max_attempts=2)
    recorder = Recorder(device, config, flaky, clock=VirtualClock())
    stats = recorder.record(60)
    assert stats.blocks_uploaded + stats.blocks_pending == 6
    assert stats.blocks_pending > 0
    partial = client.stream_range(ctx, store)
    assert partial.session.rendered < 60

    # storage recovers; buffered blocks flush and nothing is corrupted
    flaky.window = range(0)
    flushed = recorder.flush_pending()
    assert flushed == stats.blocks_pending
    full = client.stream_range(ctx, store)
    assert full.session.rendered == 60
    from privcam.camera import parse_frame_payload
    counters = [parse_frame_payload(f.payload)[1] for f in full.frames]
    assert counters == sorted(counters)


def test_beyond_lifespan_halts(rig):
    device, _, _, store = rig
    with pytest.raises(BeyondLifespanError):
        # depth 8, 2 s epochs: lifespan 512 s; run past it
        Recorder(device, small_config(), store).record(6000)


def test_recording_skips_pre_deleted_epochs(rig):
    device, ctx, _, store = rig
    now = 100  # within epoch 0
    req = issue_admin(ctx, AdminOperation.delete_range(1, 1), now)
    handle_admin(device, req, now)
    stats = Recorder(device, small_config(), store).record(60)
    assert stats.frames_skipped_no_key == 20  # epoch 1's frames
    assert stats.frames_captured == 40


def test_config_validation():
    with pytest.raises(ValueError):
        CameraConfig(frame_rate=0)
    with pytest.raises(ValueError):
        CameraConfig(frame_bytes=8)
