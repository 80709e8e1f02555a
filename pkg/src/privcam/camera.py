"""Camera node: synthetic capture, encrypt, sign, upload, rotate, erase.

Frames are opaque timestamped blobs: a 32-byte plaintext prefix
(camera id, counter, timestamp) followed by deterministic filler, so
end-to-end tests can check ordering and freshness after decryption.

A block is cut at ``block_size`` frames or at an epoch boundary,
whichever comes first, so blocks never straddle epochs on the recording
side (straddling blocks remain legal on the wire and the viewer handles
them per frame).  After the last block of an epoch is flushed the
frontier advances and the retired keys are wiped.
"""

import logging
import random
import struct
import time
from collections import deque
from dataclasses import dataclass, field

from .errors import (
    BeyondLifespanError,
    NoAccessError,
    StorageUnavailableError,
)
from .metrics import StageTimings
from .protocols import CameraDevice, verify_and_apply_admin
from .streamcrypto import (
    DEFAULT_BLOCK_FRAMES,
    Frame,
    SigningKeypair,
    encode_block,
    encrypt_frame,
    sign_block,
)
from .timebase import Clock, RealClock

logger = logging.getLogger(__name__)

_PAYLOAD_PREFIX = struct.Struct("<16sQQ")


@dataclass
class CameraConfig:
    frame_rate: int = 10
    frame_bytes: int = 102_400
    block_size: int = DEFAULT_BLOCK_FRAMES
    upload_max_attempts: int = 5
    upload_backoff_ms: float = 50.0
    pending_block_limit: int = 1000

    def __post_init__(self):
        if self.frame_rate < 1:
            raise ValueError("frame_rate must be >= 1")
        if self.frame_bytes < _PAYLOAD_PREFIX.size:
            raise ValueError(f"frame_bytes must be >= {_PAYLOAD_PREFIX.size}")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")


def make_frame_payload(camera_id: bytes, counter: int, t_ms: int, size: int) -> bytes:
    prefix = _PAYLOAD_PREFIX.pack(camera_id, counter, t_ms)
    fill = random.Random((counter << 20) ^ t_ms).randbytes(size - len(prefix))
    return prefix + fill


def parse_frame_payload(payload: bytes) -> tuple[bytes, int, int]:
    """(camera_id, counter, t_ms) embedded by :func:`make_frame_payload`."""
    return _PAYLOAD_PREFIX.unpack_from(payload)


@dataclass
class RecordingStats:
    timings: StageTimings = field(default_factory=StageTimings)
    frames_captured: int = 0
    frames_skipped_no_key: int = 0
    blocks_uploaded: int = 0
    blocks_dropped: int = 0
    blocks_pending: int = 0


class Recorder:
    """Drives one camera device against a blob store.

    The pipeline stages (extract, encrypt, sign, upload) are timed
    individually; stage layout mirrors what the client measures so the
    two reports can be joined.
    """

    def __init__(self, device: CameraDevice, config: CameraConfig, store,
                 clock: Clock | None = None):
        if not device.initialized:
            raise NoAccessError("camera must be initialized before recording")
        self.device = device
        self.config = config
        self.store = store
        self.clock = clock or RealClock()
        self._pending: deque[tuple[int, bytes]] = deque()
        params = device.store.params
        block_span_s = config.block_size / config.frame_rate
        if block_span_s > params.epoch_seconds:
            logger.warning(
                "block duration %.1fs exceeds the %.0fs epoch; blocks will be "
                "cut short at epoch boundaries", block_span_s, params.epoch_seconds)

    def record(self, n_frames: int, start_ms: int | None = None,
               start_counter: int = 0, pace: bool = False) -> RecordingStats:
        """Capture ``n_frames`` synthetic frames starting at ``start_ms``.

        With ``pace`` the real clock is honored between frames; without
        it timestamps are synthesized at the configured cadence and the
        run completes as fast as the crypto allows.
        """
        params = self.device.store.params
        interval_ms = 1000.0 / self.config.frame_rate
        if start_ms is None:
            start_ms = params.origin_ms
        stats = RecordingStats()
        sk = SigningKeypair(self.device.op_identity.rsa_private)
        camera_id = self.device.camera_id

        buffer: list = []
        current_epoch: int | None = None
        cached_key = None
        try:
            for i in range(n_frames):
                t_ms = int(start_ms + i * interval_ms)
                try:
                    epoch = params.epoch_of(t_ms)
                except BeyondLifespanError:
                    self._flush(sk, camera_id, buffer, stats)
                    raise
                if epoch != current_epoch:
                    # epoch boundary: close the block, rotate, erase old keys
                    self._flush(sk, camera_id, buffer, stats)
                    if cached_key is not None:
                        cached_key.wipe()
                        cached_key = None
                    if current_epoch is not None:
                        self.device.store = self.device.store.advance_frontier(epoch - 1)
                    current_epoch = epoch
                if cached_key is None or cached_key.wiped:
                    t0 = time.perf_counter()
                    try:
                        cached_key = self.device.store.extract(epoch)
                    except NoAccessError:
                        # epoch was cryptographically deleted ahead of time
                        stats.frames_skipped_no_key += 1
                        continue
                    stats.timings.add("key_extraction",
                                      (time.perf_counter() - t0) * 1000.0)
                else:
                    stats.timings.add("key_extraction", 0.0)

                payload = make_frame_payload(camera_id, start_counter + i, t_ms,
                                             self.config.frame_bytes)
                t0 = time.perf_counter()
                ef = encrypt_frame(cached_key, Frame(payload, t_ms), params)
                stats.timings.add("frame_encryption",
                                  (time.perf_counter() - t0) * 1000.0)
                stats.frames_captured += 1
                buffer.append(ef)
                if len(buffer) >= self.config.block_size:
                    self._flush(sk, camera_id, buffer, stats)
                if pace:
                    self.clock.sleep_ms(interval_ms)
        finally:
            self._flush(sk, camera_id, buffer, stats)
            stats.blocks_pending = len(self._pending)
            if cached_key is not None:
                cached_key.wipe()
        return stats

    def _flush(self, sk: SigningKeypair, camera_id: bytes,
               buffer: list, stats: RecordingStats) -> None:
        if not buffer:
            return
        t0 = time.perf_counter()
        block = sign_block(sk, camera_id, buffer)
        stats.timings.add("signature", (time.perf_counter() - t0) * 1000.0)
        buffer.clear()
        self._enqueue(block.start_ms, encode_block(block), stats)

    def _enqueue(self, start_ms: int, data: bytes, stats: RecordingStats) -> None:
        self._pending.append((start_ms, data))
        while len(self._pending) > self.config.pending_block_limit:
            self._pending.popleft()
            stats.blocks_dropped += 1
        self._drain(stats)

    def _drain(self, stats: RecordingStats) -> None:
        camera_id = self.device.camera_id
        while self._pending:
            start_ms, data = self._pending[0]
            if not self._upload_with_retry(camera_id, start_ms, data, stats):
                return  # storage still down; keep buffering in order
            self._pending.popleft()
            stats.blocks_uploaded += 1

    def _upload_with_retry(self, camera_id: bytes, start_ms: int, data: bytes,
                           stats: RecordingStats) -> bool:
        backoff = self.config.upload_backoff_ms
        for attempt in range(self.config.upload_max_attempts):
            t0 = time.perf_counter()
            try:
                self.store.put_block(camera_id, start_ms, data)
            except StorageUnavailableError:
                self.clock.sleep_ms(backoff)
                backoff *= 2
                continue
            stats.timings.add("upload", (time.perf_counter() - t0) * 1000.0)
            return True
        logger.warning("upload of block %d failed %d times; buffering",
                       start_ms, self.config.upload_max_attempts)
        return False

    def flush_pending(self, stats: RecordingStats | None = None) -> int:
        """Retry buffered uploads (e.g. after the store came back)."""
        stats = stats or RecordingStats()
        self._drain(stats)
        return stats.blocks_uploaded


def handle_admin(device: CameraDevice, request_blob: bytes, now_ms: int) -> bytes:
    """Admin commands land on the control path; recording is paused here."""
    return verify_and_apply_admin(device, request_blob, now_ms)
