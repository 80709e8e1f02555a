"""Owner/delegatee node: verified streaming, frame dropping, metrics.

The viewing pipeline is download -> verify -> decrypt -> schedule, and
verification always comes first: a block whose signature (or structure)
does not check out is quarantined, never fed to the key store.  Frames
the store cannot derive keys for are surfaced as explicit no-access
markers, not silently skipped.

Live mode keeps playback near a target delay by uniformly dropping
frames: when the measured delay D exceeds the target L, a fraction
p = min(0.9, (D - L) / D) of frames is dropped, spread evenly by an
error accumulator so the output never stutters in bursts.
"""

import json
import logging
import time
from dataclasses import dataclass, field

from .errors import (
    BlockNotFoundError,
    MalformedBlockError,
    SignatureInvalidError,
    StorageUnavailableError,
)
from .metrics import StageTimings
from .protocols import (
    AdminOperation,
    CameraDevice,
    DelegateeContext,
    OwnerContext,
    run_admin,
    run_delegation,
    run_recovery,
)
from .storage import BlockMeta
from .streamcrypto import FrameOutcome, VerifyingKey, decode_block, decrypt_block
from .timebase import Clock, RealClock

logger = logging.getLogger(__name__)

DEFAULT_TARGET_DELAY_MS = 2000.0
DROP_FRACTION_CAP = 0.9


@dataclass
class StreamSession:
    """Mutable state of one viewing session."""

    live: bool = False
    from_ms: int = 0
    to_ms: int = 0
    target_delay_ms: float = DEFAULT_TARGET_DELAY_MS
    fps: int = 10
    current_delay_ms: float = 0.0
    received: int = 0
    rendered: int = 0
    dropped: int = 0
    no_access: int = 0
    quarantined: int = 0
    _drop_acc: float = 0.0

    def drop_fraction(self, delay_ms: float) -> float:
        if delay_ms <= self.target_delay_ms:
            return 0.0
        return min(DROP_FRACTION_CAP, (delay_ms - self.target_delay_ms) / delay_ms)

    def drop_decision(self, frame_index: int, delay_ms: float,
                      target_delay_ms: float | None = None,
                      fps: int | None = None) -> str:
        """"render" or "drop" for the frame now at the scheduling stage.

        Deterministic: the drop fraction feeds an error accumulator, so
        for steady delay the dropped frames are evenly spaced (gaps of
        floor(1/p) or ceil(1/p)).  ``fps`` is accepted for symmetry with
        the session configuration; the fraction depends only on delay.
        """
        if target_delay_ms is not None:
            self.target_delay_ms = target_delay_ms
        self.current_delay_ms = delay_ms
        self._drop_acc += self.drop_fraction(delay_ms)
        if self._drop_acc >= 1.0:
            self._drop_acc -= 1.0
            return "drop"
        return "render"


@dataclass(frozen=True, slots=True)
class RenderedFrame:
    timestamp_ms: int
    payload: bytes
    delay_ms: float = 0.0


@dataclass
class StreamResult:
    session: StreamSession
    frames: list[RenderedFrame] = field(default_factory=list)
    no_access_ms: list[int] = field(default_factory=list)
    quarantined: list[tuple[int, str]] = field(default_factory=list)  # (start_ms, why)
    timings: StageTimings = field(default_factory=StageTimings)
    e2e_delays_ms: list[float] = field(default_factory=list)

    def delays_jsonl(self) -> str:
        return "\n".join(json.dumps({"frame": i, "delay_ms": d})
                         for i, d in enumerate(self.e2e_delays_ms)) + "\n"


def fetch_block_outcomes(ctx, store, meta: BlockMeta,
                         timings: StageTimings) -> list[FrameOutcome]:
    """Download and fully check one block.

    Raises SignatureInvalid for anything that fails before decryption:
    undecodable bytes, header inconsistencies, bad signature.  The key
    store is never consulted for such blocks.
    """
    t0 = time.perf_counter()
    data = store.get_block(meta.locator.camera_id, meta.locator.start_ms)
    timings.add("download", (time.perf_counter() - t0) * 1000.0)
    try:
        block = decode_block(data)
    except MalformedBlockError as exc:
        raise SignatureInvalidError(f"block does not decode: {exc}") from exc
    return decrypt_block(ctx.store, VerifyingKey.from_der(_rsa_der(ctx)), block,
                         expected_camera_id=ctx.camera_id,
                         expected_start_ms=meta.locator.start_ms,
                         timing_hook=timings.add)


def _rsa_der(ctx) -> bytes:
    return ctx.camera_pub.rsa_der


def _ingest(outcomes: list[FrameOutcome], session: StreamSession,
            result: StreamResult, from_ms: int, to_ms: int,
            delay_of=None) -> None:
    for oc in outcomes:
        if not from_ms <= oc.timestamp_ms <= to_ms:
            continue
        if oc.error == "no_access":
            session.no_access += 1
            result.no_access_ms.append(oc.timestamp_ms)
            continue
        if oc.error is not None:
            session.quarantined += 1
            result.quarantined.append((oc.timestamp_ms, oc.error))
            continue
        session.received += 1
        if delay_of is None:
            session.rendered += 1
            result.frames.append(RenderedFrame(oc.timestamp_ms, oc.frame.payload))
            continue
        delay = delay_of(oc.timestamp_ms)
        if session.drop_decision(session.received - 1, delay) == "drop":
            session.dropped += 1
        else:
            session.rendered += 1
            result.frames.append(RenderedFrame(oc.timestamp_ms, oc.frame.payload, delay))
            result.e2e_delays_ms.append(delay)


def stream_range(ctx, store, from_ms: int | None = None,
                 to_ms: int | None = None) -> StreamResult:
    """Historical playback: every accessible frame in the range, in order."""
    params = ctx.params
    if from_ms is None:
        from_ms = params.origin_ms
    if to_ms is None:
        to_ms = params.origin_ms + params.lifespan_seconds() * 1000 - 1
    session = StreamSession(live=False, from_ms=from_ms, to_ms=to_ms)
    result = StreamResult(session=session)
    for meta in store.list_blocks(ctx.camera_id, from_ms, to_ms):
        try:
            outcomes = fetch_block_outcomes(ctx, store, meta, result.timings)
        except SignatureInvalidError as exc:
            logger.warning("quarantining block %d: %s", meta.locator.start_ms, exc)
            session.quarantined += 1
            result.quarantined.append((meta.locator.start_ms, str(exc)))
            continue
        except (BlockNotFoundError, StorageUnavailableError) as exc:
            logger.warning("skipping block %d: %s", meta.locator.start_ms, exc)
            continue
        _ingest(outcomes, session, result, from_ms, to_ms)
    return result


def stream_live(ctx, store, duration_ms: int, clock: Clock | None = None,
                target_delay_ms: float = DEFAULT_TARGET_DELAY_MS,
                fps: int = 10, poll_floor_ms: float = 500.0) -> StreamResult:
    """Live tail of the recording with the uniform-drop policy applied.

    Polls the store at most every min(block duration, poll_floor_ms) and
    keeps going through quarantined blocks and storage hiccups.
    """
    clock = clock or RealClock()
    params = ctx.params
    block_span_ms = 1000.0 * params.epoch_seconds  # upper bound on block length
    poll_ms = min(block_span_ms, poll_floor_ms)
    start = clock.now_ms()
    session = StreamSession(live=True, from_ms=start,
                            target_delay_ms=target_delay_ms, fps=fps)
    result = StreamResult(session=session)
    seen: set[int] = set()
    watermark = params.origin_ms
    while clock.now_ms() < start + duration_ms:
        try:
            metas = store.list_blocks(ctx.camera_id, watermark, clock.now_ms())
        except StorageUnavailableError:
            clock.sleep_ms(poll_ms)
            continue
        for meta in metas:
            if meta.locator.start_ms in seen:
                continue
            seen.add(meta.locator.start_ms)
            try:
                outcomes = fetch_block_outcomes(ctx, store, meta, result.timings)
            except SignatureInvalidError as exc:
                logger.warning("quarantining block %d: %s",
                               meta.locator.start_ms, exc)
                session.quarantined += 1
                result.quarantined.append((meta.locator.start_ms, str(exc)))
                continue
            except (BlockNotFoundError, StorageUnavailableError):
                seen.discard(meta.locator.start_ms)
                continue
            _ingest(outcomes, session, result, 0, 2**63 - 1,
                    delay_of=lambda t: max(0.0, clock.now_ms() - t))
            watermark = max(watermark, meta.end_ms + 1)
        clock.sleep_ms(poll_ms)
    return result


# --- deterministic live-pipeline simulator -----------------------------------
#
# Models a single-threaded viewer: block downloads and per-frame decode
# and render costs advance a virtual clock; dropping a frame skips its
# render cost.  This is how the drop policy's qualitative behavior
# (bounded delay, share of drops rising with frame rate, even spacing)
# is exercised without wall-clock time or real crypto.

@dataclass
class LiveSimProfile:
    fps: int = 10
    n_frames: int = 1000
    block_size: int = 32
    target_delay_ms: float = DEFAULT_TARGET_DELAY_MS
    per_block_download_ms: float = 0.0
    per_frame_decrypt_ms: float = 0.1
    per_frame_render_ms: float = 0.0
    upload_latency_ms: float = 20.0


@dataclass(frozen=True, slots=True)
class SimFrameRecord:
    index: int
    capture_ms: float
    decision_delay_ms: float   # delay D seen by the scheduler
    drop_fraction: float       # p in effect for this frame
    dropped: bool
    block_wait_ms: float       # capture -> block downloaded
    in_block_wait_ms: float    # download done -> this frame scheduled


@dataclass
class LiveSimResult:
    session: StreamSession
    records: list[SimFrameRecord]

    @property
    def drop_indices(self) -> list[int]:
        return [r.index for r in self.records if r.dropped]

    @property
    def drop_proportion(self) -> float:
        return len(self.drop_indices) / max(1, len(self.records))

    def rendered_delays(self, tail_fraction: float = 1.0) -> list[float]:
        rendered = [r.decision_delay_ms for r in self.records if not r.dropped]
        cut = int(len(rendered) * (1.0 - tail_fraction))
        return rendered[cut:]

    def steady_state_delay_ms(self, tail_fraction: float = 0.5) -> float:
        tail = self.rendered_delays(tail_fraction)
        return sum(tail) / max(1, len(tail))

    def tail_records(self, tail_fraction: float = 0.5) -> list[SimFrameRecord]:
        cut = int(len(self.records) * (1.0 - tail_fraction))
        return self.records[cut:]


def simulate_live_stream(profile: LiveSimProfile) -> LiveSimResult:
    interval = 1000.0 / profile.fps
    session = StreamSession(live=True, target_delay_ms=profile.target_delay_ms,
                            fps=profile.fps)
    records: list[SimFrameRecord] = []
    now = 0.0
    n_blocks = (profile.n_frames + profile.block_size - 1) // profile.block_size
    for b in range(n_blocks):
        first = b * profile.block_size
        last = min(profile.n_frames, first + profile.block_size) - 1
        available = last * interval + profile.upload_latency_ms
        now = max(now, available)
        now += profile.per_block_download_ms
        downloaded_at = now
        for i in range(first, last + 1):
            capture = i * interval
            now += profile.per_frame_decrypt_ms
            delay = now - capture
            p = session.drop_fraction(delay)
            dropped = session.drop_decision(i, delay) == "drop"
            session.received += 1
            if dropped:
                session.dropped += 1
            else:
                session.rendered += 1
                now += profile.per_frame_render_ms
            records.append(SimFrameRecord(
                index=i, capture_ms=capture, decision_delay_ms=delay,
                drop_fraction=p, dropped=dropped,
                block_wait_ms=downloaded_at - capture,
                in_block_wait_ms=delay - (downloaded_at - capture)))
    return LiveSimResult(session=session, records=records)


# --- thin wrappers over the protocol flows ------------------------------------

def delegate(ctx: OwnerContext, first_epoch: int, last_epoch: int,
             channels=None, delegatee_identity=None) -> DelegateeContext:
    return run_delegation(ctx, first_epoch, last_epoch, channels=channels,
                          delegatee_identity=delegatee_identity)


def delete_range(ctx: OwnerContext, device: CameraDevice,
                 first_epoch: int, last_epoch: int,
                 now_ms: int | None = None) -> None:
    now = now_ms if now_ms is not None else RealClock().now_ms()
    run_admin(ctx, device, AdminOperation.delete_range(first_epoch, last_epoch), now)


def factory_reset(ctx: OwnerContext, device: CameraDevice,
                  now_ms: int | None = None) -> None:
    now = now_ms if now_ms is not None else RealClock().now_ms()
    run_admin(ctx, device, AdminOperation.factory_reset(), now)


def recover(device: CameraDevice, passphrase: str) -> OwnerContext:
    return run_recovery(device, passphrase)
