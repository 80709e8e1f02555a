"""Per-frame authenticated encryption and per-block signatures.

A frame is encrypted with AES-256-GCM under its epoch's leaf key; the
millisecond timestamp travels in clear but is bound into the tag as
associated data.  Blocks of up to N frames carry one RSA-PSS signature
over the concatenated GCM tags, so verifying the signature vouches for
every frame's tag, and each tag vouches for its frame's bytes and
timestamp.

Verification always precedes decryption: ``decrypt_block`` refuses to
touch the key store until the block signature (and the block's own
consistency: camera id, time bounds, timestamp order) checks out.
"""

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import rand
from .errors import (
    EmptyBlockError,
    EpochMismatchError,
    MalformedBlockError,
    NoAccessError,
    NonMonotonicTimestampsError,
    SignatureInvalidError,
    TagMismatchError,
)
from .keytree import KeyStore, NodeKey, TreeParams

IV_BYTES = 16          # stored in full; AES-GCM consumes the first 12 as nonce
TAG_BYTES = 16
CAMERA_ID_BYTES = 16
MAX_BLOCK_FRAMES = 0xFFFF
DEFAULT_BLOCK_FRAMES = 32

BLOCK_MAGIC = b"CBK1"
_BLOCK_HEADER = struct.Struct("<4s16sQQH")
_FRAME_HEADER = struct.Struct("<Q16s16sI")

_RSA_BITS = 2048
_PSS = padding.PSS(mgf=padding.MGF1(hashes.SHA256()),
                   salt_length=padding.PSS.DIGEST_LENGTH)


def _aad(timestamp_ms: int) -> bytes:
    return struct.pack(">Q", timestamp_ms)


@dataclass(frozen=True, slots=True)
class Frame:
    payload: bytes
    timestamp_ms: int

    def __post_init__(self):
        if len(self.payload) < 1:
            raise MalformedBlockError("frame payload must be non-empty")


@dataclass(frozen=True, slots=True)
class EncryptedFrame:
    ciphertext: bytes
    iv: bytes
    tag: bytes
    timestamp_ms: int


@dataclass(frozen=True, slots=True)
class SignedBlock:
    camera_id: bytes
    frames: tuple[EncryptedFrame, ...]
    signature: bytes
    start_ms: int
    end_ms: int


class VerifyingKey:
    """RSA public key restricted to PSS verification."""

    def __init__(self, public_key: rsa.RSAPublicKey):
        self._pk = public_key

    def verify(self, signature: bytes, data: bytes) -> bool:
        try:
            self._pk.verify(signature, data, _PSS, hashes.SHA256())
            return True
        except InvalidSignature:
            return False

    def to_der(self) -> bytes:
        return self._pk.public_bytes(
            serialization.Encoding.DER,
            serialization.PublicFormat.SubjectPublicKeyInfo)

    @classmethod
    def from_der(cls, data: bytes) -> "VerifyingKey":
        pk = serialization.load_der_public_key(data)
        if not isinstance(pk, rsa.RSAPublicKey):
            raise MalformedBlockError("expected an RSA public key")
        return cls(pk)


class SigningKeypair:
    """RSA-2048 keypair; signs with PSS over SHA-256."""

    def __init__(self, private_key: rsa.RSAPrivateKey):
        self._sk = private_key

    @classmethod
    def generate(cls) -> "SigningKeypair":
        return cls(rsa.generate_private_key(public_exponent=65537, key_size=_RSA_BITS))

    @property
    def private_key(self) -> rsa.RSAPrivateKey:
        return self._sk

    def sign(self, data: bytes) -> bytes:
        return self._sk.sign(data, _PSS, hashes.SHA256())

    def verifying_key(self) -> VerifyingKey:
        return VerifyingKey(self._sk.public_key())


def encrypt_frame(key: NodeKey, frame: Frame, params: TreeParams) -> EncryptedFrame:
    """AES-256-GCM with a fresh 16-byte random IV and the timestamp as AAD."""
    if key.id.level != params.depth:
        raise EpochMismatchError(f"{key.id} is not a leaf key")
    if key.id.index != params.epoch_of(frame.timestamp_ms):
        raise EpochMismatchError(
            f"leaf {key.id.index} does not cover timestamp {frame.timestamp_ms} ms")
    iv = rand.randbytes(IV_BYTES)
    sealed = AESGCM(key.key).encrypt(iv[:12], frame.payload, _aad(frame.timestamp_ms))
    return EncryptedFrame(ciphertext=sealed[:-TAG_BYTES], iv=iv,
                          tag=sealed[-TAG_BYTES:], timestamp_ms=frame.timestamp_ms)


def decrypt_frame(key: NodeKey, ef: EncryptedFrame) -> Frame:
    """Inverse of :func:`encrypt_frame`; any tampering surfaces as TagMismatch."""
    try:
        payload = AESGCM(key.key).decrypt(
            ef.iv[:12], ef.ciphertext + ef.tag, _aad(ef.timestamp_ms))
    except InvalidTag as exc:
        raise TagMismatchError(
            f"authentication failed for frame at {ef.timestamp_ms} ms") from exc
    return Frame(payload=payload, timestamp_ms=ef.timestamp_ms)


def _tag_concat(frames: Sequence[EncryptedFrame]) -> bytes:
    return b"".join(ef.tag for ef in frames)


def sign_block(sk: SigningKeypair, camera_id: bytes,
               frames: Sequence[EncryptedFrame]) -> SignedBlock:
    """Signature over the in-order concatenation of the frames' tags."""
    if len(camera_id) != CAMERA_ID_BYTES:
        raise MalformedBlockError(f"camera id must be {CAMERA_ID_BYTES} bytes")
    if not frames:
        raise EmptyBlockError("a block must contain at least one frame")
    if len(frames) > MAX_BLOCK_FRAMES:
        raise MalformedBlockError(f"at most {MAX_BLOCK_FRAMES} frames per block")
    times = [ef.timestamp_ms for ef in frames]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise NonMonotonicTimestampsError("frame timestamps must strictly increase")
    return SignedBlock(camera_id=bytes(camera_id), frames=tuple(frames),
                       signature=sk.sign(_tag_concat(frames)),
                       start_ms=times[0], end_ms=times[-1])


def verify_block(pk: VerifyingKey, block: SignedBlock,
                 expected_camera_id: bytes | None = None,
                 expected_start_ms: int | None = None) -> bool:
    """True iff the block is well formed and its signature is valid.

    The signature covers the tags only, so the unsigned header fields
    are cross-checked here: camera id and start against what the caller
    expects, time bounds against the frames' own (AAD-bound) timestamps.
    Malformed input of any kind yields False, never an exception.
    """
    try:
        if not block.frames:
            return False
        times = [ef.timestamp_ms for ef in block.frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            return False
        if block.start_ms != times[0] or block.end_ms != times[-1]:
            return False
        if expected_camera_id is not None and block.camera_id != expected_camera_id:
            return False
        if expected_start_ms is not None and block.start_ms != expected_start_ms:
            return False
        return pk.verify(block.signature, _tag_concat(block.frames))
    except Exception:
        return False


@dataclass(frozen=True, slots=True)
class FrameOutcome:
    """Per-frame result of block decryption."""

    index: int
    timestamp_ms: int
    frame: Frame | None
    error: str | None  # None | "no_access" | "tag_mismatch"

    @property
    def ok(self) -> bool:
        return self.error is None


def decrypt_block(store: KeyStore, pk: VerifyingKey, block: SignedBlock,
                  expected_camera_id: bytes | None = None,
                  expected_start_ms: int | None = None,
                  timing_hook: Callable[[str, float], None] | None = None,
                  ) -> list[FrameOutcome]:
    """Verify, then extract per-frame keys and decrypt.

    Raises SignatureInvalid before any key extraction if verification
    fails.  Per-frame failures (no coverage for the epoch, GCM tag
    mismatch) are reported in the outcome list rather than raised, so a
    block straddling a delegation boundary still yields its accessible
    frames.  ``timing_hook(stage, ms)`` receives key_extraction and
    frame_decryption timings when provided.
    """
    import time

    t_verify = time.perf_counter()
    valid = verify_block(pk, block, expected_camera_id, expected_start_ms)
    if timing_hook is not None:
        timing_hook("signature_verification", (time.perf_counter() - t_verify) * 1000.0)
    if not valid:
        raise SignatureInvalidError("block signature or structure invalid")
    outcomes: list[FrameOutcome] = []
    for i, ef in enumerate(block.frames):
        t0 = time.perf_counter()
        try:
            key = store.extract_at(ef.timestamp_ms)
        except Exception:
            # out-of-range timestamps and missing coverage both mean "not ours"
            outcomes.append(FrameOutcome(i, ef.timestamp_ms, None, "no_access"))
            continue
        t1 = time.perf_counter()
        try:
            frame = decrypt_frame(key, ef)
        except TagMismatchError:
            outcomes.append(FrameOutcome(i, ef.timestamp_ms, None, "tag_mismatch"))
            continue
        finally:
            if timing_hook is not None:
                timing_hook("key_extraction", (t1 - t0) * 1000.0)
                timing_hook("frame_decryption", (time.perf_counter() - t1) * 1000.0)
        outcomes.append(FrameOutcome(i, ef.timestamp_ms, frame, None))
    return outcomes


def encode_block(block: SignedBlock) -> bytes:
    """Wire format: header | per-frame records | signature (little-endian)."""
    out = bytearray(_BLOCK_HEADER.pack(BLOCK_MAGIC, block.camera_id,
                                       block.start_ms, block.end_ms,
                                       len(block.frames)))
    for ef in block.frames:
        out += _FRAME_HEADER.pack(ef.timestamp_ms, ef.iv, ef.tag, len(ef.ciphertext))
        out += ef.ciphertext
    out += struct.pack("<H", len(block.signature))
    out += block.signature
    return bytes(out)


def decode_block(data: bytes) -> SignedBlock:
    """Strict inverse of :func:`encode_block`; trailing bytes are an error."""
    if len(data) < _BLOCK_HEADER.size:
        raise MalformedBlockError("block shorter than header")
    magic, camera_id, start_ms, end_ms, count = _BLOCK_HEADER.unpack_from(data)
    if magic != BLOCK_MAGIC:
        raise MalformedBlockError("bad block magic")
    pos = _BLOCK_HEADER.size
    frames = []
    for _ in range(count):
        if pos + _FRAME_HEADER.size > len(data):
            raise MalformedBlockError("truncated frame header")
        t_ms, iv, tag, clen = _FRAME_HEADER.unpack_from(data, pos)
        pos += _FRAME_HEADER.size
        if pos + clen > len(data):
            raise MalformedBlockError("truncated frame ciphertext")
        frames.append(EncryptedFrame(ciphertext=data[pos:pos + clen], iv=iv,
                                     tag=tag, timestamp_ms=t_ms))
        pos += clen
    if pos + 2 > len(data):
        raise MalformedBlockError("missing signature length")
    (siglen,) = struct.unpack_from("<H", data, pos)
    pos += 2
    if pos + siglen != len(data):
        raise MalformedBlockError("block length mismatch")
    return SignedBlock(camera_id=camera_id, frames=tuple(frames),
                       signature=data[pos:pos + siglen],
                       start_ms=start_ms, end_ms=end_ms)
