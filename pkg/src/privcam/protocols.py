"""The four multi-party protocols, as message-driven state machines.

* initialization: a camera fresh from the factory and the owner's
  device bootstrap mutual trust from the visual channel, rotate the
  camera onto a new identity, and install the tree seed and escrow;
* delegation: the owner hands a delegatee the minimal key cover for an
  epoch range, over the same paired-channel dance;
* administration: signed, timestamped delete-range / factory-reset
  commands with acknowledgements;
* recovery: anyone in radio range may fetch the escrow blob, but only
  the passphrase holder can open it.

Sessions are externally driven: feed a message in, get messages out.
No secret-bearing message is ever emitted before the out-of-band hash
checks and the mutual proof of knowledge have passed, and every
signature binds the pair of session nonces, so recordings of one
session are useless in another.
"""

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import rand
from .errors import (
    AckTimeoutError,
    BadPassphraseError,
    BadSignatureError,
    ChannelTamperedError,
    DroppedError,
    NoAccessError,
    NotInitializedError,
    ReplayDetectedError,
    StaleRequestError,
    exception_for_failure,
)
from .identity import (
    IdentityKeypair,
    IdentityPublic,
    hybrid_decrypt,
    hybrid_encrypt,
    open_sealed,
    proof_key,
    seal,
    short_id,
)
from .keytree import KeyStore, TreeParams
from .timebase import Clock, RealClock
from .transport import INTERNET, RADIO, VISUAL, Channel, PairingChannels
from .wire import MsgType, decode_msg, encode_msg, pack_fields, unpack_fields

PROOF_PAD = bytes([0xA5]) * 32
SESSION_NONCE_BYTES = 16
ADMIN_FRESHNESS_MS = 300_000

_CTX_CAMERA_KEY = b"init-camera-key-v1:"
_CTX_SECRETS = b"init-secrets-v1:"
_CTX_GRANT = b"delegation-grant-v1:"
_CTX_ADMIN = b"admin-request-v1"
_CTX_ACK = b"admin-ack-v1"


class Phase(Enum):
    AWAIT_VISUAL_TOKEN = "await_visual_token"
    AWAIT_PEER_KEY = "await_peer_key"
    AWAIT_PROOF = "await_proof"
    AWAIT_IDENTITY_ROTATION = "await_identity_rotation"
    AWAIT_SECRETS = "await_secrets"
    AWAIT_KEYS = "await_keys"
    DONE = "done"
    FAILED = "failed"

TERMINAL = (Phase.DONE, Phase.FAILED)


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def _proof_encrypt(key: bytes, secret: bytes) -> bytes:
    nonce = rand.randbytes(12)
    return pack_fields(nonce, AESGCM(key).encrypt(nonce, secret, b"pairing-proof"))


def _proof_decrypt(key: bytes, body: bytes) -> bytes:
    nonce, ct = unpack_fields(body, expect=2)
    return AESGCM(key).decrypt(nonce, ct, b"pairing-proof")


# --- contexts and device state ------------------------------------------------

@dataclass
class OwnerContext:
    """Everything the owner's device holds after initialization."""

    identity: IdentityKeypair
    camera_pub: IdentityPublic
    params: TreeParams
    store: KeyStore
    escrow: "EscrowMaterial"

    @property
    def camera_id(self) -> bytes:
        return short_id(self.camera_pub)


@dataclass
class DelegateeContext:
    """A delegatee's view: partial store, no escrow, no admin rights."""

    identity: IdentityKeypair
    camera_pub: IdentityPublic
    store: KeyStore

    @property
    def params(self) -> TreeParams:
        return self.store.params

    @property
    def camera_id(self) -> bytes:
        return short_id(self.camera_pub)


class CameraDevice:
    """Camera-side persistent state across protocols.

    The factory identity survives factory reset (its hash is printed on
    the housing); everything negotiated afterwards does not.
    """

    def __init__(self, factory_identity: IdentityKeypair | None = None):
        self.factory_identity = factory_identity or IdentityKeypair.generate("factory")
        self.op_identity: IdentityKeypair | None = None
        self.owner_pub: IdentityPublic | None = None
        self.store: KeyStore | None = None
        self.escrow_blob: bytes | None = None
        self.wifi_credentials: bytes | None = None
        self.last_admin_ms = -1

    @property
    def initialized(self) -> bool:
        return self.op_identity is not None and self.store is not None

    def factory_token(self) -> bytes:
        """Contents of the QR code on the back of the device."""
        return self.factory_identity.public.token()

    @property
    def camera_id(self) -> bytes:
        if self.op_identity is None:
            raise NotInitializedError("camera has no operational identity yet")
        return short_id(self.op_identity.public)

    def install(self, op_identity: IdentityKeypair, owner_pub: IdentityPublic,
                store: KeyStore, escrow_blob: bytes, wifi: bytes) -> None:
        self.op_identity = op_identity
        self.owner_pub = owner_pub
        self.store = store
        self.escrow_blob = escrow_blob
        self.wifi_credentials = wifi
        self.last_admin_ms = -1

    def factory_reset(self) -> None:
        """Wipe every negotiated secret; only the factory identity remains."""
        if self.store is not None:
            for nk in self.store:
                nk.wipe()
        self.op_identity = None
        self.owner_pub = None
        self.store = None
        self.escrow_blob = None
        self.wifi_credentials = None
        self.last_admin_ms = -1


# --- passphrase --------------------------------------------------------------
#
# 16 random bytes rendered as 13 words from a deterministic 2048-word
# list: 12 words carry the 128 key bits (11 bits each, 4 trailing pad
# bits must be zero) and the final word is a checksum.

_CONSONANTS = "bdfghjklmnprstvz"
_VOWELS = ("a", "e", "i", "o", "u", "y", "ai", "oo")
_SYLLABLES = tuple(c + v for c in _CONSONANTS for v in _VOWELS)
WORDLIST = tuple(_SYLLABLES[i >> 7] + _SYLLABLES[i & 0x7F] for i in range(2048))
_WORD_INDEX = {w: i for i, w in enumerate(WORDLIST)}


def _checksum_word(key: bytes) -> str:
    digest = hashlib.sha256(key).digest()
    return WORDLIST[int.from_bytes(digest[:2], "big") >> 5]


def encode_passphrase(key: bytes) -> str:
    if len(key) != 16:
        raise BadPassphraseError("passphrase key must be 16 bytes")
    n = int.from_bytes(key, "big") << 4  # 132 bits, low 4 are padding
    words = [WORDLIST[(n >> (11 * (11 - i))) & 0x7FF] for i in range(12)]
    words.append(_checksum_word(key))
    return "-".join(words)


def decode_passphrase(phrase: str) -> bytes:
    words = phrase.replace("-", " ").split()
    if len(words) != 13:
        raise BadPassphraseError("passphrase must be 13 words")
    try:
        indexes = [_WORD_INDEX[w.lower()] for w in words[:12]]
    except KeyError as exc:
        raise BadPassphraseError(f"unknown passphrase word {exc.args[0]!r}") from None
    n = 0
    for idx in indexes:
        n = (n << 11) | idx
    if n & 0xF:
        raise BadPassphraseError("passphrase padding bits are not zero")
    key = (n >> 4).to_bytes(16, "big")
    if words[12].lower() != _checksum_word(key):
        raise BadPassphraseError("passphrase checksum mismatch")
    return key


# --- escrow -------------------------------------------------------------------

@dataclass(frozen=True)
class EscrowMaterial:
    """Recovery blob kept on the camera.

    ``camera_pubkey`` is deliberately in clear: it lets a recovering
    device authenticate the camera before the passphrase comes out.
    """

    enc_owner_keypair: bytes   # AES-128-GCM under the passphrase key
    enc_key_material: bytes    # serialized store, hybrid-encrypted to the owner
    camera_pubkey: bytes       # canonical public identity, unencrypted

    def encode(self) -> bytes:
        return pack_fields(self.enc_owner_keypair, self.enc_key_material,
                           self.camera_pubkey)

    @classmethod
    def decode(cls, data: bytes) -> "EscrowMaterial":
        a, b, c = unpack_fields(data, expect=3)
        return cls(a, b, c)


def build_escrow(owner: IdentityKeypair, store: KeyStore,
                 camera_pub: IdentityPublic) -> tuple[EscrowMaterial, str]:
    """Fresh escrow and the passphrase that unlocks it (shown exactly once)."""
    key = rand.randbytes(16)
    passphrase = encode_passphrase(key)
    nonce = rand.randbytes(12)
    enc_owner = pack_fields(
        nonce, AESGCM(key).encrypt(nonce, owner.to_secret_bytes(), b"escrow-owner"))
    escrow = EscrowMaterial(
        enc_owner_keypair=enc_owner,
        enc_key_material=hybrid_encrypt(owner.public, store.to_bytes()),
        camera_pubkey=camera_pub.canonical(),
    )
    return escrow, passphrase


def refresh_escrow(old: EscrowMaterial, owner: IdentityKeypair,
                   store: KeyStore) -> EscrowMaterial:
    """Escrow with the key material replaced; same passphrase stays valid."""
    return EscrowMaterial(
        enc_owner_keypair=old.enc_owner_keypair,
        enc_key_material=hybrid_encrypt(owner.public, store.to_bytes()),
        camera_pubkey=old.camera_pubkey,
    )


def recover_escrow(escrow: EscrowMaterial, passphrase: str,
                   ) -> tuple[IdentityKeypair, KeyStore, IdentityPublic]:
    """Open the escrow; a wrong passphrase discloses nothing."""
    key = decode_passphrase(passphrase)
    nonce, ct = unpack_fields(escrow.enc_owner_keypair, expect=2)
    try:
        owner_secret = AESGCM(key).decrypt(nonce, ct, b"escrow-owner")
    except InvalidTag as exc:
        raise BadPassphraseError("escrow does not open with this passphrase") from exc
    owner = IdentityKeypair.from_secret_bytes(owner_secret)
    store = KeyStore.from_bytes(hybrid_decrypt(owner, escrow.enc_key_material))
    return owner, store, IdentityPublic.from_canonical(escrow.camera_pubkey)


# --- session plumbing ----------------------------------------------------------

Emission = tuple[str, bytes]  # (channel kind, message bytes)


class _Session:
    side_label = "?"

    def __init__(self):
        self.phase = Phase.AWAIT_VISUAL_TOKEN
        self.failure: str | None = None

    def fail(self, reason: str) -> list[Emission]:
        self.phase = Phase.FAILED
        self.failure = reason
        return []

    def start(self) -> list[Emission]:
        return []

    def on_message(self, data: bytes) -> list[Emission]:
        if self.phase in TERMINAL:
            return []
        try:
            msg_type, body = decode_msg(data)
        except ChannelTamperedError as exc:
            return self.fail(f"channel_tampered: {exc}")
        try:
            return self._handle(msg_type, body)
        except ChannelTamperedError as exc:
            return self.fail(f"channel_tampered: {exc}")

    def _handle(self, msg_type: int, body: bytes) -> list[Emission]:
        raise NotImplementedError

    def _unexpected(self, msg_type: int) -> list[Emission]:
        return self.fail(
            f"channel_tampered: unexpected message {msg_type:#x} in {self.phase.value}")


@dataclass
class PairingConfig:
    """Owner-side choices installed during initialization."""

    depth: int = 16
    epoch_seconds: int = 10
    wifi_credentials: bytes = b"ssid=home;psk=simulated"
    origin_ms: int | None = None  # default: negotiation time


class InitCameraSession(_Session):
    """Camera side of initialization; mutates ``device`` only on success."""

    side_label = "camera"

    def __init__(self, device: CameraDevice,
                 op_identity: IdentityKeypair | None = None):
        super().__init__()
        self.device = device
        self.nonce_c = rand.randbytes(SESSION_NONCE_BYTES)
        self._op_identity = op_identity  # pre-generated for tests; else fresh
        self._owner_pub: IdentityPublic | None = None
        self._nonce_o: bytes | None = None
        self._shared: bytes | None = None
        self._secret_c: bytes | None = None
        self._owner_responded = False
        self._early_token: bytes | None = None  # token scanned before the radio key
        self.phase = Phase.AWAIT_PEER_KEY

    def start(self) -> list[Emission]:
        # step 1: token over the visual channel; step 2: factory key by radio
        return [
            (VISUAL, encode_msg(MsgType.INIT_TOKEN_FACTORY, self.device.factory_token())),
            (RADIO, encode_msg(MsgType.INIT_KEY_FACTORY, pack_fields(
                self.device.factory_identity.public.canonical(), self.nonce_c))),
        ]

    def _check_owner_token(self, token: bytes) -> list[Emission]:
        # step 4: the radio key must match the visually attested hash
        if self._owner_pub.token() != token:
            return self.fail("hash_mismatch: owner key does not match visual token")
        self._shared = self.device.factory_identity.dh_shared(self._owner_pub)
        self._secret_c = rand.randbytes(32)
        key = proof_key(self._shared, b"chal-c", self.nonce_c, self._nonce_o)
        self.phase = Phase.AWAIT_PROOF
        return [(RADIO, encode_msg(MsgType.INIT_PROOF_CHALLENGE_C,
                                   _proof_encrypt(key, self._secret_c)))]

    def _handle(self, msg_type: int, body: bytes) -> list[Emission]:
        if self.phase == Phase.AWAIT_PEER_KEY:
            if msg_type == MsgType.INIT_TOKEN_OWNER and self._early_token is None:
                # visual and radio races are real; hold the scan until the key lands
                self._early_token = body
                return []
            if msg_type != MsgType.INIT_KEY_OWNER:
                return self._unexpected(msg_type)
            pub_raw, nonce_o = unpack_fields(body, expect=2)
            self._owner_pub = IdentityPublic.from_canonical(pub_raw)
            self._nonce_o = nonce_o
            if self._early_token is not None:
                return self._check_owner_token(self._early_token)
            self.phase = Phase.AWAIT_VISUAL_TOKEN
            return []

        if self.phase == Phase.AWAIT_VISUAL_TOKEN:
            if msg_type != MsgType.INIT_TOKEN_OWNER:
                return self._unexpected(msg_type)
            return self._check_owner_token(body)

        if self.phase == Phase.AWAIT_PROOF:
            if msg_type == MsgType.INIT_PROOF_RESPONSE_O and not self._owner_responded:
                key = proof_key(self._shared, b"resp-o", self.nonce_c, self._nonce_o)
                try:
                    answer = _proof_decrypt(key, body)
                except InvalidTag:
                    return self.fail("proof_failure: owner response does not decrypt")
                if answer != _xor(self._secret_c, PROOF_PAD):
                    return self.fail("proof_failure: owner response incorrect")
                self._owner_responded = True
                return []
            if msg_type == MsgType.INIT_PROOF_CHALLENGE_O and self._owner_responded:
                key = proof_key(self._shared, b"chal-o", self.nonce_c, self._nonce_o)
                try:
                    secret_o = _proof_decrypt(key, body)
                except InvalidTag:
                    return self.fail("proof_failure: owner challenge does not decrypt")
                resp_key = proof_key(self._shared, b"resp-c", self.nonce_c, self._nonce_o)
                # step 6: retire the factory key for future communication
                if self._op_identity is None:
                    self._op_identity = IdentityKeypair.generate("camera")
                pub = self._op_identity.public.canonical()
                sig = self.device.factory_identity.sign(
                    _CTX_CAMERA_KEY + self.nonce_c + self._nonce_o + pub)
                self.phase = Phase.AWAIT_SECRETS
                return [
                    (RADIO, encode_msg(MsgType.INIT_PROOF_RESPONSE_C,
                                       _proof_encrypt(resp_key, _xor(secret_o, PROOF_PAD)))),
                    (RADIO, encode_msg(MsgType.INIT_CAMERA_KEY, pack_fields(pub, sig))),
                ]
            return self._unexpected(msg_type)

        if self.phase == Phase.AWAIT_SECRETS:
            if msg_type != MsgType.INIT_SECRETS:
                return self._unexpected(msg_type)
            try:
                payload = open_sealed(self._op_identity, self._owner_pub, body,
                                      _CTX_SECRETS + self.nonce_c + self._nonce_o)
            except BadSignatureError:
                return self.fail("bad_signature: secrets message rejected")
            wifi, seed, params_raw, escrow_blob = unpack_fields(payload, expect=4)
            params = TreeParams.unpack(params_raw)
            self.device.install(self._op_identity, self._owner_pub,
                                KeyStore.from_seed(params, seed), escrow_blob, wifi)
            self.phase = Phase.DONE
            return []

        return self._unexpected(msg_type)


class InitOwnerSession(_Session):
    """Owner side of initialization.

    On success, ``result`` holds the new OwnerContext and ``passphrase``
    the recovery phrase (displayed once, never persisted here).
    """

    side_label = "owner"

    def __init__(self, config: PairingConfig | None = None,
                 identity: IdentityKeypair | None = None,
                 clock: Clock | None = None):
        super().__init__()
        self.config = config or PairingConfig()
        self.identity = identity or IdentityKeypair.generate("owner")
        self.clock = clock or RealClock()
        self.nonce_o = rand.randbytes(SESSION_NONCE_BYTES)
        self.result: OwnerContext | None = None
        self.passphrase: str | None = None
        self._factory_token: bytes | None = None
        self._factory_pub: IdentityPublic | None = None
        self._nonce_c: bytes | None = None
        self._shared: bytes | None = None
        self._secret_o: bytes | None = None
        self._sent_response = False
        self._camera_proven = False
        self.phase = Phase.AWAIT_VISUAL_TOKEN

    def _handle(self, msg_type: int, body: bytes) -> list[Emission]:
        if self.phase == Phase.AWAIT_VISUAL_TOKEN:
            if msg_type != MsgType.INIT_TOKEN_FACTORY:
                return self._unexpected(msg_type)
            if len(body) != 32:
                return self.fail("channel_tampered: malformed visual token")
            self._factory_token = body
            self.phase = Phase.AWAIT_PEER_KEY
            return []

        if self.phase == Phase.AWAIT_PEER_KEY:
            if msg_type != MsgType.INIT_KEY_FACTORY:
                return self._unexpected(msg_type)
            pub_raw, nonce_c = unpack_fields(body, expect=2)
            pub = IdentityPublic.from_canonical(pub_raw)
            # step 2: radio key against the QR hash; the visual channel anchors trust
            if pub.token() != self._factory_token:
                return self.fail("hash_mismatch: factory key does not match visual token")
            self._factory_pub = pub
            self._nonce_c = nonce_c
            self._shared = self.identity.dh_shared(pub)
            self.phase = Phase.AWAIT_PROOF
            # step 3: send our key; step 4: show its hash visually
            return [
                (RADIO, encode_msg(MsgType.INIT_KEY_OWNER, pack_fields(
                    self.identity.public.canonical(), self.nonce_o))),
                (VISUAL, encode_msg(MsgType.INIT_TOKEN_OWNER,
                                    self.identity.public.token())),
            ]

        if self.phase == Phase.AWAIT_PROOF:
            if msg_type == MsgType.INIT_PROOF_CHALLENGE_C and not self._sent_response:
                key = proof_key(self._shared, b"chal-c", self._nonce_c, self.nonce_o)
                try:
                    secret_c = _proof_decrypt(key, body)
                except InvalidTag:
                    return self.fail("proof_failure: camera challenge does not decrypt")
                resp_key = proof_key(self._shared, b"resp-o", self._nonce_c, self.nonce_o)
                chal_key = proof_key(self._shared, b"chal-o", self._nonce_c, self.nonce_o)
                self._secret_o = rand.randbytes(32)
                self._sent_response = True
                return [
                    (RADIO, encode_msg(MsgType.INIT_PROOF_RESPONSE_O,
                                       _proof_encrypt(resp_key, _xor(secret_c, PROOF_PAD)))),
                    (RADIO, encode_msg(MsgType.INIT_PROOF_CHALLENGE_O,
                                       _proof_encrypt(chal_key, self._secret_o))),
                ]
            if msg_type == MsgType.INIT_PROOF_RESPONSE_C and self._sent_response:
                key = proof_key(self._shared, b"resp-c", self._nonce_c, self.nonce_o)
                try:
                    answer = _proof_decrypt(key, body)
                except InvalidTag:
                    return self.fail("proof_failure: camera response does not decrypt")
                if answer != _xor(self._secret_o, PROOF_PAD):
                    return self.fail("proof_failure: camera response incorrect")
                self._camera_proven = True
                self.phase = Phase.AWAIT_IDENTITY_ROTATION
                return []
            return self._unexpected(msg_type)

        if self.phase == Phase.AWAIT_IDENTITY_ROTATION:
            if msg_type != MsgType.INIT_CAMERA_KEY:
                return self._unexpected(msg_type)
            pub_raw, sig = unpack_fields(body, expect=2)
            signed = _CTX_CAMERA_KEY + self._nonce_c + self.nonce_o + pub_raw
            if not self._factory_pub.verify(sig, signed):
                return self.fail("bad_signature: camera key rotation rejected")
            camera_pub = IdentityPublic.from_canonical(pub_raw)
            return self._send_secrets(camera_pub)

        return self._unexpected(msg_type)

    def _send_secrets(self, camera_pub: IdentityPublic) -> list[Emission]:
        # step 7: wifi credentials, tree seed, and escrow, sealed to the new key
        origin = self.config.origin_ms
        if origin is None:
            origin = self.clock.now_ms()
        params = TreeParams(self.config.depth, self.config.epoch_seconds, origin)
        seed = rand.randbytes(32)
        store = KeyStore.from_seed(params, seed)
        escrow, passphrase = build_escrow(self.identity, store, camera_pub)
        payload = pack_fields(self.config.wifi_credentials, seed,
                              params.pack(), escrow.encode())
        sealed = seal(self.identity, camera_pub, payload,
                      _CTX_SECRETS + self._nonce_c + self.nonce_o)
        self.result = OwnerContext(identity=self.identity, camera_pub=camera_pub,
                                   params=params, store=store, escrow=escrow)
        self.passphrase = passphrase
        self.phase = Phase.DONE
        return [(RADIO, encode_msg(MsgType.INIT_SECRETS, sealed))]


class DelegationOwnerSession(_Session):
    """Owner side of delegation for epochs [first, last].

    The cover keys are derived up front so a coverage gap fails before
    any traffic; the grant itself travels on the Internet-capable
    channel (it is sealed and signed, proximity adds nothing).
    """

    side_label = "owner"

    def __init__(self, owner_ctx: OwnerContext, first: int, last: int,
                 grant_channel: str = INTERNET):
        super().__init__()
        self.ctx = owner_ctx
        self.first, self.last = first, last
        self.grant_channel = grant_channel
        self.grant_store = owner_ctx.store.delegated(first, last)  # NoAccess if short
        self.nonce_o = rand.randbytes(SESSION_NONCE_BYTES)
        self._delegatee_pub: IdentityPublic | None = None
        self._nonce_d: bytes | None = None
        self._shared: bytes | None = None
        self._secret_o: bytes | None = None
        self._delegatee_responded = False
        self._early_token: bytes | None = None
        self.phase = Phase.AWAIT_PEER_KEY

    def start(self) -> list[Emission]:
        return [
            (VISUAL, encode_msg(MsgType.DELEG_TOKEN_OWNER,
                                self.ctx.identity.public.token())),
            (RADIO, encode_msg(MsgType.DELEG_KEY_OWNER, pack_fields(
                self.ctx.identity.public.canonical(), self.nonce_o))),
        ]

    def _check_delegatee_token(self, token: bytes) -> list[Emission]:
        if self._delegatee_pub.token() != token:
            return self.fail("hash_mismatch: delegatee key does not match token")
        self._shared = self.ctx.identity.dh_shared(self._delegatee_pub)
        self._secret_o = rand.randbytes(32)
        key = proof_key(self._shared, b"chal-o", self.nonce_o, self._nonce_d)
        self.phase = Phase.AWAIT_PROOF
        return [(RADIO, encode_msg(MsgType.DELEG_PROOF_CHALLENGE_O,
                                   _proof_encrypt(key, self._secret_o)))]

    def _handle(self, msg_type: int, body: bytes) -> list[Emission]:
        if self.phase == Phase.AWAIT_PEER_KEY:
            if msg_type == MsgType.DELEG_TOKEN_DELEGATEE and self._early_token is None:
                self._early_token = body
                return []
            if msg_type != MsgType.DELEG_KEY_DELEGATEE:
                return self._unexpected(msg_type)
            pub_raw, nonce_d = unpack_fields(body, expect=2)
            self._delegatee_pub = IdentityPublic.from_canonical(pub_raw)
            self._nonce_d = nonce_d
            if self._early_token is not None:
                return self._check_delegatee_token(self._early_token)
            self.phase = Phase.AWAIT_VISUAL_TOKEN
            return []

        if self.phase == Phase.AWAIT_VISUAL_TOKEN:
            if msg_type != MsgType.DELEG_TOKEN_DELEGATEE:
                return self._unexpected(msg_type)
            return self._check_delegatee_token(body)

        if self.phase == Phase.AWAIT_PROOF:
            if msg_type == MsgType.DELEG_PROOF_RESPONSE_D and not self._delegatee_responded:
                key = proof_key(self._shared, b"resp-d", self.nonce_o, self._nonce_d)
                try:
                    answer = _proof_decrypt(key, body)
                except InvalidTag:
                    return self.fail("proof_failure: delegatee response does not decrypt")
                if answer != _xor(self._secret_o, PROOF_PAD):
                    return self.fail("proof_failure: delegatee response incorrect")
                self._delegatee_responded = True
                return []
            if msg_type == MsgType.DELEG_PROOF_CHALLENGE_D and self._delegatee_responded:
                key = proof_key(self._shared, b"chal-d", self.nonce_o, self._nonce_d)
                try:
                    secret_d = _proof_decrypt(key, body)
                except InvalidTag:
                    return self.fail("proof_failure: delegatee challenge does not decrypt")
                resp_key = proof_key(self._shared, b"resp-o2", self.nonce_o, self._nonce_d)
                payload = pack_fields(self.grant_store.to_bytes(),
                                      self.ctx.camera_pub.canonical())
                sealed = seal(self.ctx.identity, self._delegatee_pub, payload,
                              _CTX_GRANT + self.nonce_o + self._nonce_d)
                self.phase = Phase.DONE
                return [
                    (RADIO, encode_msg(MsgType.DELEG_PROOF_RESPONSE_O,
                                       _proof_encrypt(resp_key, _xor(secret_d, PROOF_PAD)))),
                    (self.grant_channel, encode_msg(MsgType.DELEG_GRANT, sealed)),
                ]
            return self._unexpected(msg_type)

        return self._unexpected(msg_type)


class DelegationDelegateeSession(_Session):
    side_label = "delegatee"

    def __init__(self, identity: IdentityKeypair | None = None):
        super().__init__()
        self.identity = identity or IdentityKeypair.generate("delegatee")
        self.nonce_d = rand.randbytes(SESSION_NONCE_BYTES)
        self.result: DelegateeContext | None = None
        self._owner_token: bytes | None = None
        self._owner_pub: IdentityPublic | None = None
        self._nonce_o: bytes | None = None
        self._shared: bytes | None = None
        self._secret_d: bytes | None = None
        self._sent_response = False
        self._owner_proven = False
        self.phase = Phase.AWAIT_VISUAL_TOKEN

    def _handle(self, msg_type: int, body: bytes) -> list[Emission]:
        if self.phase == Phase.AWAIT_VISUAL_TOKEN:
            if msg_type != MsgType.DELEG_TOKEN_OWNER:
                return self._unexpected(msg_type)
            if len(body) != 32:
                return self.fail("channel_tampered: malformed visual token")
            self._owner_token = body
            self.phase = Phase.AWAIT_PEER_KEY
            return []

        if self.phase == Phase.AWAIT_PEER_KEY:
            if msg_type != MsgType.DELEG_KEY_OWNER:
                return self._unexpected(msg_type)
            pub_raw, nonce_o = unpack_fields(body, expect=2)
            pub = IdentityPublic.from_canonical(pub_raw)
            if pub.token() != self._owner_token:
                return self.fail("hash_mismatch: owner key does not match visual token")
            self._owner_pub = pub
            self._nonce_o = nonce_o
            self._shared = self.identity.dh_shared(pub)
            self.phase = Phase.AWAIT_PROOF
            return [
                (RADIO, encode_msg(MsgType.DELEG_KEY_DELEGATEE, pack_fields(
                    self.identity.public.canonical(), self.nonce_d))),
                (VISUAL, encode_msg(MsgType.DELEG_TOKEN_DELEGATEE,
                                    self.identity.public.token())),
            ]

        if self.phase == Phase.AWAIT_PROOF:
            if msg_type == MsgType.DELEG_PROOF_CHALLENGE_O and not self._sent_response:
                key = proof_key(self._shared, b"chal-o", self._nonce_o, self.nonce_d)
                try:
                    secret_o = _proof_decrypt(key, body)
                except InvalidTag:
                    return self.fail("proof_failure: owner challenge does not decrypt")
                resp_key = proof_key(self._shared, b"resp-d", self._nonce_o, self.nonce_d)
                chal_key = proof_key(self._shared, b"chal-d", self._nonce_o, self.nonce_d)
                self._secret_d = rand.randbytes(32)
                self._sent_response = True
                return [
                    (RADIO, encode_msg(MsgType.DELEG_PROOF_RESPONSE_D,
                                       _proof_encrypt(resp_key, _xor(secret_o, PROOF_PAD)))),
                    (RADIO, encode_msg(MsgType.DELEG_PROOF_CHALLENGE_D,
                                       _proof_encrypt(chal_key, self._secret_d))),
                ]
            if msg_type == MsgType.DELEG_PROOF_RESPONSE_O and self._sent_response:
                key = proof_key(self._shared, b"resp-o2", self._nonce_o, self.nonce_d)
                try:
                    answer = _proof_decrypt(key, body)
                except InvalidTag:
                    return self.fail("proof_failure: owner response does not decrypt")
                if answer != _xor(self._secret_d, PROOF_PAD):
                    return self.fail("proof_failure: owner response incorrect")
                self._owner_proven = True
                self.phase = Phase.AWAIT_KEYS
                return []
            return self._unexpected(msg_type)

        if self.phase == Phase.AWAIT_KEYS:
            if msg_type != MsgType.DELEG_GRANT:
                return self._unexpected(msg_type)
            try:
                payload = open_sealed(self.identity, self._owner_pub, body,
                                      _CTX_GRANT + self._nonce_o + self.nonce_d)
            except BadSignatureError:
                return self.fail("bad_signature: delegation grant rejected")
            store_raw, camera_pub_raw = unpack_fields(payload, expect=2)
            self.result = DelegateeContext(
                identity=self.identity,
                camera_pub=IdentityPublic.from_canonical(camera_pub_raw),
                store=KeyStore.from_bytes(store_raw),
            )
            self.phase = Phase.DONE
            return []

        return self._unexpected(msg_type)


# --- driver --------------------------------------------------------------------

def drive(a: _Session, b: _Session, channels: PairingChannels,
          max_deliveries: int = 10_000) -> str | None:
    """Pump messages between two sessions until both terminate.

    Returns the first failure reason observed, or None if both reached
    DONE.  A drained network with a session still waiting is recorded
    as a step timeout for that session (covers dropped messages).
    """
    first_failure: str | None = None

    def note_failure(s: _Session) -> None:
        nonlocal first_failure
        if first_failure is None and s.failure is not None:
            first_failure = s.failure

    def flush(side: str, emissions: list[Emission]) -> None:
        out = channels.outgoing(side)
        for kind, data in emissions:
            out[kind].send(data)

    flush("a", a.start())
    note_failure(a)
    flush("b", b.start())
    note_failure(b)

    directed = [
        (channels.visual_ab, b, "b"), (channels.radio_ab, b, "b"),
        (channels.internet_ab, b, "b"),
        (channels.visual_ba, a, "a"), (channels.radio_ba, a, "a"),
        (channels.internet_ba, a, "a"),
    ]
    for _ in range(max_deliveries):
        moved = False
        for ch, consumer, side in directed:
            if ch.pending():
                data = ch.recv()
                flush(side, consumer.on_message(data))
                note_failure(consumer)
                moved = True
        if a.phase in TERMINAL and b.phase in TERMINAL:
            break
        if not moved:
            for s in (a, b):
                if s.phase not in TERMINAL:
                    s.fail(f"timeout: no message while in {s.phase.value}")
                    note_failure(s)
            break
    return first_failure


def run_init_pairing(device: CameraDevice,
                     config: PairingConfig | None = None,
                     channels: PairingChannels | None = None,
                     owner_identity: IdentityKeypair | None = None,
                     camera_op_identity: IdentityKeypair | None = None,
                     clock: Clock | None = None,
                     ) -> tuple[OwnerContext, str]:
    """Run initialization end to end; camera is side "a" of the channels.

    Returns (owner context, recovery passphrase); raises the error that
    aborted the session otherwise.
    """
    channels = channels or PairingChannels.honest()
    cam = InitCameraSession(device, op_identity=camera_op_identity)
    owner = InitOwnerSession(config=config, identity=owner_identity, clock=clock)
    failure = drive(cam, owner, channels)
    if failure is not None:
        raise exception_for_failure(failure)
    if owner.result is None or not device.initialized:
        raise DroppedError("initialization did not complete")
    return owner.result, owner.passphrase


def run_delegation(owner_ctx: OwnerContext, first: int, last: int,
                   channels: PairingChannels | None = None,
                   delegatee_identity: IdentityKeypair | None = None,
                   grant_channel: str = INTERNET) -> DelegateeContext:
    """Run delegation end to end; owner is side "a" of the channels."""
    channels = channels or PairingChannels.honest()
    owner = DelegationOwnerSession(owner_ctx, first, last, grant_channel=grant_channel)
    delegatee = DelegationDelegateeSession(identity=delegatee_identity)
    failure = drive(owner, delegatee, channels)
    if failure is not None:
        raise exception_for_failure(failure)
    if delegatee.result is None:
        raise DroppedError("delegation did not complete")
    return delegatee.result


# --- administration (deletion, factory reset) -----------------------------------

OP_DELETE_RANGE = 1
OP_FACTORY_RESET = 2


@dataclass(frozen=True)
class AdminOperation:
    kind: int  # OP_DELETE_RANGE | OP_FACTORY_RESET
    first: int = 0
    last: int = 0

    def encode(self) -> bytes:
        return struct.pack("<BQQ", self.kind, self.first, self.last)

    @classmethod
    def decode(cls, data: bytes) -> "AdminOperation":
        if len(data) != 17:
            raise ChannelTamperedError("bad admin operation encoding")
        kind, first, last = struct.unpack("<BQQ", data)
        if kind not in (OP_DELETE_RANGE, OP_FACTORY_RESET):
            raise ChannelTamperedError(f"unknown admin operation {kind}")
        return cls(kind, first, last)

    @classmethod
    def delete_range(cls, first: int, last: int) -> "AdminOperation":
        return cls(OP_DELETE_RANGE, first, last)

    @classmethod
    def factory_reset(cls) -> "AdminOperation":
        return cls(OP_FACTORY_RESET)


@dataclass(frozen=True)
class AdminRequest:
    operation: AdminOperation
    issued_at_ms: int
    updated_escrow: bytes  # encoded EscrowMaterial, or b"" for reset

    def encode(self) -> bytes:
        return pack_fields(self.operation.encode(),
                           struct.pack("<Q", self.issued_at_ms),
                           self.updated_escrow)

    @classmethod
    def decode(cls, data: bytes) -> "AdminRequest":
        op_raw, ts_raw, escrow = unpack_fields(data, expect=3)
        if len(ts_raw) != 8:
            raise ChannelTamperedError("bad admin timestamp")
        return cls(AdminOperation.decode(op_raw),
                   struct.unpack("<Q", ts_raw)[0], escrow)


def issue_admin(owner_ctx: OwnerContext, operation: AdminOperation,
                issued_at_ms: int,
                updated_escrow: EscrowMaterial | None = None) -> bytes:
    """Signed, timestamped command blob, sealed to the camera."""
    req = AdminRequest(operation, issued_at_ms,
                       updated_escrow.encode() if updated_escrow else b"")
    return seal(owner_ctx.identity, owner_ctx.camera_pub, req.encode(), _CTX_ADMIN)


def verify_and_apply_admin(device: CameraDevice, blob: bytes,
                           now_ms: int) -> bytes:
    """Camera side: authenticate, check freshness and monotonicity, apply, ack.

    Raises BadSignature / StaleRequest / ReplayDetected without touching
    any state; otherwise returns the signed acknowledgement.
    """
    if not device.initialized:
        raise NotInitializedError("camera is not initialized")
    payload = open_sealed(device.op_identity, device.owner_pub, blob, _CTX_ADMIN)
    req = AdminRequest.decode(payload)
    if abs(req.issued_at_ms - now_ms) > ADMIN_FRESHNESS_MS:
        raise StaleRequestError(
            f"request issued at {req.issued_at_ms} outside freshness window of {now_ms}")
    if req.issued_at_ms <= device.last_admin_ms:
        raise ReplayDetectedError(
            f"issued_at {req.issued_at_ms} not after last accepted {device.last_admin_ms}")
    device.last_admin_ms = req.issued_at_ms

    ack_payload = pack_fields(hashlib.sha256(blob).digest(),
                              struct.pack("<Q", req.issued_at_ms), b"ok")
    ack = pack_fields(ack_payload, device.op_identity.sign(_CTX_ACK + ack_payload))

    if req.operation.kind == OP_DELETE_RANGE:
        device.store = device.store.delete_range(req.operation.first,
                                                 req.operation.last)
        if req.updated_escrow:
            device.escrow_blob = req.updated_escrow
    else:
        device.factory_reset()
    return ack


def verify_admin_ack(camera_pub: IdentityPublic, ack: bytes,
                     request_blob: bytes) -> bool:
    try:
        ack_payload, sig = unpack_fields(ack, expect=2)
        digest, ts_raw, status = unpack_fields(ack_payload, expect=3)
    except ChannelTamperedError:
        return False
    if digest != hashlib.sha256(request_blob).digest() or status != b"ok":
        return False
    return camera_pub.verify(sig, _CTX_ACK + ack_payload)


def run_admin(owner_ctx: OwnerContext, device: CameraDevice,
              operation: AdminOperation, now_ms: int,
              channels: tuple[Channel, Channel] | None = None) -> None:
    """Owner-driven admin round trip.

    For deletion the owner prepares its post-deletion store and escrow
    first but commits them only once the camera's ack verifies; a lost
    ack leaves the owner unchanged and raises AckTimeout.
    """
    new_store = None
    new_escrow = None
    if operation.kind == OP_DELETE_RANGE:
        new_store = owner_ctx.store.delete_range(operation.first, operation.last)
        new_escrow = refresh_escrow(owner_ctx.escrow, owner_ctx.identity, new_store)
    blob = issue_admin(owner_ctx, operation, now_ms, new_escrow)

    if channels is None:
        ack = verify_and_apply_admin(device, blob, now_ms)
    else:
        to_camera, to_owner = channels
        to_camera.send(encode_msg(MsgType.ADMIN_REQUEST, blob))
        try:
            req_env = to_camera.recv()
        except Exception as exc:
            raise AckTimeoutError("admin request lost in transit") from exc
        msg_type, body = decode_msg(req_env)
        if msg_type != MsgType.ADMIN_REQUEST:
            raise ChannelTamperedError("unexpected message on admin channel")
        ack = verify_and_apply_admin(device, body, now_ms)
        to_owner.send(encode_msg(MsgType.ADMIN_ACK, ack))
        try:
            ack_env = to_owner.recv()
        except Exception as exc:
            raise AckTimeoutError("admin ack never arrived") from exc
        msg_type, ack = decode_msg(ack_env)
        if msg_type != MsgType.ADMIN_ACK:
            raise ChannelTamperedError("unexpected message on admin channel")

    if not verify_admin_ack(owner_ctx.camera_pub, ack, blob):
        raise BadSignatureError("admin ack failed verification")
    # ack verified: complete the operation locally
    if operation.kind == OP_DELETE_RANGE:
        owner_ctx.store = new_store
        owner_ctx.escrow = new_escrow


# --- access recovery -------------------------------------------------------------

def handle_recovery_request(device: CameraDevice, data: bytes) -> bytes:
    """Camera side: the escrow is public by design; no authentication."""
    msg_type, _ = decode_msg(data)
    if msg_type != MsgType.RECOVERY_REQUEST:
        raise ChannelTamperedError("not a recovery request")
    if not device.initialized or device.escrow_blob is None:
        raise NotInitializedError("camera holds no escrow material")
    return encode_msg(MsgType.RECOVERY_ESCROW, device.escrow_blob)


def run_recovery(device: CameraDevice, passphrase: str,
                 channels: tuple[Channel, Channel] | None = None) -> OwnerContext:
    """New-device side of access recovery.

    Anyone in radio range gets the blob; only the right passphrase turns
    it into an owner context.
    """
    if channels is None:
        resp = handle_recovery_request(
            device, encode_msg(MsgType.RECOVERY_REQUEST, b""))
    else:
        to_camera, to_device = channels
        to_camera.send(encode_msg(MsgType.RECOVERY_REQUEST, b""))
        try:
            req = to_camera.recv()
        except Exception as exc:
            raise DroppedError("recovery request lost") from exc
        to_device.send(handle_recovery_request(device, req))
        try:
            resp = to_device.recv()
        except Exception as exc:
            raise DroppedError("escrow reply lost") from exc

    msg_type, blob = decode_msg(resp)
    if msg_type != MsgType.RECOVERY_ESCROW:
        raise ChannelTamperedError("unexpected recovery reply")
    escrow = EscrowMaterial.decode(blob)
    owner, store, camera_pub = recover_escrow(escrow, passphrase)
    return OwnerContext(identity=owner, camera_pub=camera_pub,
                        params=store.params, store=store, escrow=escrow)
