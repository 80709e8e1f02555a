"""Party identities and the hybrid encrypt-and-sign envelope.

An identity bundles an RSA-2048 keypair (signatures via PSS, key wrap
via OAEP) with an X25519 keypair for the pairing proof of knowledge.
The visual token shown over the out-of-band channel is the SHA-256 of
the canonical public encoding, which covers both halves, so proving
possession of the X25519 secret is tied to the same identity whose RSA
key signs later messages.

"Encrypted and authenticated" messages use a hybrid envelope: a fresh
256-bit key is OAEP-wrapped to the recipient, the payload is AES-GCM
encrypted under it, and the sender PSS-signs the whole envelope plus a
caller-supplied context (protocol step and session nonces), which is
what defeats cross-session replay.
"""

import hashlib
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import rand
from .errors import BadSignatureError, ChannelTamperedError
from .wire import pack_fields, unpack_fields

_PSS = padding.PSS(mgf=padding.MGF1(hashes.SHA256()),
                   salt_length=padding.PSS.DIGEST_LENGTH)
_OAEP = padding.OAEP(mgf=padding.MGF1(hashes.SHA256()),
                     algorithm=hashes.SHA256(), label=None)

TOKEN_BYTES = 32


@dataclass(frozen=True)
class IdentityPublic:
    """Public half of an identity: RSA SPKI (DER) + raw X25519 point."""

    rsa_der: bytes
    dh_raw: bytes

    def canonical(self) -> bytes:
        return pack_fields(self.rsa_der, self.dh_raw)

    def token(self) -> bytes:
        """The value embedded in the QR code: SHA-256 of the public identity."""
        return hashlib.sha256(self.canonical()).digest()

    def rsa_key(self) -> rsa.RSAPublicKey:
        pk = serialization.load_der_public_key(self.rsa_der)
        if not isinstance(pk, rsa.RSAPublicKey):
            raise ChannelTamperedError("identity does not carry an RSA key")
        return pk

    def dh_key(self) -> X25519PublicKey:
        return X25519PublicKey.from_public_bytes(self.dh_raw)

    def verify(self, signature: bytes, data: bytes) -> bool:
        try:
            self.rsa_key().verify(signature, data, _PSS, hashes.SHA256())
            return True
        except (InvalidSignature, ChannelTamperedError, ValueError):
            return False

    @classmethod
    def from_canonical(cls, data: bytes) -> "IdentityPublic":
        rsa_der, dh_raw = unpack_fields(data, expect=2)
        if len(dh_raw) != 32:
            raise ChannelTamperedError("bad X25519 public length")
        return cls(rsa_der=rsa_der, dh_raw=dh_raw)


class IdentityKeypair:
    """Secret half of an identity, tagged with the role it plays."""

    def __init__(self, role: str, rsa_priv: rsa.RSAPrivateKey,
                 dh_priv: X25519PrivateKey):
        self.role = role
        self._rsa = rsa_priv
        self._dh = dh_priv

    @classmethod
    def generate(cls, role: str) -> "IdentityKeypair":
        return cls(role,
                   rsa.generate_private_key(public_exponent=65537, key_size=2048),
                   X25519PrivateKey.generate())

    @property
    def public(self) -> IdentityPublic:
        rsa_der = self._rsa.public_key().public_bytes(
            serialization.Encoding.DER,
            serialization.PublicFormat.SubjectPublicKeyInfo)
        dh_raw = self._dh.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        return IdentityPublic(rsa_der=rsa_der, dh_raw=dh_raw)

    @property
    def rsa_private(self) -> rsa.RSAPrivateKey:
        return self._rsa

    def sign(self, data: bytes) -> bytes:
        return self._rsa.sign(data, _PSS, hashes.SHA256())

    def dh_shared(self, peer: IdentityPublic) -> bytes:
        return self._dh.exchange(peer.dh_key())

    # serialization of the secret half (state files, escrow payload)

    def to_secret_bytes(self) -> bytes:
        rsa_der = self._rsa.private_bytes(
            serialization.Encoding.DER,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption())
        dh_raw = self._dh.private_bytes(
            serialization.Encoding.Raw, serialization.PrivateFormat.Raw,
            serialization.NoEncryption())
        return pack_fields(self.role.encode(), rsa_der, dh_raw)

    @classmethod
    def from_secret_bytes(cls, data: bytes) -> "IdentityKeypair":
        role, rsa_der, dh_raw = unpack_fields(data, expect=3)
        sk = serialization.load_der_private_key(rsa_der, password=None)
        if not isinstance(sk, rsa.RSAPrivateKey):
            raise ChannelTamperedError("identity secret does not carry an RSA key")
        return cls(role.decode(), sk, X25519PrivateKey.from_private_bytes(dh_raw))


def proof_key(shared: bytes, label: bytes, nonce_a: bytes, nonce_b: bytes) -> bytes:
    """Directional key for the pairing proof, bound to both session nonces."""
    return HKDF(algorithm=hashes.SHA256(), length=32,
                salt=b"pairing-proof-v1".ljust(32, b"\x00"),
                info=label + nonce_a + nonce_b).derive(shared)


def short_id(pub: IdentityPublic) -> bytes:
    """16-byte identifier for a device, derived from its public identity."""
    return hashlib.sha256(pub.canonical()).digest()[:16]


# --- hybrid envelope ---------------------------------------------------------

def hybrid_encrypt(recipient: IdentityPublic, payload: bytes) -> bytes:
    """Encrypt-only envelope (no sender authentication)."""
    session_key = rand.randbytes(32)
    wrapped = recipient.rsa_key().encrypt(session_key, _OAEP)
    nonce = rand.randbytes(12)
    ct = AESGCM(session_key).encrypt(nonce, payload, b"hybrid-v1")
    return pack_fields(wrapped, nonce, ct)


def hybrid_decrypt(recipient: IdentityKeypair, blob: bytes) -> bytes:
    wrapped, nonce, ct = unpack_fields(blob, expect=3)
    try:
        session_key = recipient._rsa.decrypt(wrapped, _OAEP)
        return AESGCM(session_key).decrypt(nonce, ct, b"hybrid-v1")
    except (ValueError, InvalidTag) as exc:
        raise ChannelTamperedError("hybrid envelope failed to open") from exc


def seal(sender: IdentityKeypair, recipient: IdentityPublic,
         payload: bytes, context: bytes) -> bytes:
    """Hybrid-encrypt ``payload`` to the recipient and sign the envelope.

    The signature covers the ciphertext and ``context``; verification
    with a different context (another session, another step) fails.
    """
    body = hybrid_encrypt(recipient, payload)
    sig = sender.sign(context + body)
    return pack_fields(body, sig)


def open_sealed(recipient: IdentityKeypair, sender: IdentityPublic,
                blob: bytes, context: bytes) -> bytes:
    """Verify then decrypt; raises BadSignature before touching the payload."""
    body, sig = unpack_fields(blob, expect=2)
    if not sender.verify(sig, context + body):
        raise BadSignatureError("sealed envelope signature invalid")
    return hybrid_decrypt(recipient, body)
