"""Binary envelope for protocol messages and field-packing helpers.

Envelope layout (little-endian): magic ``CMSG`` | u8 version | u8 type |
u32 body length | body.  Bodies are sequences of u32-length-prefixed
fields; decoding is strict, trailing bytes are an error.
"""

import struct
from enum import IntEnum

from .errors import ChannelTamperedError

MAGIC = b"CMSG"
VERSION = 1

_HEADER = struct.Struct("<4sBBI")


class MsgType(IntEnum):
    # initialization pairing (camera <-> owner)
    INIT_TOKEN_FACTORY = 0x01      # visual: hash of factory public identity
    INIT_KEY_FACTORY = 0x02        # radio: factory public identity + session nonce
    INIT_KEY_OWNER = 0x03          # radio: owner public identity + session nonce
    INIT_TOKEN_OWNER = 0x04        # visual: hash of owner public identity
    INIT_PROOF_CHALLENGE_C = 0x05
    INIT_PROOF_RESPONSE_O = 0x06
    INIT_PROOF_CHALLENGE_O = 0x07
    INIT_PROOF_RESPONSE_C = 0x08
    INIT_CAMERA_KEY = 0x09         # radio: rotated camera identity, signed by factory key
    INIT_SECRETS = 0x0A            # radio: wifi + seed + params + escrow, sealed to camera

    # delegation (owner <-> delegatee)
    DELEG_TOKEN_OWNER = 0x11
    DELEG_KEY_OWNER = 0x12
    DELEG_KEY_DELEGATEE = 0x13
    DELEG_TOKEN_DELEGATEE = 0x14
    DELEG_PROOF_CHALLENGE_O = 0x15
    DELEG_PROOF_RESPONSE_D = 0x16
    DELEG_PROOF_CHALLENGE_D = 0x17
    DELEG_PROOF_RESPONSE_O = 0x18
    DELEG_GRANT = 0x19             # internet-capable: cover keys + camera pub + params

    # administration (owner -> camera)
    ADMIN_REQUEST = 0x21
    ADMIN_ACK = 0x22

    # access recovery (new device <-> camera)
    RECOVERY_REQUEST = 0x31
    RECOVERY_ESCROW = 0x32


def encode_msg(msg_type: int, body: bytes) -> bytes:
    return _HEADER.pack(MAGIC, VERSION, int(msg_type), len(body)) + body


def decode_msg(data: bytes) -> tuple[int, bytes]:
    if len(data) < _HEADER.size:
        raise ChannelTamperedError("message shorter than envelope header")
    magic, version, msg_type, body_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ChannelTamperedError("bad envelope magic")
    if version != VERSION:
        raise ChannelTamperedError(f"unsupported envelope version {version}")
    body = data[_HEADER.size:]
    if len(body) != body_len:
        raise ChannelTamperedError("envelope length mismatch")
    return msg_type, body


def peek_msg_type(data: bytes) -> int | None:
    """Message type if the envelope parses, else None. Never raises."""
    try:
        return decode_msg(data)[0]
    except Exception:
        return None


def pack_fields(*fields: bytes) -> bytes:
    out = bytearray()
    for f in fields:
        out += struct.pack("<I", len(f))
        out += f
    return bytes(out)


def unpack_fields(data: bytes, expect: int | None = None) -> list[bytes]:
    fields = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ChannelTamperedError("truncated field header")
        (flen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + flen > len(data):
            raise ChannelTamperedError("truncated field body")
        fields.append(data[pos:pos + flen])
        pos += flen
    if expect is not None and len(fields) != expect:
        raise ChannelTamperedError(f"expected {expect} fields, got {len(fields)}")
    return fields
