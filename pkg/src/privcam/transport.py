"""Simulated channels: visual (out-of-band), short-range radio, Internet.

A channel is a directed FIFO. The visual channel models line-of-sight
QR scanning: it cannot be modified or spoofed remotely, so the only
adversary action it honors is denial (drop).  Radio and Internet give
the adversary full power: drop, corrupt, replace, inject, replay.

Adversary behavior is a script of deterministic rules matched on
message type and occurrence count, loadable from JSON for CLI-driven
attack scenarios.
"""

import json
import random
from collections import deque
from dataclasses import dataclass, field

from .errors import (
    AdversaryNotPermittedError,
    ChannelClosedError,
    ChannelEmptyError,
)
from .wire import peek_msg_type

VISUAL, RADIO, INTERNET = "visual", "radio", "internet"

_ACTIONS = {"passthrough", "drop", "corrupt", "replace", "replay", "inject"}


@dataclass(slots=True)
class AdversaryRule:
    """One transformation: fires when the nth message of a type is sent.

    msg_type None matches any type; occurrence 0 matches every
    occurrence, n >= 1 only the nth.
    """

    action: str
    msg_type: int | None = None
    occurrence: int = 1
    offset: int = 0          # corrupt: byte position
    xor: int = 0xFF          # corrupt: mask applied at offset
    data: bytes = b""        # replace / inject payload
    replay_index: int = 0    # replay: index into the channel's send log

    def __post_init__(self):
        if self.action not in _ACTIONS:
            raise ValueError(f"unknown adversary action {self.action!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "AdversaryRule":
        return cls(
            action=d["action"],
            msg_type=d.get("msg_type"),
            occurrence=d.get("occurrence", 1),
            offset=d.get("offset", 0),
            xor=d.get("xor", 0xFF),
            data=bytes.fromhex(d.get("data_hex", "")),
            replay_index=d.get("replay_index", 0),
        )


@dataclass
class AdversaryScript:
    """Ordered rules plus a seed for any randomized choices."""

    rules: list[AdversaryRule] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self._rng = random.Random(self.seed)
        self._seen: dict[int | None, int] = {}
        self._total = 0

    @classmethod
    def from_json(cls, text: str) -> "AdversaryScript":
        spec = json.loads(text)
        rules = [AdversaryRule.from_dict(r) for r in spec.get("rules", [])]
        return cls(rules=rules, seed=spec.get("seed", 0))

    def _match(self, msg_type: int | None) -> AdversaryRule | None:
        self._total += 1
        count = self._seen.get(msg_type, 0) + 1
        self._seen[msg_type] = count
        for rule in self.rules:
            if rule.msg_type is None:
                if rule.occurrence in (0, self._total):
                    return rule
            elif rule.msg_type == msg_type:
                if rule.occurrence in (0, count):
                    return rule
        return None

    def transform(self, data: bytes, log: list[bytes], kind: str) -> list[bytes]:
        """Deliveries produced for one sent message (may be empty)."""
        rule = self._match(peek_msg_type(data))
        if rule is None or rule.action == "passthrough":
            return [data]
        if kind == VISUAL and rule.action != "drop":
            raise AdversaryNotPermittedError(
                f"visual channel permits drop only, not {rule.action}")
        if rule.action == "drop":
            return []
        if rule.action == "corrupt":
            buf = bytearray(data)
            pos = rule.offset if rule.offset < len(buf) else self._rng.randrange(len(buf))
            buf[pos] ^= rule.xor or 0xFF
            return [bytes(buf)]
        if rule.action == "replace":
            return [rule.data]
        if rule.action == "inject":
            return [rule.data, data]
        if rule.action == "replay":
            if 0 <= rule.replay_index < len(log):
                return [log[rule.replay_index], data]
            return [data]
        raise AssertionError(rule.action)


class Channel:
    """Directed FIFO with optional adversary mediation.

    ``log`` records messages as the sender emitted them (pre-adversary),
    which is what a wire-tapping attacker would have captured and is the
    source for replay rules.
    """

    def __init__(self, kind: str, name: str = "",
                 adversary: AdversaryScript | None = None):
        if kind not in (VISUAL, RADIO, INTERNET):
            raise ValueError(f"unknown channel kind {kind!r}")
        self.kind = kind
        self.name = name or kind
        self.adversary = adversary
        self.log: list[bytes] = []
        self.delivered = 0
        self.dropped = 0
        self._queue: deque[bytes] = deque()
        self._closed = False

    def send(self, data: bytes) -> None:
        if self._closed:
            raise ChannelClosedError(f"channel {self.name} is closed")
        self.log.append(data)
        if self.adversary is None:
            deliveries = [data]
        else:
            deliveries = self.adversary.transform(data, self.log, self.kind)
        if not deliveries:
            self.dropped += 1
        for d in deliveries:
            self._queue.append(d)

    def recv(self) -> bytes:
        if self._closed:
            raise ChannelClosedError(f"channel {self.name} is closed")
        if not self._queue:
            raise ChannelEmptyError(f"channel {self.name} has no pending message")
        self.delivered += 1
        return self._queue.popleft()

    def pending(self) -> int:
        return len(self._queue)

    def close(self) -> None:
        self._closed = True


@dataclass
class PairingChannels:
    """The six directed channels between an initiator ``a`` and peer ``b``."""

    visual_ab: Channel
    visual_ba: Channel
    radio_ab: Channel
    radio_ba: Channel
    internet_ab: Channel
    internet_ba: Channel

    @classmethod
    def honest(cls) -> "PairingChannels":
        return cls.with_adversary(None)

    @classmethod
    def with_adversary(cls, script: AdversaryScript | None,
                       kinds: tuple[str, ...] = (RADIO, INTERNET, VISUAL),
                       ) -> "PairingChannels":
        """Attach one script to every direction of the given kinds.

        A single script instance keeps one occurrence counter across the
        channels it watches, so "first INIT_KEY_FACTORY anywhere" means
        what it says.
        """
        def mk(kind: str, name: str) -> Channel:
            adv = script if (script is not None and kind in kinds) else None
            return Channel(kind, name=name, adversary=adv)

        return cls(
            visual_ab=mk(VISUAL, "visual a->b"), visual_ba=mk(VISUAL, "visual b->a"),
            radio_ab=mk(RADIO, "radio a->b"), radio_ba=mk(RADIO, "radio b->a"),
            internet_ab=mk(INTERNET, "internet a->b"),
            internet_ba=mk(INTERNET, "internet b->a"),
        )

    def outgoing(self, side: str) -> dict[str, Channel]:
        if side == "a":
            return {VISUAL: self.visual_ab, RADIO: self.radio_ab,
                    INTERNET: self.internet_ab}
        return {VISUAL: self.visual_ba, RADIO: self.radio_ba,
                INTERNET: self.internet_ba}

    def all_channels(self) -> list[Channel]:
        return [self.visual_ab, self.visual_ba, self.radio_ab,
                self.radio_ba, self.internet_ab, self.internet_ba]

    def sent_messages(self) -> list[bytes]:
        """Everything any party put on any channel, pre-adversary."""
        out = []
        for ch in self.all_channels():
            out.extend(ch.log)
        return out
