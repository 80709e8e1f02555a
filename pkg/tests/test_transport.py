import json

import pytest

from privcam import rand
from privcam.errors import (
    AdversaryNotPermittedError,
    ChannelClosedError,
    ChannelEmptyError,
)
from privcam.transport import (
    RADIO,
    VISUAL,
    AdversaryRule,
    AdversaryScript,
    Channel,
    PairingChannels,
)
from privcam.wire import MsgType, encode_msg


def msg(t=MsgType.INIT_KEY_FACTORY, body=b"body"):
    return encode_msg(t, body)


def test_passthrough_is_byte_identical():
    ch = Channel(RADIO)
    ch.send(msg())
    assert ch.recv() == msg()
    assert ch.delivered == 1 and ch.dropped == 0


def test_fifo_order():
    ch = Channel(RADIO)
    for i in range(5):
        ch.send(msg(body=bytes([i])))
    assert [ch.recv()[-1] for _ in range(5)] == [0, 1, 2, 3, 4]


def test_recv_empty_and_closed():
    ch = Channel(RADIO)
    with pytest.raises(ChannelEmptyError):
        ch.recv()
    ch.close()
    with pytest.raises(ChannelClosedError):
        ch.send(msg())


def test_drop_rule():
    script = AdversaryScript(rules=[AdversaryRule(action="drop",
                                                  msg_type=int(MsgType.INIT_KEY_FACTORY))])
    ch = Channel(RADIO, adversary=script)
    ch.send(msg())
    assert ch.pending() == 0 and ch.dropped == 1


def test_corrupt_rule_changes_exactly_one_byte():
    script = AdversaryScript(rules=[AdversaryRule(action="corrupt", offset=11)])
    ch = Channel(RADIO, adversary=script)
    ch.send(msg())
    out = ch.recv()
    original = msg()
    assert out != original and len(out) == len(original)
    diffs = [i for i, (a, b) in enumerate(zip(original, out)) if a != b]
    assert diffs == [11]


def test_occurrence_matching():
    rule = AdversaryRule(action="drop", msg_type=int(MsgType.INIT_SECRETS),
                         occurrence=2)
    ch = Channel(RADIO, adversary=AdversaryScript(rules=[rule]))
    ch.send(msg(MsgType.INIT_SECRETS))
    ch.send(msg(MsgType.INIT_SECRETS))
    ch.send(msg(MsgType.INIT_SECRETS))
    assert ch.pending() == 2 and ch.dropped == 1


def test_replay_rule_duplicates_logged_message():
    rule = AdversaryRule(action="replay", msg_type=int(MsgType.INIT_SECRETS),
                         occurrence=1, replay_index=0)
    ch = Channel(RADIO, adversary=AdversaryScript(rules=[rule]))
    ch.send(msg(MsgType.INIT_KEY_FACTORY, b"first"))
    ch.recv()
    ch.send(msg(MsgType.INIT_SECRETS, b"secret"))
    assert ch.recv() == msg(MsgType.INIT_KEY_FACTORY, b"first")  # injected replay
    assert ch.recv() == msg(MsgType.INIT_SECRETS, b"secret")


def test_inject_rule_prepends_forged_bytes():
    rule = AdversaryRule(action="inject", data=b"forged", occurrence=1)
    ch = Channel(RADIO, adversary=AdversaryScript(rules=[rule]))
    ch.send(msg())
    assert ch.recv() == b"forged"
    assert ch.recv() == msg()


def test_visual_channel_rejects_everything_but_drop():
    for action, kwargs in (("corrupt", {}), ("replace", {"data": b"x"}),
                           ("inject", {"data": b"x"}), ("replay", {})):
        ch = Channel(VISUAL, adversary=AdversaryScript(
            rules=[AdversaryRule(action=action, **kwargs)]))
        with pytest.raises(AdversaryNotPermittedError):
            ch.send(msg(MsgType.INIT_TOKEN_FACTORY))
    ch = Channel(VISUAL, adversary=AdversaryScript(
        rules=[AdversaryRule(action="drop")]))
    ch.send(msg(MsgType.INIT_TOKEN_FACTORY))
    assert ch.dropped == 1


def test_script_from_json():
    text = json.dumps({"seed": 3, "rules": [
        {"action": "replace", "msg_type": 2, "occurrence": 1, "data_hex": "c0ffee"},
        {"action": "corrupt", "msg_type": 5, "offset": 7, "xor": 1},
    ]})
    script = AdversaryScript.from_json(text)
    assert script.seed == 3
    assert script.rules[0].data == bytes.fromhex("c0ffee")
    assert script.rules[1].xor == 1


def test_determinism_same_seed_same_transcript():
    def run():
        with rand.seeded(99):
            script = AdversaryScript(
                rules=[AdversaryRule(action="corrupt", occurrence=2)], seed=5)
            ch = Channel(RADIO, adversary=script)
            for i in range(4):
                ch.send(msg(body=rand.randbytes(8)))
            return [ch.recv() for _ in range(4)]

    assert run() == run()


def test_pairing_channels_wiring():
    channels = PairingChannels.honest()
    assert channels.outgoing("a")[VISUAL] is channels.visual_ab
    assert channels.outgoing("b")[RADIO] is channels.radio_ba
    channels.radio_ab.send(msg())
    assert channels.sent_messages() == [msg()]
