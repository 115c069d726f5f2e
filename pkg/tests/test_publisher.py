"""Publishing strategies, deadband filter and value codec tests."""

import random
import struct

import pytest

from salsim.publisher import (
    DeadbandFilter,
    MalformedPayload,
    Publisher,
    Strategy,
    StrategyConfig,
    decode_compound,
    decode_value,
    encode_compound,
    encode_value,
    parse_strategy,
    strategy_label,
)


def test_encode_value_layout():
    data = encode_value(1.0)
    assert len(data) == 20
    assert data[:8] == bytes.fromhex("3ff0000000000000")
    assert data[8:] == b"\x00" * 12


def test_value_roundtrip():
    for x in [0.0, -2.5, 1e-17, 3.14159, -1e20, 1.0 / 3.0]:
        assert decode_value(encode_value(x)) == x


def test_value_roundtrip_other_size():
    data = encode_value(2.0, size=12)
    assert len(data) == 12
    assert decode_value(data, size=12) == 2.0


def test_decode_rejects_wrong_length():
    with pytest.raises(MalformedPayload):
        decode_value(b"\x00" * 19)
    with pytest.raises(MalformedPayload):
        decode_value(b"\x00" * 21)
    with pytest.raises(MalformedPayload):
        decode_value(b"")


def test_encode_rejects_sizes_below_eight():
    with pytest.raises(ValueError):
        encode_value(1.0, size=7)


def test_deadband_first_sample_always_admitted():
    f = DeadbandFilter(0.5)
    assert f.check(0, 5.0) is True


def test_deadband_threshold_is_strict():
    f = DeadbandFilter(0.5)
    f.check(0, 5.0)
    assert f.check(0, 5.4) is False
    assert f.check(0, 5.5) is False  # exactly delta away is suppressed
    assert f.check(0, 5.6) is True
    # the reference moved to 5.6 on admission
    assert f.check(0, 5.4) is False
    assert f.check(0, 6.2) is True


def test_deadband_reference_updates_only_on_admission():
    f = DeadbandFilter(1.0)
    f.check(0, 0.0)
    for v in [0.3, 0.6, 0.9, 0.99]:
        assert f.check(0, v) is False
    assert f.check(0, 1.01) is True


def test_deadband_tracks_loops_independently():
    f = DeadbandFilter(0.5)
    assert f.check(0, 1.0) is True
    assert f.check(1, 50.0) is True
    assert f.check(1, 50.1) is False
    assert f.check(0, 1.8) is True


def test_deadband_zero_threshold_degenerates():
    f = DeadbandFilter(0.0)
    assert f.check(0, 1.0) is True
    assert f.check(0, 1.0) is False  # identical value has zero distance
    assert f.check(0, 1.0000001) is True


def test_deadband_rejects_negative_threshold():
    with pytest.raises(ValueError):
        DeadbandFilter(-0.1)


def test_strategy_tokens():
    assert parse_strategy("UC") == StrategyConfig(Strategy.UC, False)
    assert parse_strategy("FA") == StrategyConfig(Strategy.FA, False)
    assert parse_strategy("FA+TIS") == StrategyConfig(Strategy.FA, True)
    assert parse_strategy("FA_TIS") == StrategyConfig(Strategy.FA, True)
    with pytest.raises(ValueError):
        parse_strategy("XX")
    with pytest.raises(ValueError):
        parse_strategy("UC+TIS")
    assert strategy_label(StrategyConfig(Strategy.FA, True)) == "FA+TIS"
    assert strategy_label(StrategyConfig(Strategy.UC, False)) == "UC"


def test_tis_requires_filtered_atomic():
    with pytest.raises(ValueError):
        StrategyConfig(Strategy.UA, True).validate()
    StrategyConfig(Strategy.FA, True).validate()


def test_uncompressed_compound_contains_every_loop():
    pub = Publisher(StrategyConfig(Strategy.UC), n_loops=3, deadband=0.5)
    out = pub.publish(5, [1.0, 2.0, 3.0])
    assert out.triggered == [True, True, True]
    assert out.atomic == []
    assert out.tis == []
    assert out.compound == [(0, 5, 1.0), (1, 5, 2.0), (2, 5, 3.0)]


def test_filtered_compound_contains_triggered_loops_only():
    pub = Publisher(StrategyConfig(Strategy.FC), n_loops=3, deadband=0.5)
    out = pub.publish(0, [1.0, 2.0, 3.0])
    assert out.compound == [(0, 0, 1.0), (1, 0, 2.0), (2, 0, 3.0)]
    out = pub.publish(1, [1.2, 2.9, 3.1])
    assert out.triggered == [False, True, False]
    assert out.compound == [(1, 1, 2.9)]
    out = pub.publish(2, [1.2, 2.9, 3.1])
    assert out.triggered == [False, False, False]
    assert out.compound is None


def test_uncompressed_atomic_emits_all_loops():
    pub = Publisher(StrategyConfig(Strategy.UA), n_loops=2, deadband=0.5)
    out = pub.publish(7, [4.0, -1.0])
    assert out.atomic == [(0, 7, 4.0), (1, 7, -1.0)]
    assert out.compound is None
    assert out.triggered == [True, True]


def test_filtered_atomic_emits_triggered_loops():
    pub = Publisher(StrategyConfig(Strategy.FA), n_loops=3, deadband=0.5)
    pub.publish(0, [1.0, 2.0, 3.0])
    out = pub.publish(1, [1.1, 2.8, 3.2])
    assert out.atomic == [(1, 1, 2.8)]
    assert out.tis == []


def test_filtered_atomic_with_tis_hands_over_suppressed():
    pub = Publisher(StrategyConfig(Strategy.FA, tis=True), n_loops=3, deadband=0.5)
    pub.publish(0, [1.0, 2.0, 3.0])
    out = pub.publish(1, [1.1, 2.8, 3.2])
    assert out.atomic == [(1, 1, 2.8)]
    assert out.tis == [(0, 1, 1.1), (2, 1, 3.2)]


def test_publisher_rejects_wrong_sample_count():
    pub = Publisher(StrategyConfig(Strategy.UA), n_loops=2, deadband=0.5)
    with pytest.raises(ValueError):
        pub.publish(0, [1.0])


def test_compound_codec_layout_hand_checked():
    payload = bytes(range(20))
    data = encode_compound([(2, 7, payload)])
    expected = b"\x01" + b"\x00\x02" + b"\x00\x00\x00\x07" + b"\x00\x14" + payload
    assert data == expected
    assert len(data) == 29


def test_compound_size_is_count_plus_entry_overhead():
    # one count byte, then 8 header bytes plus the payload per entry
    entries = [(i, 3, bytes(20)) for i in range(5)]
    assert len(encode_compound(entries)) == 1 + 5 * 28


def test_compound_roundtrip_random():
    rng = random.Random(31)
    for _ in range(500):
        n = rng.randrange(0, 10)
        ids = rng.sample(range(65536), n)
        entries = [
            (i, rng.randrange(0, 2**32), rng.randbytes(rng.randrange(0, 30)))
            for i in ids
        ]
        assert decode_compound(encode_compound(entries)) == entries


def test_compound_decode_rejects_truncation():
    data = encode_compound([(1, 1, bytes(20))])
    with pytest.raises(MalformedPayload):
        decode_compound(data[:-1])
    with pytest.raises(MalformedPayload):
        decode_compound(b"")
    with pytest.raises(MalformedPayload):
        decode_compound(data + b"\x00")


def test_compound_encode_rejects_too_many_entries():
    entries = [(i, 0, b"") for i in range(256)]
    with pytest.raises(ValueError):
        encode_compound(entries)
