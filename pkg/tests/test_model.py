import hashlib
import struct

import pytest
from hypothesis import given, strategies as st

from notary.model import (
    H_ZERO, ChunkId, EncodingError, Full, Marker, Mode, SensorReading, Tombstone, bucket_of, chain_digests,
    chain_link, decode_chain_input, encode_reading_for_chain, end_of_chunk, fold_user_links, pack_fields,
    pi_message, stream_tag_for, unpack_fields, user_digest, user_link, xor_bytes,
)

from helpers import D1, D3, S1, S2, T0, g


# independent straight-line oracle: 4-byte big-endian length before every field
def lp(*fields):
    return b"".join(struct.pack(">I", len(f)) + f for f in fields)


def H(data):
    return hashlib.sha256(data).digest()


def test_zero_digest_is_hash_of_one_zero_byte():
    assert H_ZERO.hex() == "6e340b9cffb37a989ca544e6bb780a2c78901d3fb33738768511a30617afa01d"


def test_pack_fields_bytes():
    assert pack_fields(b"ab", b"") == b"\x00\x00\x00\x02ab\x00\x00\x00\x00"
    assert unpack_fields(b"\x00\x00\x00\x02ab\x00\x00\x00\x00") == [b"ab", b""]


@pytest.mark.parametrize("bad", [b"\x00\x00", b"\x00\x00\x00\x05abc"])
def test_unpack_rejects_truncation(bad):
    with pytest.raises(EncodingError):
        unpack_fields(bad)


def test_full_record_chain_encoding_matches_oracle():
    rec = Full(D1, S1, T0)
    expect = lp(D1, S1, b"\x01", struct.pack(">Q", T0), H_ZERO)
    assert encode_reading_for_chain(rec, H_ZERO) == expect
    assert chain_link(rec, H_ZERO) == H(expect)


def test_params_are_hashed_between_time_and_prev():
    rec = Full(D1, S1, T0, b"rssi=-40")
    expect = lp(D1, S1, b"\x01", struct.pack(">Q", T0), b"rssi=-40", H_ZERO)
    assert encode_reading_for_chain(rec, H_ZERO) == expect


def test_tombstone_encoding_has_no_device():
    expect = lp(S2, b"\x00", struct.pack(">Q", T0 + 2), H_ZERO)
    assert encode_reading_for_chain(Tombstone(S2, T0 + 2), H_ZERO) == expect


def test_marker_encoding():
    assert encode_reading_for_chain(Marker(T0), H_ZERO) == lp(struct.pack(">Q", T0), H_ZERO)


def test_chain_of_mixed_example_matches_straight_line_recomputation():
    recs = [Full(D1, S1, T0 + 1), Tombstone(S2, T0 + 2), Full(D3, S2, T0 + 5), Full(D1, S1, T0 + 6)]
    q = lambda k: struct.pack(">Q", T0 + k)  # noqa: E731
    h1 = H(lp(D1, S1, b"\x01", q(1), H(b"\x00")))
    h2 = H(lp(S2, b"\x00", q(2), h1))
    h3 = H(lp(D3, S2, b"\x01", q(5), h2))
    h4 = H(lp(D1, S1, b"\x01", q(6), h3))
    assert chain_digests(recs) == [h1, h2, h3, h4]


def test_user_digests_match_oracle():
    q = struct.pack(">Q", T0)
    assert user_digest(Full(D1, S1, T0)) == H(lp(D1, q))
    assert user_digest(Tombstone(S2, T0)) == H(lp(S2, q))
    assert user_digest(Marker(T0)) == H(lp(q))
    o = user_digest(Full(D1, S1, T0))
    assert user_link(o, 1) == H(lp(o, b"\x01"))


def test_same_device_at_two_times_gives_different_digests():
    assert user_digest(Full(D1, S1, T0)) != user_digest(Full(D1, S1, T0 + 1))


def test_fold_of_one_is_the_link():
    o = user_digest(Full(D1, S1, T0))
    assert fold_user_links([(o, 1)]) == user_link(o, 1)


def test_fold_ignores_order():
    a, b = user_digest(Full(D1, S1, T0)), user_digest(Full(D3, S1, T0))
    assert fold_user_links([(a, 1), (b, 0)]) == fold_user_links([(b, 0), (a, 1)])


def test_end_of_chunk_with_zero_neighbours_is_g():
    z = bytes(32)
    assert end_of_chunk(z, g(7), z) == g(7)


def test_pi_message_carries_pad_count():
    msg = pi_message(g(1), g(2), 3)
    assert msg == xor_bytes(g(1), g(2)) + b"\x00\x00\x00\x03"


def test_xor_length_mismatch():
    with pytest.raises(ValueError):
        xor_bytes(b"ab", b"a")


@pytest.mark.parametrize("device,sensor", [(b"", b"s"), (b"d", b""), (b"x" * 33, b"s")])
def test_reading_rejects_bad_ids(device, sensor):
    with pytest.raises(ValueError):
        SensorReading(device, sensor, 1)


def test_chunk_id_rejects_bad_tags():
    with pytest.raises(ValueError):
        ChunkId(0, "a/b")
    with pytest.raises(ValueError):
        ChunkId(-1)


def test_mode_parse_and_tags():
    assert Mode.parse("per-user") is Mode.PER_USER
    assert stream_tag_for(Mode.PER_SENSOR, 7) == "sensor-0007"
    assert stream_tag_for(Mode.MIXED) == "main"
    assert 0 <= bucket_of(b"dev", 490) < 490


ids = st.binary(min_size=1, max_size=32)
times = st.integers(min_value=0, max_value=2**64 - 1)
records = st.one_of(
    st.builds(Full, ids, ids, times, st.binary(max_size=40)),
    st.builds(Tombstone, ids, times),
    st.builds(Marker, times),
)


@given(ids, ids, times, st.binary(max_size=64))
def test_reading_roundtrip(device, sensor, t, params):
    r = SensorReading(device, sensor, t, params)
    assert SensorReading.decode(r.encode()) == r


@given(records, st.binary(min_size=32, max_size=32))
def test_chain_encoding_roundtrip(rec, prev):
    assert decode_chain_input(encode_reading_for_chain(rec, prev)) == (rec, prev)


@given(records, records, st.binary(min_size=32, max_size=32))
def test_chain_encoding_is_injective(a, b, prev):
    if a != b:
        assert encode_reading_for_chain(a, prev) != encode_reading_for_chain(b, prev)


@given(st.lists(records, min_size=1, max_size=8))
def test_each_link_recomputes_from_its_predecessor(recs):
    digests = chain_digests(recs)
    prev = H_ZERO
    for rec, d in zip(recs, digests):
        assert chain_link(rec, prev) == d
        prev = d
