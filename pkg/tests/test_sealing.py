import random

import pytest
from hypothesis import given, settings, strategies as st

from notary import crypto
from notary.crypto import KeyPair
from notary.model import (
    ChunkId, Full, Marker, Mode, SensorReading, Tombstone, fold_user_links, pu_message, end_of_chunk,
    user_digest,
)
from notary.policy import DataCaptureRule, Polarity, RuleSet
from notary.sealing import (
    ChunkPolicy, Enclave, Sealer, compress_mixed, decode_batch, encode_batch, seal_chunk_entire,
    seal_chunk_mixed, seal_optimized,
)
from notary.store import encode_chunk
from notary.verify import verify_auditor

from helpers import D1, D2, D3, S1, S2, T0, alternating_example, g, mixed_example, t


def test_mixed_example_links():
    chunk = seal_chunk_mixed(mixed_example(), g(1), g(2), g(3), KeyPair.generate())
    assert chunk.records == (Full(D1, S1, t(1)), Tombstone(S2, t(2)), Full(D3, S2, t(5)), Full(D1, S1, t(6)))


def test_mixed_example_hides_dropped_devices():
    data = encode_chunk(seal_chunk_mixed(mixed_example(), g(1), g(2), g(3), KeyPair.generate()))
    assert D2 not in data


def test_entire_mode_rejects_tombstones():
    with pytest.raises(ValueError):
        seal_chunk_entire([Tombstone(S1, T0)], g(1), g(2), g(3), KeyPair.generate())
    sealer = Sealer(KeyPair.generate(), ChunkPolicy(mode=Mode.ENTIRE))
    with pytest.raises(ValueError):
        sealer.add(SensorReading(D1, S1, T0), 0)


def test_alternating_example_per_sensor():
    chunks, seeds = seal_optimized(alternating_example(), Mode.PER_SENSOR, 2, KeyPair.generate(),
                                   bucket_fn=lambda r: 0 if r.sensor == S1 else 1)
    b1, b2 = chunks
    assert b1.id.stream_tag == "sensor-0000" and len(b1.records) == 4 and b1.pad_count == 0
    assert b2.records == (Tombstone(S2, t(2)),)
    assert b2.pad_count == 3 and len(b2.user_digests) == 4
    assert set(seeds) == {"sensor-0000", "sensor-0001"}


def test_pad_count_is_under_the_signature(enclave_keys):
    chunks, seeds = seal_optimized(alternating_example(), Mode.PER_SENSOR, 2, enclave_keys,
                                   bucket_fn=lambda r: 0 if r.sensor == S1 else 1)
    b2 = chunks[1]
    seed = seeds[b2.id.stream_tag]
    assert verify_auditor(b2, seed, seed, enclave_keys.public).ok
    from dataclasses import replace
    lied = replace(b2, pi=replace(b2.pi, pad_count=2), user_digests=b2.user_digests[:-1])
    assert verify_auditor(lied, seed, seed, enclave_keys.public).reason == "signature"


@settings(max_examples=200)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=40))
def test_compress_properties(states):
    items = [(SensorReading(D1, S1, T0 + i), s) for i, s in enumerate(states)]
    recs = compress_mixed(items)
    assert [r for r in recs if isinstance(r, Full)] == [Full(D1, S1, T0 + i) for i, s in enumerate(states) if s]
    for a, b in zip(recs, recs[1:]):
        assert not (isinstance(a, Tombstone) and isinstance(b, Tombstone))
    runs = sum(1 for i, s in enumerate(states) if s == 0 and (i == 0 or states[i - 1] == 1))
    assert sum(isinstance(r, Tombstone) for r in recs) == runs


def test_all_state_one_mixed_equals_entire():
    keys = KeyPair.generate()
    items = [(SensorReading(D1, S1, T0 + i, b"p"), 1) for i in range(10)]
    a = seal_chunk_mixed(items, g(1), g(2), g(3), keys)
    b = seal_chunk_entire([Full(r.device, r.sensor, r.time, r.params) for r, _ in items], g(1), g(2), g(3), keys)
    from dataclasses import replace
    assert encode_chunk(a) == encode_chunk(replace(b, mode=Mode.MIXED))


def test_feed_batch_roundtrip():
    readings = [SensorReading(D1, S1, T0, b"x"), SensorReading(D2, S2, T0 + 1)]
    assert decode_batch(encode_batch(readings)) == readings


def counter_rng():
    state = {"n": 0}

    def rng():
        state["n"] += 1
        return state["n"].to_bytes(32, "big")
    return rng


def collect(policy, items, rng=None):
    chunks, seeds = [], {}
    sealer = Sealer(KeyPair.generate(), policy, chunks.append, seeds.__setitem__, rng or crypto.random_string)
    for r, s in items:
        sealer.add(r, s)
    sealer.close()
    return chunks, seeds, sealer


def test_age_windows_and_markers():
    items = [(SensorReading(D1, S1, T0 + 5), 1), (SensorReading(D1, S1, T0 + 350), 1)]
    chunks, _, _ = collect(ChunkPolicy(max_age=100), items)
    # windows start at the first reading: [T0+5, +105), two empty windows, then the last
    kinds = [type(c.records[0]).__name__ for c in chunks]
    assert kinds == ["Full", "Marker", "Marker", "Full"]
    assert chunks[1].records == (Marker(T0 + 105),)
    assert [c.id.index for c in chunks] == [0, 1, 2, 3]
    assert [c.final for c in chunks] == [False, False, False, True]


def test_byte_cap_splits():
    r = SensorReading(D1, S1, T0, b"x" * 50)
    items = [(SensorReading(D1, S1, T0 + i, b"x" * 50), 1) for i in range(10)]
    chunks, _, _ = collect(ChunkPolicy(max_bytes=3 * r.size, max_age=10**6), items)
    assert [len(c.records) for c in chunks] == [3, 3, 3, 1]


def test_random_strings_link_neighbours():
    keys = KeyPair.generate()
    chunks, seeds = [], {}
    sealer = Sealer(keys, ChunkPolicy(max_age=100), chunks.append, seeds.__setitem__, counter_rng())
    for i in range(4):
        sealer.add(SensorReading(D1, S1, T0 + 100 * i), 1)
    sealer.close()
    seed = seeds["main"]
    gs = [c.g for c in chunks]
    assert len(set(gs + [seed])) == 5
    for i, c in enumerate(chunks):
        prev = seed if i == 0 else gs[i - 1]
        nxt = seed if i == len(chunks) - 1 else gs[i + 1]
        assert c.final == (i == len(chunks) - 1)
        entries = [(o, int(r.state)) for o, r in zip(c.user_digests, c.records)]
        msg = pu_message(fold_user_links(entries), end_of_chunk(prev, c.g, nxt))
        assert crypto.verify_sig(keys.public, msg, c.pu.signature)


def test_sealed_chunks_verify_with_neighbours():
    keys = KeyPair.generate()
    chunks, seeds = [], {}
    sealer = Sealer(keys, ChunkPolicy(max_age=100), chunks.append, seeds.__setitem__)
    for i in range(12):
        sealer.add(SensorReading(D1, S1, T0 + 37 * i), i % 3 != 1)
    sealer.close()
    seed = seeds["main"]
    for i, c in enumerate(chunks):
        prev = seed if i == 0 else chunks[i - 1].g
        nxt = seed if i == len(chunks) - 1 else chunks[i + 1].g
        assert verify_auditor(c, prev, nxt, keys.public).ok
        assert verify_auditor(c, prev, g(9), keys.public).reason == "signature"


def test_padding_equalizes_slots_per_window():
    keys = KeyPair.generate()
    rng = random.Random(2)
    items = []
    for i in range(300):
        items.append((SensorReading(bytes([0xdd, rng.randrange(40)]), S1, T0 + i * 5), rng.random() < 0.7))
    sealed_together = []
    sealer = Sealer(keys, ChunkPolicy(max_age=200, mode=Mode.PER_USER, bucket_count=8),
                    lambda c: sealed_together[-1].append(c))
    for r, s in items:
        if sealer.would_close(r):
            sealed_together.append([])
        sealer.add(r, s)
    sealed_together.append([])
    sealer.close()
    batches = [b for b in sealed_together if b]
    assert len(batches) > 3
    for batch in batches:
        assert len({len(c.user_digests) for c in batch}) == 1
        assert max(c.pad_count for c in batch) > 0 or len(batch) == 1
        assert min(c.pad_count for c in batch) == 0
        for c in batch:
            assert len(c.user_digests) == len(c.records) + c.pad_count


def test_optimized_streams_are_independent():
    chunks, seeds, _ = collect(ChunkPolicy(max_age=50, mode=Mode.PER_SENSOR, bucket_count=4),
                               [(SensorReading(D1, f"ap{i % 7}".encode(), T0 + i), 1) for i in range(200)])
    tags = {c.id.stream_tag for c in chunks}
    assert tags == set(seeds)
    for tag in tags:
        idx = sorted(c.id.index for c in chunks if c.id.stream_tag == tag)
        assert idx == list(range(len(idx)))
        finals = [c for c in chunks if c.id.stream_tag == tag and c.final]
        assert len(finals) == 1 and finals[0].id.index == idx[-1]


def test_one_bucket_degenerates_to_mixed_records():
    items = [(SensorReading(D1, S1, T0 + i), i % 3 != 0) for i in range(30)]
    a, _, _ = collect(ChunkPolicy(max_age=1000, mode=Mode.PER_SENSOR, bucket_count=1), items)
    b, _, _ = collect(ChunkPolicy(max_age=1000, mode=Mode.MIXED), items)
    assert [c.records for c in a] == [c.records for c in b]
    assert all(c.pad_count == 0 for c in a)


def test_no_chunk_is_ever_empty():
    chunks, _, _ = collect(ChunkPolicy(max_age=10), [(SensorReading(D1, S1, T0), 0),
                                                     (SensorReading(D1, S1, T0 + 95), 0)])
    assert all(c.records for c in chunks)
    assert all(user_digest(r) == o for c in chunks for r, o in zip(c.records, c.user_digests))


def test_closed_sealer_refuses_input():
    sealer = Sealer(KeyPair.generate())
    sealer.close()
    with pytest.raises(RuntimeError):
        sealer.add(SensorReading(D1, S1, T0), 1)


def test_enclave_pipeline(enclave_keys):
    rules = RuleSet(Polarity.OPT_IN, (DataCaptureRule(1, Polarity.OPT_OUT, 0, 2**40, devices={D2}),))
    chunks = []
    enclave = Enclave(enclave_keys, rules, Sealer(enclave_keys, ChunkPolicy(max_age=1000), chunks.append))
    batch = [SensorReading(D1, S1, T0), SensorReading(D2, S1, T0 + 1), SensorReading(D3, S1, T0 + 2)]
    assert enclave.ingest(crypto.pk_encrypt(enclave_keys.public, encode_batch(batch))) == 3
    assert enclave.ingest(b"garbage") == 0
    assert enclave.ingest(crypto.pk_encrypt(KeyPair.generate().public, encode_batch(batch))) == 0
    enclave.close()
    assert (enclave.accepted, enclave.rejected, enclave.filtered) == (3, 2, 1)
    assert chunks[0].records == (Full(D1, S1, T0), Tombstone(S1, T0 + 1), Full(D3, S1, T0 + 2))


def test_enclave_rejects_tampered_rules(enclave_keys):
    rs = RuleSet(Polarity.OPT_IN, (DataCaptureRule(1, Polarity.OPT_OUT, 0, 9, devices={D1}),))
    forged = RuleSet(Polarity.OPT_IN, (DataCaptureRule(1, Polarity.OPT_OUT, 0, 9, devices={D2}),), rs.digest)
    from notary.policy import IntegrityError
    with pytest.raises(IntegrityError):
        Enclave(enclave_keys, forged, Sealer(enclave_keys))


def test_chunk_ids_default():
    assert seal_chunk_mixed(mixed_example(), g(1), g(2), g(3), KeyPair.generate()).id == ChunkId(0, "main")
