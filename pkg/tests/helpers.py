"""Shared fixtures-as-functions for the test modules."""

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

from notary.crypto import KeyPair
from notary.model import Mode, SensorReading
from notary.sealing import ChunkPolicy, Sealer
from notary.store import ChunkStore

D1, D2, D3 = b"\xaa\x00\x00\x00\x00\x01", b"\xaa\x00\x00\x00\x00\x02", b"\xaa\x00\x00\x00\x00\x03"
S1, S2 = b"s1", b"s2"
T0 = 1_600_000_000


def fixed_keypair(n: int = 1) -> KeyPair:
    # Ed25519 signatures are deterministic, so a fixed key gives fixed bytes
    return KeyPair._from_keys(Ed25519PrivateKey.from_private_bytes(bytes([n]) * 32),
                              X25519PrivateKey.from_private_bytes(bytes([n + 1]) * 32))


def g(i: int) -> bytes:
    return bytes([i]) * 32


def t(k: int) -> int:
    return T0 + k


def mixed_example():
    """Six readings from two sensors with states 1,0,0,0,1,1."""
    return [
        (SensorReading(D1, S1, t(1)), 1),
        (SensorReading(D2, S2, t(2)), 0),
        (SensorReading(D2, S2, t(3)), 0),
        (SensorReading(D3, S2, t(4)), 0),
        (SensorReading(D3, S2, t(5)), 1),
        (SensorReading(D1, S1, t(6)), 1),
    ]


def alternating_example():
    """Seven readings; s1 readings have state 1, s2 readings state 0."""
    return [
        (SensorReading(D1, S1, t(1)), 1),
        (SensorReading(D2, S2, t(2)), 0),
        (SensorReading(D2, S1, t(3)), 1),
        (SensorReading(D3, S2, t(4)), 0),
        (SensorReading(D3, S1, t(5)), 1),
        (SensorReading(D1, S2, t(6)), 0),
        (SensorReading(D1, S1, t(7)), 1),
    ]


def build_stream(root, keys, chunks: int = 3, per_chunk: int = 6, mode: Mode = Mode.MIXED,
                 zero_every: int = 4, params: bytes = b"rssi=-60") -> ChunkStore:
    """A store holding one stream of ``chunks`` chunks, last one final."""
    store = ChunkStore(root, mode, 1)
    sealer = Sealer(keys, ChunkPolicy(max_age=100, mode=mode, bucket_count=1), store.put_chunk, store.put_seed)
    devices = [bytes([0xbb, 0, 0, 0, 0, i]) for i in range(5)]
    for c in range(chunks):
        for k in range(per_chunk):
            i = c * per_chunk + k
            state = 0 if zero_every and k % zero_every == 1 else 1
            r = SensorReading(devices[i % 5], S1 if i % 2 else S2, T0 + c * 100 + k, params)
            sealer.add(r, state)
    sealer.close()
    store.flush()
    return store


# -- retrieval sessions ------------------------------------------------------

SP_ID = b"sp.test"


def sigma_parties(service=None):
    """A registry with one auditor and one user, plus their key pairs."""
    from notary.ake import Registry, VerifierEntry

    auditor, user = KeyPair.generate(), KeyPair.generate()
    reg = Registry(SP_ID)
    reg.add(VerifierEntry(b"auditor-1", "auditor", auditor.public))
    reg.add(VerifierEntry(b"user-1", "user", user.public, D1))
    service = service or (lambda query, entry: b"LOG:" + query.to_json())
    return reg, service, auditor, user


def replace_field(frame: bytes, index: int, value: bytes) -> bytes:
    from notary.ake import decode_frame, encode_frame

    mtype, fields = decode_frame(frame)
    fields[index] = value
    return encode_frame(mtype, *fields)
