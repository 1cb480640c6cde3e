"""Domain types and the canonical byte encodings that get hashed or signed.

Every hashed structure is a sequence of fields, each written as a 4-byte
big-endian length followed by the field bytes. Integers inside fields are
big-endian: sensor state is one byte, timestamps are eight.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

DIGEST_SIZE = 32
RANDOM_STRING_SIZE = 32
MAX_ID_SIZE = 32

_LEN = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class EncodingError(ValueError):
    """Raised when bytes do not parse as a canonical encoding."""


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


#: digest that seeds every hash chain: the hash of a single zero byte
H_ZERO = sha256(b"\x00")


def pack_fields(*fields: bytes) -> bytes:
    out = bytearray()
    for f in fields:
        out += _LEN.pack(len(f))
        out += f
    return bytes(out)


def unpack_fields(data: bytes) -> list[bytes]:
    fields = []
    pos = 0
    n = len(data)
    while pos < n:
        if pos + 4 > n:
            raise EncodingError("truncated length prefix")
        (size,) = _LEN.unpack_from(data, pos)
        pos += 4
        if pos + size > n:
            raise EncodingError("field overruns buffer")
        fields.append(data[pos:pos + size])
        pos += size
    return fields


def u64(value: int) -> bytes:
    return _U64.pack(value)


def read_u64(data: bytes) -> int:
    if len(data) != 8:
        raise EncodingError("expected 8-byte integer")
    return _U64.unpack(data)[0]


def xor_bytes(*parts: bytes) -> bytes:
    acc = 0
    size = len(parts[0])
    for p in parts:
        if len(p) != size:
            raise ValueError("xor operands differ in length")
        acc ^= int.from_bytes(p, "big")
    return acc.to_bytes(size, "big")


def _check_id(value: bytes, what: str, min_size: int = 1) -> None:
    if not isinstance(value, (bytes, bytearray)):
        raise TypeError(f"{what} must be bytes")
    if not min_size <= len(value) <= MAX_ID_SIZE:
        raise ValueError(f"{what} must be {min_size}..{MAX_ID_SIZE} bytes, got {len(value)}")


def _check_time(t: int) -> None:
    if not 0 <= t < 2**64:
        raise ValueError("timestamp must fit in an unsigned 64-bit integer")


class SensorState(enum.IntEnum):
    PASSIVE = 0
    ACTIVE = 1


class Mode(enum.IntEnum):
    ENTIRE = 0
    MIXED = 1
    PER_SENSOR = 2
    PER_USER = 3

    @classmethod
    def parse(cls, name: str) -> "Mode":
        return cls[name.upper().replace("-", "_")]

    @property
    def optimized(self) -> bool:
        return self in (Mode.PER_SENSOR, Mode.PER_USER)


@dataclass(frozen=True)
class SensorReading:
    """One connectivity event: device seen at sensor at time.

    ``params`` holds the trap's extra attributes (signal strength, SSID ...).
    """

    device: bytes
    sensor: bytes
    time: int
    params: bytes = b""

    def __post_init__(self):
        _check_id(self.device, "device id")
        _check_id(self.sensor, "sensor id")
        _check_time(self.time)

    def encode(self) -> bytes:
        return pack_fields(self.device, self.sensor, u64(self.time), self.params)

    @classmethod
    def decode(cls, data: bytes) -> "SensorReading":
        fields = unpack_fields(data)
        if len(fields) != 4:
            raise EncodingError("reading must have 4 fields")
        return cls(fields[0], fields[1], read_u64(fields[2]), fields[3])

    @property
    def size(self) -> int:
        # bytes of the canonical encoding, used against chunk size caps
        return 16 + len(self.device) + len(self.sensor) + 8 + len(self.params)


@dataclass(frozen=True)
class Full:
    """A retained (state 1) reading as written to SP storage."""

    device: bytes
    sensor: bytes
    time: int
    params: bytes = b""

    state = SensorState.ACTIVE

    def __post_init__(self):
        _check_id(self.device, "device id")
        _check_id(self.sensor, "sensor id")
        _check_time(self.time)

    @classmethod
    def from_reading(cls, r: SensorReading) -> "Full":
        return cls(r.device, r.sensor, r.time, r.params)


@dataclass(frozen=True)
class Tombstone:
    """Stub for the first filtered reading of a run; carries no device id."""

    sensor: bytes
    time: int

    state = SensorState.PASSIVE

    def __post_init__(self):
        _check_id(self.sensor, "sensor id")
        _check_time(self.time)


@dataclass(frozen=True)
class Marker:
    """Sole record of a chunk closed with no readings in its window."""

    time: int

    state = SensorState.PASSIVE

    def __post_init__(self):
        _check_time(self.time)


StoredRecord = Union[Full, Tombstone, Marker]


def encode_reading_for_chain(record: StoredRecord, prev_digest: bytes) -> bytes:
    """Bytes hashed to form the chain link for ``record``.

    Full records emit device, sensor, state, time, [params], prev; tombstones
    omit the device field; markers carry only time and prev.
    """
    if len(prev_digest) != DIGEST_SIZE:
        raise ValueError("previous digest must be 32 bytes")
    t = u64(record.time)
    if isinstance(record, Full):
        if record.params:
            return pack_fields(record.device, record.sensor, b"\x01", t, record.params, prev_digest)
        return pack_fields(record.device, record.sensor, b"\x01", t, prev_digest)
    if isinstance(record, Tombstone):
        return pack_fields(record.sensor, b"\x00", t, prev_digest)
    if isinstance(record, Marker):
        return pack_fields(t, prev_digest)
    raise TypeError(f"not a stored record: {record!r}")


def decode_chain_input(data: bytes) -> tuple[StoredRecord, bytes]:
    fields = unpack_fields(data)
    n = len(fields)
    if n in (5, 6):
        if fields[2] != b"\x01":
            raise EncodingError("full record must carry state 1")
        params = fields[4] if n == 6 else b""
        return Full(fields[0], fields[1], read_u64(fields[3]), params), fields[-1]
    if n == 4:
        if fields[1] != b"\x00":
            raise EncodingError("tombstone must carry state 0")
        return Tombstone(fields[0], read_u64(fields[2])), fields[3]
    if n == 2:
        return Marker(read_u64(fields[0])), fields[1]
    raise EncodingError(f"unexpected field count {n}")


def chain_link(record: StoredRecord, prev_digest: bytes) -> bytes:
    return sha256(encode_reading_for_chain(record, prev_digest))


def chain_digests(records: Iterable[StoredRecord]) -> list[bytes]:
    prev = H_ZERO
    out = []
    for rec in records:
        prev = sha256(encode_reading_for_chain(rec, prev))
        out.append(prev)
    return out


def user_digest(record: StoredRecord) -> bytes:
    """The per-reading digest o_i that lets a device holder find itself."""
    t = u64(record.time)
    if isinstance(record, Full):
        return sha256(pack_fields(record.device, t))
    if isinstance(record, Tombstone):
        return sha256(pack_fields(record.sensor, t))
    return sha256(pack_fields(t))


def device_digest(device: bytes, time: int) -> bytes:
    return sha256(pack_fields(device, u64(time)))


def user_link(o: bytes, state: int) -> bytes:
    return sha256(pack_fields(o, bytes([state])))


def fold_user_links(entries: Iterable[tuple[bytes, int]]) -> bytes:
    acc = 0
    for o, state in entries:
        acc ^= int.from_bytes(sha256(pack_fields(o, bytes([state]))), "big")
    return acc.to_bytes(DIGEST_SIZE, "big")


def end_of_chunk(g_prev: bytes, g_cur: bytes, g_next: bytes) -> bytes:
    return xor_bytes(g_prev, g_cur, g_next)


def pi_message(h_tail: bytes, s_eoc: bytes, pad_count: int) -> bytes:
    return xor_bytes(h_tail, s_eoc) + struct.pack(">I", pad_count)


def pu_message(hu_end: bytes, s_eoc: bytes) -> bytes:
    return xor_bytes(hu_end, s_eoc)


@dataclass(frozen=True)
class ChunkId:
    index: int
    stream_tag: str = "main"

    def __post_init__(self):
        if not 0 <= self.index < 2**64:
            raise ValueError("chunk index out of range")
        tag = self.stream_tag.encode()
        if not 1 <= len(tag) <= 64 or not all(c.isalnum() or c in "-_" for c in self.stream_tag):
            raise ValueError(f"bad stream tag {self.stream_tag!r}")


@dataclass(frozen=True)
class ProofOfIntegrity:
    g: bytes
    signature: bytes
    pad_count: int = 0


@dataclass(frozen=True)
class ProofForUser:
    g: bytes
    signature: bytes


@dataclass(frozen=True)
class UserEntry:
    o: bytes
    state: int
    time: int


@dataclass(frozen=True)
class SealedChunk:
    """One sealed chunk.

    ``user_digests`` has one slot per record followed by ``pi.pad_count``
    fake slots; ``chain_digests`` is derived from the records and is not
    part of the persisted form.
    """

    id: ChunkId
    mode: Mode
    records: tuple
    user_digests: tuple
    pi: ProofOfIntegrity
    pu: ProofForUser
    final: bool = False
    chain_digests: tuple = field(default=(), compare=False, repr=False)

    @property
    def g(self) -> bytes:
        return self.pi.g

    @property
    def pad_count(self) -> int:
        return self.pi.pad_count

    @property
    def time_range(self) -> tuple[int, int]:
        times = [r.time for r in self.records]
        return min(times), max(times)

    def user_view(self) -> list[UserEntry]:
        entries = [UserEntry(o, int(r.state), r.time) for o, r in zip(self.user_digests, self.records)]
        entries += [UserEntry(o, 0, 0) for o in self.user_digests[len(self.records):]]
        return entries

    def digests(self) -> tuple:
        return self.chain_digests or tuple(chain_digests(self.records))


def bucket_of(identifier: bytes, bucket_count: int) -> int:
    return int.from_bytes(sha256(identifier)[:8], "big") % bucket_count


def stream_tag_for(mode: Mode, bucket: Optional[int] = None) -> str:
    if mode == Mode.PER_SENSOR:
        return f"sensor-{bucket:04d}"
    if mode == Mode.PER_USER:
        return f"user-{bucket:04d}"
    return "main"
