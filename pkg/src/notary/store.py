"""Service-provider side storage of sealed chunks.

One file per chunk, named ``{stream_tag}-{index:012d}.chunk``. All integers
are big-endian::

    magic "IOTN" | version u8 | mode u8 | flags u8 (bit 0: final chunk)
    tag_len u8 | tag | index u64 | t_first u64 | t_last u64
    record_count u32 | slot_count u32 | pad_count u32 | record_bytes u32
    records          record_bytes bytes, see _encode_record
    user digests     slot_count * 32 bytes (records first, then pads)
    g (32) | u16 len + PI signature | pad_count u32 | u16 len + PU signature

Chain digests are not written: they are recomputed from the records by
whoever verifies. The index (``index.json``) is a cache rebuilt by scanning
headers whenever it disagrees with the directory listing.
"""

from __future__ import annotations

import json
import os
import random
import shutil
import struct
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .model import (
    DIGEST_SIZE, ChunkId, EncodingError, Full, Marker, Mode, ProofForUser, ProofOfIntegrity,
    SealedChunk, Tombstone, bucket_of, stream_tag_for, user_digest,
)

MAGIC = b"IOTN"
VERSION = 1
SUFFIX = ".chunk"
SEED_SUFFIX = ".seed"

_HEAD = struct.Struct(">QQQIIII")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")

KIND_TOMBSTONE = 0
KIND_FULL = 1
KIND_MARKER = 2


class ChunkFormatError(EncodingError):
    """Chunk bytes are malformed or internally inconsistent."""


def _encode_record(rec) -> bytes:
    if isinstance(rec, Full):
        return (bytes([KIND_FULL, len(rec.device)]) + rec.device + bytes([len(rec.sensor)]) + rec.sensor
                + _U64.pack(rec.time) + _U16.pack(len(rec.params)) + rec.params)
    if isinstance(rec, Tombstone):
        return bytes([KIND_TOMBSTONE, len(rec.sensor)]) + rec.sensor + _U64.pack(rec.time)
    if isinstance(rec, Marker):
        return bytes([KIND_MARKER]) + _U64.pack(rec.time)
    raise TypeError(f"not a stored record: {rec!r}")


class _Reader:
    __slots__ = ("buf", "pos", "end")

    def __init__(self, buf: bytes, pos: int = 0, end: Optional[int] = None):
        self.buf = buf
        self.pos = pos
        self.end = len(buf) if end is None else end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise ChunkFormatError("truncated chunk")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]


def _decode_record(r: _Reader):
    kind = r.u8()
    try:
        if kind == KIND_FULL:
            device = r.take(r.u8())
            sensor = r.take(r.u8())
            t = r.u64()
            return Full(device, sensor, t, r.take(r.u16()))
        if kind == KIND_TOMBSTONE:
            sensor = r.take(r.u8())
            return Tombstone(sensor, r.u64())
        if kind == KIND_MARKER:
            return Marker(r.u64())
    except ValueError as exc:
        raise ChunkFormatError(f"bad record: {exc}") from exc
    raise ChunkFormatError(f"unknown record kind {kind}")


def record_section(records: Iterable) -> bytes:
    return b"".join(_encode_record(rec) for rec in records)


def encode_chunk(chunk: SealedChunk) -> bytes:
    tag = chunk.id.stream_tag.encode()
    body = record_section(chunk.records)
    times = [rec.time for rec in chunk.records] or [0]
    out = bytearray(MAGIC)
    out += bytes([VERSION, int(chunk.mode), 1 if chunk.final else 0, len(tag)]) + tag
    out += _HEAD.pack(chunk.id.index, min(times), max(times), len(chunk.records),
                      len(chunk.user_digests), chunk.pi.pad_count, len(body))
    out += body
    for o in chunk.user_digests:
        out += o
    out += chunk.pi.g
    out += _U16.pack(len(chunk.pi.signature)) + chunk.pi.signature
    out += _U32.pack(chunk.pi.pad_count)
    out += _U16.pack(len(chunk.pu.signature)) + chunk.pu.signature
    return bytes(out)


@dataclass(frozen=True)
class ChunkHeader:
    chunk_id: ChunkId
    mode: Mode
    final: bool
    t_first: int
    t_last: int
    record_count: int
    slot_count: int
    pad_count: int
    record_bytes: int
    body_offset: int

    @property
    def proof_offset(self) -> int:
        return self.body_offset + self.record_bytes + self.slot_count * DIGEST_SIZE


def read_header(data: bytes) -> ChunkHeader:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ChunkFormatError("bad magic")
    if r.u8() != VERSION:
        raise ChunkFormatError("unsupported version")
    try:
        mode = Mode(r.u8())
    except ValueError as exc:
        raise ChunkFormatError("unknown mode") from exc
    flags = r.u8()
    if flags & ~1:
        raise ChunkFormatError("unknown flags")
    try:
        tag = r.take(r.u8()).decode()
        index, t_first, t_last, n_rec, n_slot, pad, n_bytes = _HEAD.unpack(r.take(_HEAD.size))
        cid = ChunkId(index, tag)
    except (UnicodeDecodeError, ValueError) as exc:
        raise ChunkFormatError(f"bad header: {exc}") from exc
    return ChunkHeader(cid, mode, bool(flags & 1), t_first, t_last, n_rec, n_slot, pad, n_bytes, r.pos)


def decode_chunk(data: bytes) -> SealedChunk:
    """Parse a chunk file, rejecting any inconsistency between header and body."""
    h = read_header(data)
    if h.record_count < 1:
        raise ChunkFormatError("chunk holds no records")
    if h.slot_count != h.record_count + h.pad_count:
        raise ChunkFormatError("slot count disagrees with record and pad counts")
    end = h.body_offset + h.record_bytes
    r = _Reader(data, h.body_offset, min(end, len(data)))
    records = tuple(_decode_record(r) for _ in range(h.record_count))
    if r.pos != end:
        raise ChunkFormatError("record section length mismatch")
    times = [rec.time for rec in records]
    if (min(times), max(times)) != (h.t_first, h.t_last):
        raise ChunkFormatError("header time range disagrees with records")
    r = _Reader(data, end)
    slots = tuple(r.take(DIGEST_SIZE) for _ in range(h.slot_count))
    g = r.take(DIGEST_SIZE)
    pi_sig = r.take(r.u16())
    pad = r.u32()
    pu_sig = r.take(r.u16())
    if r.pos != len(data):
        raise ChunkFormatError("trailing bytes")
    if pad != h.pad_count:
        raise ChunkFormatError("pad count echo mismatch")
    return SealedChunk(h.chunk_id, h.mode, records, slots, ProofOfIntegrity(g, pi_sig, pad),
                       ProofForUser(g, pu_sig), h.final)


def chunk_filename(cid: ChunkId) -> str:
    return f"{cid.stream_tag}-{cid.index:012d}{SUFFIX}"


def parse_filename(name: str) -> Optional[ChunkId]:
    if not name.endswith(SUFFIX):
        return None
    stem = name[:-len(SUFFIX)]
    tag, _, idx = stem.rpartition("-")
    if len(idx) != 12 or not idx.isdigit() or not tag:
        return None
    try:
        return ChunkId(int(idx), tag)
    except ValueError:
        return None


@dataclass(frozen=True)
class Retrieved:
    """A chunk as served, with its neighbours' random strings.

    ``g_prev``/``g_next`` are None when the neighbour is missing; ``error``
    is set when the chunk file itself does not parse.
    """

    chunk_id: ChunkId
    chunk: Optional[SealedChunk]
    g_prev: Optional[bytes]
    g_next: Optional[bytes]
    size: int = 0
    error: Optional[str] = None


class StoreError(Exception):
    pass


class ChunkStore:
    """Directory of chunk files plus per-stream seeds and a rebuildable index."""

    def __init__(self, root, mode: Optional[Mode] = None, bucket_count: Optional[int] = None):
        self.root = Path(root)
        meta_path = self.root / "store.json"
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            self.mode = Mode.parse(meta["mode"])
            self.bucket_count = int(meta["bucket_count"])
            if mode is not None and Mode(mode) != self.mode:
                raise StoreError(f"store holds {self.mode.name.lower()} chunks, not {Mode(mode).name.lower()}")
        else:
            if mode is None:
                raise StoreError(f"{self.root} is not a chunk store")
            self.root.mkdir(parents=True, exist_ok=True)
            self.mode = Mode(mode)
            self.bucket_count = int(bucket_count or 1)
            meta_path.write_text(json.dumps({"mode": self.mode.name.lower(), "bucket_count": self.bucket_count}))
        self._lock = threading.Lock()
        self._index: Optional[dict[str, dict[int, tuple[int, int]]]] = None

    # -- writing -----------------------------------------------------------

    def path_for(self, cid: ChunkId) -> Path:
        return self.root / chunk_filename(cid)

    def put_chunk(self, chunk: SealedChunk) -> Path:
        if chunk.mode != self.mode:
            raise StoreError("chunk mode differs from store mode")
        if len(chunk.user_digests) != len(chunk.records) + chunk.pi.pad_count:
            raise StoreError("chunk is internally inconsistent")
        path = self.path_for(chunk.id)
        _atomic_write(path, encode_chunk(chunk))
        with self._lock:
            if self._index is not None:
                lo, hi = chunk.time_range
                self._index.setdefault(chunk.id.stream_tag, {})[chunk.id.index] = (lo, hi)
        return path

    def put_seed(self, tag: str, seed: bytes) -> None:
        ChunkId(0, tag)  # validates the tag
        _atomic_write(self.root / f"{tag}{SEED_SUFFIX}", seed)

    def put_rules(self, src) -> Path:
        dst = self.root / "rules.json"
        shutil.copyfile(src, dst)
        return dst

    @property
    def rules_path(self) -> Path:
        return self.root / "rules.json"

    # -- index -------------------------------------------------------------

    def _scan(self) -> dict[str, dict[int, tuple[int, int]]]:
        index: dict[str, dict[int, tuple[int, int]]] = {}
        for name in os.listdir(self.root):
            cid = parse_filename(name)
            if cid is None:
                continue
            try:
                with open(self.root / name, "rb") as fh:
                    h = read_header(fh.read(512))
            except (ChunkFormatError, OSError):
                h = None
            # unreadable headers still count as present; verification reports them
            span = (h.t_first, h.t_last) if h is not None else (0, 2**64 - 1)
            index.setdefault(cid.stream_tag, {})[cid.index] = span
        return index

    def _listing(self) -> set[str]:
        return {n for n in os.listdir(self.root) if parse_filename(n) is not None}

    def index(self) -> dict[str, dict[int, tuple[int, int]]]:
        with self._lock:
            if self._index is None:
                self._index = self._load_index()
            return self._index

    def _load_index(self):
        cached = self.root / "index.json"
        listing = self._listing()
        if cached.exists():
            try:
                raw = json.loads(cached.read_text())
                index = {tag: {int(i): tuple(span) for i, span in entries.items()} for tag, entries in raw.items()}
                names = {chunk_filename(ChunkId(i, tag)) for tag, e in index.items() for i in e}
                if names == listing:
                    return index
            except (ValueError, KeyError, TypeError):
                pass
        return self._scan()

    def rebuild_index(self) -> None:
        with self._lock:
            self._index = self._scan()
        self.flush()

    def flush(self) -> None:
        index = self.index()
        raw = {tag: {str(i): list(span) for i, span in sorted(e.items())} for tag, e in sorted(index.items())}
        _atomic_write(self.root / "index.json", json.dumps(raw).encode())

    def invalidate(self) -> None:
        with self._lock:
            self._index = None

    # -- reading -----------------------------------------------------------

    def streams(self) -> list[str]:
        return sorted(self.index())

    def indices(self, tag: str) -> list[int]:
        return sorted(self.index().get(tag, {}))

    def seed(self, tag: str) -> Optional[bytes]:
        try:
            return (self.root / f"{tag}{SEED_SUFFIX}").read_bytes()
        except OSError:
            return None

    def read_bytes(self, cid: ChunkId) -> bytes:
        return self.path_for(cid).read_bytes()

    def load(self, cid: ChunkId) -> SealedChunk:
        chunk = decode_chunk(self.read_bytes(cid))
        if chunk.id != cid:
            raise ChunkFormatError("chunk id disagrees with file name")
        if chunk.mode != self.mode:
            raise ChunkFormatError("chunk mode disagrees with store")
        return chunk

    def g_of(self, cid: ChunkId) -> Optional[bytes]:
        """The random string from a chunk's proof section, or None if unavailable."""
        try:
            data = self.read_bytes(cid)
            h = read_header(data)
        except (OSError, ChunkFormatError):
            return None
        g = data[h.proof_offset:h.proof_offset + DIGEST_SIZE]
        return g if len(g) == DIGEST_SIZE else None

    def retrieve(self, cid: ChunkId) -> Retrieved:
        try:
            data = self.read_bytes(cid)
        except OSError:
            return Retrieved(cid, None, None, None, 0, "missing-chunk")
        try:
            chunk = decode_chunk(data)
            if chunk.id != cid:
                raise ChunkFormatError("chunk id disagrees with file name")
        except ChunkFormatError as exc:
            return Retrieved(cid, None, None, None, len(data), f"format: {exc}")
        tag = cid.stream_tag
        g_prev = self.seed(tag) if cid.index == 0 else self.g_of(ChunkId(cid.index - 1, tag))
        following = ChunkId(cid.index + 1, tag)
        if self.path_for(following).exists():
            g_next = self.g_of(following)
        elif chunk.final:
            g_next = self.seed(tag)
        else:
            g_next = None
        return Retrieved(cid, chunk, g_prev, g_next, len(data))

    def get_chunks(self, ids: Optional[Sequence[ChunkId]] = None, t_from: Optional[int] = None,
                   t_to: Optional[int] = None, device: Optional[bytes] = None,
                   tags: Optional[Sequence[str]] = None) -> list[Retrieved]:
        """Chunks by explicit id, or by time overlap within the selected streams.

        ``device`` narrows a per-user store to that device's bucket.
        """
        if ids is None:
            ids = self.select(t_from, t_to, device, tags)
        unique = sorted(set(ids), key=lambda c: (c.stream_tag, c.index))
        return [self.retrieve(cid) for cid in unique]

    def select(self, t_from: Optional[int] = None, t_to: Optional[int] = None,
               device: Optional[bytes] = None, tags: Optional[Sequence[str]] = None) -> list[ChunkId]:
        index = self.index()
        if device is not None and self.mode == Mode.PER_USER:
            tags = [stream_tag_for(self.mode, bucket_of(device, self.bucket_count))]
        lo = 0 if t_from is None else t_from
        hi = 2**64 if t_to is None else t_to
        out = []
        for tag in sorted(index if tags is None else tags):
            for i, (a, b) in sorted(index.get(tag, {}).items()):
                if a <= hi and b >= lo:
                    out.append(ChunkId(i, tag))
        return out

    def total_size(self) -> int:
        return sum((self.root / n).stat().st_size for n in self._listing())


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# -- adversary edits (test harness) ----------------------------------------

TAMPER_EDITS = ("modify", "insert", "delete", "digest", "proof", "truncate", "cut", "delete_chunk", "bitflip")


def tamper(path, edit: str, rng: Optional[random.Random] = None) -> str:
    """Apply one adversarial edit to a chunk file in place; returns a description.

    Record-level edits re-encode the file so the header stays consistent,
    as a careful adversary would.
    """
    rng = rng or random.Random()
    path = Path(path)
    if edit == "delete_chunk":
        path.unlink()
        return f"deleted {path.name}"
    data = path.read_bytes()
    if edit == "cut":
        keep = rng.randrange(len(data))
        path.write_bytes(data[:keep])
        return f"cut file to {keep} bytes"
    if edit == "bitflip":
        pos = rng.randrange(len(data))
        buf = bytearray(data)
        buf[pos] ^= 1 << rng.randrange(8)
        path.write_bytes(bytes(buf))
        return f"flipped a bit at byte {pos}"
    chunk = decode_chunk(data)
    recs = list(chunk.records)
    slots = list(chunk.user_digests)
    n = len(recs)
    if edit == "modify":
        i = rng.randrange(n)
        recs[i] = _mutate_record(recs[i], rng)
        note = f"modified record {i}"
    elif edit == "insert":
        i = rng.randrange(n + 1)
        template = recs[min(i, n - 1)]
        fake = _mutate_record(template, rng)
        recs.insert(i, fake)
        slots.insert(i, user_digest(fake))
        note = f"inserted record at {i}"
    elif edit == "delete":
        i = rng.randrange(n)
        del recs[i]
        del slots[i]
        note = f"deleted record {i}"
        if not recs:
            path.unlink()
            return note + " (chunk emptied and removed)"
    elif edit == "truncate":
        k = rng.randrange(1, n + 1)
        del recs[n - k:]
        del slots[n - k:n]
        note = f"truncated last {k} records"
        if not recs:
            path.unlink()
            return note + " (chunk emptied and removed)"
    elif edit == "digest":
        i = rng.randrange(len(slots))
        slots[i] = _flip(slots[i], rng)
        note = f"edited digest slot {i}"
    elif edit == "proof":
        which = rng.randrange(4)
        pi, pu = chunk.pi, chunk.pu
        if which == 0:
            g = _flip(pi.g, rng)
            pi, pu = replace(pi, g=g), replace(pu, g=g)
        elif which == 1:
            pi = replace(pi, signature=_flip(pi.signature, rng))
        elif which == 2:
            pu = replace(pu, signature=_flip(pu.signature, rng))
        else:
            pi = replace(pi, pad_count=pi.pad_count + 1)
        chunk = replace(chunk, pi=pi, pu=pu)
        note = f"edited proof field {which}"
    else:
        raise ValueError(f"unknown edit {edit!r}")
    if edit == "proof":
        out = encode_chunk(chunk)
    else:
        out = encode_chunk(replace(chunk, records=tuple(recs), user_digests=tuple(slots)))
    path.write_bytes(out)
    return note


def _flip(b: bytes, rng: random.Random) -> bytes:
    buf = bytearray(b)
    buf[rng.randrange(len(buf))] ^= 1 << rng.randrange(8)
    return bytes(buf)


def _mutate_record(rec, rng: random.Random):
    choice = rng.randrange(3)
    if isinstance(rec, Full):
        if choice == 0:
            return replace(rec, time=rec.time ^ (1 << rng.randrange(20)))
        if choice == 1:
            return replace(rec, device=_flip(rec.device, rng))
        return replace(rec, sensor=_flip(rec.sensor, rng)) if rng.random() < 0.5 else \
            replace(rec, params=rec.params + b"x")
    if isinstance(rec, Tombstone):
        if choice == 0:
            return replace(rec, time=rec.time ^ (1 << rng.randrange(20)))
        return replace(rec, sensor=_flip(rec.sensor, rng))
    return replace(rec, time=rec.time ^ (1 << rng.randrange(20)))


__all__ = [
    "ChunkStore", "Retrieved", "ChunkHeader", "ChunkFormatError", "StoreError", "encode_chunk",
    "decode_chunk", "read_header", "record_section", "chunk_filename", "parse_filename", "tamper",
    "TAMPER_EDITS",
]
