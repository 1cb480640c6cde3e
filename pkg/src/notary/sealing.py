"""Log sealing inside the (simulated) trusted component.

Pure functions seal one chunk. :class:`Sealer` turns a stream of policy-
evaluated readings into chunks, one stream per bucket in the optimized
modes, and keeps the random strings that XOR-link neighbouring chunks.
:class:`Enclave` owns the private key and is the only place readings are
decrypted.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from . import crypto
from .crypto import KeyPair
from .model import (
    ChunkId, EncodingError, Full, Marker, Mode, ProofForUser, ProofOfIntegrity, SealedChunk,
    SensorReading, SensorState, Tombstone, bucket_of, chain_digests, end_of_chunk, fold_user_links,
    pack_fields, pi_message, pu_message, stream_tag_for, unpack_fields, user_digest,
)
from .policy import AckRegistry, DataCaptureRule, Evaluator, RuleSet
from . import policy

log = logging.getLogger(__name__)

RandomSource = Callable[[], bytes]
ChunkSink = Callable[[SealedChunk], None]

DEFAULT_CHUNK_BYTES = 5 * 1024 * 1024
DEFAULT_CHUNK_AGE = 30 * 60
DEFAULT_BUCKETS = 490

_FEED_TAG = b"feed1"


def encode_batch(readings: Iterable[SensorReading]) -> bytes:
    return pack_fields(_FEED_TAG, *(r.encode() for r in readings))


def decode_batch(data: bytes) -> list[SensorReading]:
    fields = unpack_fields(data)
    if not fields or fields[0] != _FEED_TAG:
        raise EncodingError("not a reading batch")
    return [SensorReading.decode(f) for f in fields[1:]]


def compress_mixed(items: Iterable[tuple[SensorReading, int]]) -> list:
    """Keep state-1 readings; a run of state-0 readings leaves one tombstone."""
    records = []
    in_run = False
    for reading, state in items:
        if state:
            records.append(Full(reading.device, reading.sensor, reading.time, reading.params))
            in_run = False
        elif not in_run:
            records.append(Tombstone(reading.sensor, reading.time))
            in_run = True
    return records


def seal_chunk_user(records: Sequence, g_prev: bytes, g_cur: bytes, g_next: bytes, key: KeyPair,
                    pad_digests: Sequence[bytes] = ()) -> tuple[tuple, ProofForUser]:
    o = [user_digest(r) for r in records]
    entries = [(oi, int(r.state)) for oi, r in zip(o, records)]
    entries += [(p, 0) for p in pad_digests]
    hu_end = fold_user_links(entries)
    sig = crypto.sign(key, pu_message(hu_end, end_of_chunk(g_prev, g_cur, g_next)))
    return tuple(o) + tuple(pad_digests), ProofForUser(g_cur, sig)


def seal_records(records: Sequence, g_prev: bytes, g_cur: bytes, g_next: bytes, key: KeyPair,
                 chunk_id: ChunkId = ChunkId(0), mode: Mode = Mode.MIXED,
                 pad_digests: Sequence[bytes] = (), final: bool = False) -> SealedChunk:
    if not records:
        raise ValueError("cannot seal an empty chunk")
    chain = chain_digests(records)
    s_eoc = end_of_chunk(g_prev, g_cur, g_next)
    pi = ProofOfIntegrity(g_cur, crypto.sign(key, pi_message(chain[-1], s_eoc, len(pad_digests))), len(pad_digests))
    user_digests, pu = seal_chunk_user(records, g_prev, g_cur, g_next, key, pad_digests)
    return SealedChunk(chunk_id, mode, tuple(records), user_digests, pi, pu, final, tuple(chain))


def seal_chunk_entire(records: Sequence, g_prev: bytes, g_cur: bytes, g_next: bytes, key: KeyPair,
                      chunk_id: ChunkId = ChunkId(0), final: bool = False) -> SealedChunk:
    if any(not isinstance(r, Full) for r in records):
        raise ValueError("entire-mode chunks hold only state-1 readings")
    return seal_records(records, g_prev, g_cur, g_next, key, chunk_id, Mode.ENTIRE, final=final)


def seal_chunk_mixed(items: Sequence[tuple[SensorReading, int]], g_prev: bytes, g_cur: bytes,
                     g_next: bytes, key: KeyPair, chunk_id: ChunkId = ChunkId(0),
                     final: bool = False) -> SealedChunk:
    return seal_records(compress_mixed(items), g_prev, g_cur, g_next, key, chunk_id, Mode.MIXED, final=final)


@dataclass
class ChunkPolicy:
    max_bytes: int = DEFAULT_CHUNK_BYTES
    max_age: int = DEFAULT_CHUNK_AGE
    mode: Mode = Mode.MIXED
    bucket_count: int = DEFAULT_BUCKETS

    def __post_init__(self):
        if self.max_bytes <= 0 or self.max_age <= 0:
            raise ValueError("chunk caps must be positive")
        if self.bucket_count < 1:
            raise ValueError("bucket_count must be at least 1")
        self.mode = Mode(self.mode)


@dataclass
class _Stream:
    tag: str
    seed: bytes
    g_prev: bytes
    g_cur: bytes
    g_next: bytes
    index: int = 0
    items: list = field(default_factory=list)
    nbytes: int = 0


class Sealer:
    """Chunks a stream of (reading, state) pairs.

    The chunk clock is the readings' own timestamps: a window closes when a
    reading at or past ``window_start + max_age`` arrives. A stream's chunk
    ``x`` is signed with g(x-1), g(x), g(x+1); g(x+1) is drawn before chunk
    ``x`` is sealed. The stream's seed g* stands in for g(-1) and, on the
    chunk sealed by :meth:`close`, for the successor's string.
    """

    def __init__(self, key: KeyPair, policy: ChunkPolicy = None, sink: ChunkSink = None,
                 seed_sink: Callable[[str, bytes], None] = None, rng: RandomSource = crypto.random_string,
                 bucket_fn: Callable[[SensorReading], int] = None):
        self.key = key
        self.policy = policy or ChunkPolicy()
        self.sink = sink or (lambda chunk: None)
        self.seed_sink = seed_sink or (lambda tag, seed: None)
        self.rng = rng
        self.bucket_fn = bucket_fn
        self.streams: dict[str, _Stream] = {}
        self.window_start: Optional[int] = None
        self.closed = False
        self.chunks_sealed = 0
        self.seal_seconds: list[float] = []

    def _route(self, reading: SensorReading) -> str:
        mode = self.policy.mode
        if not mode.optimized:
            return "main"
        if self.bucket_fn is not None:
            bucket = self.bucket_fn(reading)
        else:
            ident = reading.sensor if mode == Mode.PER_SENSOR else reading.device
            bucket = bucket_of(ident, self.policy.bucket_count)
        return stream_tag_for(mode, bucket)

    def _stream(self, tag: str) -> _Stream:
        s = self.streams.get(tag)
        if s is None:
            seed = self.rng()
            s = _Stream(tag, seed, seed, self.rng(), self.rng())
            self.streams[tag] = s
            self.seed_sink(tag, seed)
        return s

    def add(self, reading: SensorReading, state: int) -> None:
        if self.closed:
            raise RuntimeError("sealer already closed")
        if self.policy.mode == Mode.ENTIRE and not state:
            raise ValueError("entire mode cannot seal state-0 readings; use mixed mode")
        t = reading.time
        if self.window_start is None:
            self.window_start = t
        self.advance(t)
        s = self._stream(self._route(reading))
        size = reading.size
        if s.items and s.nbytes + size > self.policy.max_bytes:
            self._seal_batch([s])
        s.items.append((reading, int(state)))
        s.nbytes += size

    def would_close(self, reading: SensorReading) -> bool:
        """True if adding ``reading`` would seal at least one chunk first."""
        if self.window_start is None:
            return False
        if reading.time >= self.window_start + self.policy.max_age:
            return True
        s = self.streams.get(self._route(reading))
        return bool(s and s.items and s.nbytes + reading.size > self.policy.max_bytes)

    def advance(self, now: int) -> None:
        """Close every chunk window that ended at or before ``now``."""
        if self.window_start is None:
            return
        age = self.policy.max_age
        while now >= self.window_start + age:
            self._close_window()
            self.window_start += age

    def _close_window(self) -> None:
        if self.policy.mode.optimized:
            batch = [s for s in self.streams.values() if s.items]
            if batch:
                self._seal_batch(batch)
        else:
            self._seal_batch([self._stream("main")])

    def close(self) -> None:
        """Seal everything buffered; each stream's last chunk binds to its seed."""
        if self.closed:
            return
        if self.window_start is not None:
            if self.policy.mode.optimized:
                batch = [s for s in self.streams.values() if s.items or s.index > 0]
            else:
                batch = [self._stream("main")]
            if batch:
                self._seal_batch(batch, final=True)
        self.closed = True

    def _seal_batch(self, streams: list[_Stream], final: bool = False) -> None:
        mode = self.policy.mode
        record_lists = []
        for s in streams:
            recs = compress_mixed(s.items) if s.items else [Marker(self.window_start)]
            record_lists.append(recs)
        target = max(len(r) for r in record_lists)
        for s, recs in zip(streams, record_lists):
            pads = [self.rng() for _ in range(target - len(recs))] if mode.optimized else []
            g_next = s.seed if final else s.g_next
            t0 = time.perf_counter()
            chunk = seal_records(recs, s.g_prev, s.g_cur, g_next, self.key, ChunkId(s.index, s.tag),
                                 mode, pads, final)
            self.seal_seconds.append(time.perf_counter() - t0)
            self.sink(chunk)
            self.chunks_sealed += 1
            s.g_prev, s.g_cur, s.g_next = s.g_cur, s.g_next, self.rng()
            s.index += 1
            s.items = []
            s.nbytes = 0


def seal_optimized(items: Iterable[tuple[SensorReading, int]], mode: Mode, bucket_count: int, key: KeyPair,
                   rng: RandomSource = crypto.random_string, bucket_fn=None,
                   max_bytes: int = DEFAULT_CHUNK_BYTES) -> tuple[list[SealedChunk], dict]:
    """Seal one batch of readings per bucket; returns the chunks and each stream's seed."""
    mode = Mode(mode)
    if not mode.optimized:
        raise ValueError("seal_optimized needs per_sensor or per_user mode")
    chunks: list[SealedChunk] = []
    seeds: dict[str, bytes] = {}
    sealer = Sealer(key, ChunkPolicy(max_bytes=max_bytes, max_age=2**62, mode=mode, bucket_count=bucket_count),
                    chunks.append, seeds.__setitem__, rng, bucket_fn)
    for reading, state in items:
        sealer.add(reading, state)
    sealer.close()
    chunks.sort(key=lambda c: (c.id.stream_tag, c.id.index))
    return chunks, seeds


class Enclave:
    """The trusted component: sole holder of the enclave private key."""

    def __init__(self, keys: KeyPair, rules: RuleSet, sealer: Sealer, acks: Optional[AckRegistry] = None):
        self._keys = keys
        self.public_key = keys.public
        self.sealer = sealer
        self.acks = acks
        self.accepted = 0
        self.rejected = 0
        self.filtered = 0
        self.set_rules(rules)

    def set_rules(self, rules: RuleSet) -> None:
        rules.check()
        self.rules = rules
        self._evaluate = Evaluator(rules, self.acks)

    def ingest(self, ciphertext: bytes) -> int:
        """Decrypt one feed batch, evaluate every reading, hand it to the sealer."""
        try:
            readings = decode_batch(crypto.pk_decrypt(self._keys, ciphertext))
        except (crypto.DecryptionError, EncodingError, ValueError) as exc:
            self.rejected += 1
            log.warning("rejected feed batch: %s", exc)
            return 0
        for r in readings:
            state = self._evaluate(r)
            if not state:
                self.filtered += 1
            self.sealer.add(r, state)
        self.accepted += len(readings)
        return len(readings)

    def publish_rule_nom(self, rule: DataCaptureRule, notifier_pk) -> policy.NoticeBundle:
        rules, bundle = policy.publish_rule_nom(rule, self.rules, self._keys, notifier_pk)
        self.set_rules(rules)
        return bundle

    def publish_rule_nam(self, rule: DataCaptureRule, device_pks) -> dict:
        rules, bundles = policy.publish_rule_nam(rule, self.rules, self._keys, device_pks)
        self.set_rules(rules)
        return bundles

    def register_ack(self, ack: policy.Acknowledgment) -> None:
        if self.acks is None:
            raise RuntimeError("acknowledgments only apply to notice-and-ack rule sets")
        self.acks = policy.register_ack(self.acks, ack, self.rules)
        self._evaluate = Evaluator(self.rules, self.acks)

    def save_rules(self, path) -> None:
        self.rules.save(path, self._keys)

    def close(self) -> None:
        self.sealer.close()


__all__ = [
    "ChunkPolicy", "Sealer", "Enclave", "compress_mixed", "seal_records", "seal_chunk_entire",
    "seal_chunk_user", "seal_chunk_mixed", "seal_optimized", "encode_batch", "decode_batch",
    "SensorState",
]
