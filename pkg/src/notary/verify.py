"""Verification of sealed chunks from what the service provider serves.

The auditor sees whole chunks and checks both proofs. A user sees only
(o_i, state_i, time_i) triples and the user proof, and learns whether any
o_i equals the hash of their own device id and that time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from . import crypto
from .crypto import PublicKey
from .model import (
    DIGEST_SIZE, ChunkId, Full, Marker, Mode, ProofForUser, SealedChunk, Tombstone, UserEntry,
    chain_digests, device_digest, end_of_chunk, fold_user_links, pi_message, pu_message, user_digest,
)


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: str = ""
    index: Optional[int] = None
    chunk_id: Optional[ChunkId] = None

    def __bool__(self) -> bool:
        return self.ok

    def to_json(self) -> dict:
        out = {"ok": self.ok}
        if self.chunk_id is not None:
            out["chunk"] = [self.chunk_id.stream_tag, self.chunk_id.index]
        if not self.ok:
            out["reason"] = self.reason
            if self.index is not None:
                out["index"] = self.index
        return out


def _fail(reason: str, cid=None, index=None) -> Verdict:
    return Verdict(False, reason, index, cid)


def _structure(chunk: SealedChunk) -> Optional[str]:
    recs = chunk.records
    if not recs:
        return "format: empty chunk"
    if any(isinstance(r, Marker) for r in recs) and len(recs) != 1:
        return "format: marker mixed with records"
    if chunk.mode == Mode.ENTIRE and not all(isinstance(r, (Full, Marker)) for r in recs):
        return "format: tombstone in an entire-mode chunk"
    for a, b in zip(recs, recs[1:]):
        if isinstance(a, Tombstone) and isinstance(b, Tombstone):
            return "format: consecutive tombstones"
    if not chunk.mode.optimized and chunk.pi.pad_count:
        return "pad-count"
    return None


def verify_auditor(chunk: SealedChunk, g_prev: Optional[bytes], g_next: Optional[bytes],
                   enclave_pk: PublicKey) -> Verdict:
    """Recompute the chain and both proofs of one chunk."""
    cid = chunk.id
    if g_prev is None or g_next is None or len(g_prev) != DIGEST_SIZE or len(g_next) != DIGEST_SIZE:
        return _fail("missing-neighbor", cid)
    if len(chunk.pi.g) != DIGEST_SIZE or chunk.pi.g != chunk.pu.g:
        return _fail("format: random string", cid)
    n = len(chunk.records)
    if len(chunk.user_digests) != n + chunk.pi.pad_count:
        return _fail("pad-count", cid)
    problem = _structure(chunk)
    if problem:
        return _fail(problem, cid)
    s_eoc = end_of_chunk(g_prev, chunk.g, g_next)
    h_tail = chain_digests(chunk.records)[-1]
    if not crypto.verify_sig(enclave_pk, pi_message(h_tail, s_eoc, chunk.pi.pad_count), chunk.pi.signature):
        return _fail("signature", cid)
    # the records are now authentic; each user slot must match its record
    for i, rec in enumerate(chunk.records):
        if user_digest(rec) != chunk.user_digests[i]:
            return _fail("user-digest", cid, i)
    entries = [(o, int(r.state)) for o, r in zip(chunk.user_digests, chunk.records)]
    entries += [(o, 0) for o in chunk.user_digests[n:]]
    if not crypto.verify_sig(enclave_pk, pu_message(fold_user_links(entries), s_eoc), chunk.pu.signature):
        return _fail("user-signature", cid)
    return Verdict(True, chunk_id=cid)


@dataclass(frozen=True)
class UserView:
    """What a user session receives for one chunk."""

    chunk_id: ChunkId
    entries: tuple
    pu: ProofForUser
    g_prev: Optional[bytes]
    g_next: Optional[bytes]

    @classmethod
    def of(cls, chunk: SealedChunk, g_prev, g_next) -> "UserView":
        return cls(chunk.id, tuple(chunk.user_view()), chunk.pu, g_prev, g_next)

    def to_json(self) -> dict:
        return {
            "chunk": [self.chunk_id.stream_tag, self.chunk_id.index],
            "entries": [[e.o.hex(), e.state, e.time] for e in self.entries],
            "g": self.pu.g.hex(),
            "pu": self.pu.signature.hex(),
            "g_prev": None if self.g_prev is None else self.g_prev.hex(),
            "g_next": None if self.g_next is None else self.g_next.hex(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "UserView":
        h = lambda v: None if v is None else bytes.fromhex(v)  # noqa: E731
        tag, index = obj["chunk"]
        entries = tuple(UserEntry(bytes.fromhex(o), int(s), int(t)) for o, s, t in obj["entries"])
        return cls(ChunkId(int(index), tag), entries, ProofForUser(bytes.fromhex(obj["g"]), h(obj["pu"])),
                   h(obj["g_prev"]), h(obj["g_next"]))


@dataclass(frozen=True)
class UserReport:
    chunk_id: ChunkId
    integrity: Verdict
    matched: tuple = ()
    entries: int = 0

    @property
    def reliable(self) -> bool:
        return self.integrity.ok

    @property
    def present(self) -> Optional[bool]:
        """True if the device appears; None when integrity failed."""
        return bool(self.matched) if self.reliable else None

    def holds(self, claim: str, times: Optional[Iterable[int]] = None) -> Optional[bool]:
        """Evaluate a presence/absence claim, optionally restricted to ``times``."""
        if not self.reliable:
            return None
        hits = set(self.matched)
        if times is not None:
            hits &= set(times)
        if claim == "present":
            return bool(hits)
        if claim == "absent":
            return not hits
        raise ValueError("claim must be 'present' or 'absent'")

    def to_json(self) -> dict:
        return {
            "chunk": [self.chunk_id.stream_tag, self.chunk_id.index],
            "integrity": self.integrity.to_json(),
            "matched": list(self.matched) if self.reliable else None,
            "entries": self.entries,
        }


def verify_user(view: UserView, enclave_pk: PublicKey, device: bytes) -> UserReport:
    """Check the user proof of one view, then look for ``device`` in it."""
    cid = view.chunk_id
    if view.g_prev is None or view.g_next is None:
        return UserReport(cid, _fail("missing-neighbor", cid), entries=len(view.entries))
    if len(view.pu.g) != DIGEST_SIZE or len(view.g_prev) != DIGEST_SIZE or len(view.g_next) != DIGEST_SIZE:
        return UserReport(cid, _fail("format: random string", cid), entries=len(view.entries))
    if any(len(e.o) != DIGEST_SIZE or e.state not in (0, 1) for e in view.entries):
        return UserReport(cid, _fail("format: entry", cid), entries=len(view.entries))
    s_eoc = end_of_chunk(view.g_prev, view.pu.g, view.g_next)
    hu_end = fold_user_links((e.o, e.state) for e in view.entries)
    if not crypto.verify_sig(enclave_pk, pu_message(hu_end, s_eoc), view.pu.signature):
        return UserReport(cid, _fail("user-signature", cid), entries=len(view.entries))
    matched = tuple(e.time for e in view.entries if e.state == 1 and device_digest(device, e.time) == e.o)
    return UserReport(cid, Verdict(True, chunk_id=cid), matched, len(view.entries))


def _contiguity(ids: Sequence[ChunkId], finals: dict) -> Optional[Verdict]:
    by_tag: dict[str, list[int]] = {}
    for cid in ids:
        by_tag.setdefault(cid.stream_tag, []).append(cid.index)
    for tag, idx in by_tag.items():
        idx.sort()
        for a, b in zip(idx, idx[1:]):
            if b != a + 1:
                return _fail("missing-chunk", ChunkId(a + 1, tag))
        for i in idx[:-1]:
            if finals.get(ChunkId(i, tag)):
                return _fail("format: final chunk is not last", ChunkId(i, tag))
    return None


@dataclass
class RangeReport:
    ok: bool
    verdicts: list = field(default_factory=list)
    problems: list = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok

    @property
    def failures(self) -> list:
        return [v for v in self.verdicts + self.problems if not v.ok]

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "chunks": len(self.verdicts),
            "failures": [v.to_json() for v in self.failures],
        }


def verify_range(items: Sequence, enclave_pk: PublicKey) -> RangeReport:
    """Verify served chunks (store ``Retrieved`` items) and their contiguity per stream."""
    verdicts = []
    problems = []
    finals = {}
    modes = set()
    for item in items:
        if item.chunk is None:
            verdicts.append(_fail(item.error or "missing-chunk", item.chunk_id))
            continue
        finals[item.chunk_id] = item.chunk.final
        modes.add(item.chunk.mode)
        verdicts.append(verify_auditor(item.chunk, item.g_prev, item.g_next, enclave_pk))
    gap = _contiguity([i.chunk_id for i in items], finals)
    if gap is not None:
        problems.append(gap)
    if len(modes) > 1:
        problems.append(_fail("format: mixed modes in one store"))
    ok = bool(items) and all(v.ok for v in verdicts) and not problems
    if not items:
        problems.append(_fail("missing-chunk"))
    return RangeReport(ok, verdicts, problems)


def verify_user_range(views: Sequence[UserView], enclave_pk: PublicKey, device: bytes):
    """Per-chunk user reports plus a contiguity verdict over the served chunk ids."""
    reports = [verify_user(v, enclave_pk, device) for v in views]
    gap = _contiguity([v.chunk_id for v in views], {})
    return reports, gap if gap is not None else Verdict(True)


__all__ = [
    "Verdict", "UserView", "UserReport", "RangeReport", "verify_auditor", "verify_user", "verify_range",
    "verify_user_range",
]
