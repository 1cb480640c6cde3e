"""Desk-scale measurements: seal time, storage overhead, verification cost.

Each ``measure_*`` function returns plain numbers so tests can apply their
own thresholds; :func:`run` strings them together, writes ``report.json``,
``results.csv`` and a few PNG figures.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .crypto import KeyPair  # noqa: E402
from .model import ChunkId, Full, Mode, SealedChunk, SensorReading  # noqa: E402
from .policy import Evaluator, RuleSet  # noqa: E402
from .sealing import ChunkPolicy, Sealer, seal_chunk_mixed  # noqa: E402
from .store import ChunkStore, encode_chunk, record_section  # noqa: E402
from .verify import UserView, verify_range, verify_user  # noqa: E402
from . import workload as wl  # noqa: E402

log = logging.getLogger(__name__)

MB = 1024 * 1024

#: reference points reported next to our measurements
REFERENCE = {
    "seal_seconds_per_chunk": 0.310,
    "storage_overhead": 0.21,
    "user_verify_seconds_per_day": 0.71,
    "per_user_chunks_vs_non_opt": (57, 3012),
}
THRESHOLDS = {
    "seal_seconds_per_chunk": 3.0,
    "storage_overhead": (0.10, 0.35),
    "audit_seconds_per_chunk": 2.0,
    "one_day_audit_seconds": 100.0,
    "user_verify_seconds_per_day": 5.0,
}


@dataclass
class SealStats:
    chunks: int = 0
    readings: int = 0
    retained: int = 0
    sealed_bytes: int = 0
    cleartext_bytes: int = 0
    seal_seconds: list = field(default_factory=list)
    slots: int = 0

    @property
    def overhead(self) -> float:
        return (self.sealed_bytes - self.cleartext_bytes) / self.cleartext_bytes

    def summary(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "seal_seconds"}
        out["overhead"] = self.overhead if self.cleartext_bytes else None
        if self.seal_seconds:
            out["seal_seconds_mean"] = sum(self.seal_seconds) / len(self.seal_seconds)
            out["seal_seconds_max"] = max(self.seal_seconds)
        return out


def cleartext_size(chunk: SealedChunk) -> int:
    """Bytes the retained readings take in the same record encoding, unsealed."""
    return len(record_section(r for r in chunk.records if isinstance(r, Full)))


def seal_stream(items: Iterable[tuple[SensorReading, int]], key: KeyPair, policy: ChunkPolicy,
                store: Optional[ChunkStore] = None, max_chunks: Optional[int] = None,
                bucket_fn=None) -> SealStats:
    """Seal (reading, state) pairs, optionally writing a store, and tally sizes.

    With ``max_chunks`` the stream is cut once that many chunks exist and the
    sealer is closed, so the stored stream ends cleanly.
    """
    stats = SealStats()

    def sink(chunk: SealedChunk) -> None:
        data = encode_chunk(chunk)
        if store is not None:
            store.put_chunk(chunk)
        stats.chunks += 1
        stats.sealed_bytes += len(data)
        stats.cleartext_bytes += cleartext_size(chunk)
        stats.slots += len(chunk.user_digests)

    def seed_sink(tag: str, seed: bytes) -> None:
        stats.sealed_bytes += len(seed)
        if store is not None:
            store.put_seed(tag, seed)

    sealer = Sealer(key, policy, sink, seed_sink, bucket_fn=bucket_fn)
    for reading, state in items:
        if max_chunks is not None and stats.chunks >= max_chunks - 1 and sealer.would_close(reading):
            break
        sealer.add(reading, state)
        stats.readings += 1
        stats.retained += bool(state)
    sealer.close()
    stats.seal_seconds = list(sealer.seal_seconds)
    if store is not None:
        store.flush()
    return stats


def evaluated(readings: Iterable[SensorReading], rules: Optional[RuleSet]):
    ev = Evaluator(rules) if rules is not None else None
    for r in readings:
        yield r, (int(ev(r)) if ev is not None else 1)


def measure_seal_chunk(records: int = 37_000, seed: int = 7, repeats: int = 3) -> dict:
    """Time sealing one chunk of ``records`` readings (PI and PU together)."""
    w = wl.generate(days=1, events_per_day=max(records * 2, 1000), seed=seed)
    items = [(r, 1) for r in w.readings(0, records)]
    key = KeyPair.generate()
    times = []
    g = [bytes([i]) * 32 for i in range(1, 4)]
    for _ in range(repeats):
        t0 = time.perf_counter()
        seal_chunk_mixed(items, g[0], g[1], g[2], key)
        times.append(time.perf_counter() - t0)
    return {"records": len(items), "seconds": times, "best": min(times)}


def time_audit(store: ChunkStore, enclave_pk, counts=(1, 50, 100), tag: str = "main") -> dict:
    """Seconds to fetch and verify the first n chunks of a stream, per n."""
    ids = [ChunkId(i, tag) for i in store.indices(tag)]
    out = {}
    for n in counts:
        if n > len(ids):
            raise ValueError(f"store holds only {len(ids)} chunks in {tag}")
        t0 = time.perf_counter()
        report = verify_range(store.get_chunks(ids[:n]), enclave_pk)
        out[n] = {"seconds": time.perf_counter() - t0, "ok": report.ok}
    return out


def user_day_views(store: ChunkStore, device: bytes, t_from: int, t_to: int) -> list[UserView]:
    items = store.get_chunks(t_from=t_from, t_to=t_to, device=device)
    return [UserView.of(it.chunk, it.g_prev, it.g_next) for it in items if it.chunk is not None]


def time_user_day(store: ChunkStore, enclave_pk, device: bytes, t_from: int, t_to: int) -> dict:
    t0 = time.perf_counter()
    views = user_day_views(store, device, t_from, t_to)
    reports = [verify_user(v, enclave_pk, device) for v in views]
    elapsed = time.perf_counter() - t0
    return {
        "seconds": elapsed,
        "chunks": len(views),
        "entries": sum(r.entries for r in reports),
        "ok": all(r.reliable for r in reports),
        "matches": sum(len(r.matched) for r in reports),
    }


def alternating_items(n: int, start: int = wl.DEFAULT_START, step: int = 1):
    """Two access points taking turns; one sits in an opt-out zone.

    The global stream alternates state 1, 0, 1, 0 while each sensor on its
    own has a single state, which is the case per-sensor grouping exploits.
    """
    w = wl.generate(days=1, sensors=2, devices=200, events_per_day=max(n, 100), seed=3)
    for i in range(n):
        r = w.reading(i % len(w))
        sensor = wl.sensor_id(i % 2)
        yield SensorReading(r.device, sensor, start + i * step, r.params), 1 - i % 2


def compare_alternating(n: int = 20_000, max_bytes: int = 1 * MB, max_age: int = 1800,
                        key: Optional[KeyPair] = None) -> dict:
    key = key or KeyPair.generate()
    sizes = {}
    for mode in (Mode.MIXED, Mode.PER_SENSOR):
        policy = ChunkPolicy(max_bytes=max_bytes, max_age=max_age, mode=mode, bucket_count=2)
        bucket_fn = (lambda r: int(r.sensor[-1:] == b"1")) if mode.optimized else None
        stats = seal_stream(alternating_items(n), key, policy, bucket_fn=bucket_fn)
        sizes[mode.name.lower()] = stats.summary()
    saved = 1 - sizes["per_sensor"]["sealed_bytes"] / sizes["mixed"]["sealed_bytes"]
    return {"sizes": sizes, "saving": saved}


# -- figures ----------------------------------------------------------------

def plot_audit(audit: dict, path: Path) -> None:
    ns = sorted(audit)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(ns, [audit[n]["seconds"] for n in ns], marker="o", label="measured")
    ax.plot(ns, [THRESHOLDS["audit_seconds_per_chunk"] * n for n in ns], ls="--", color="grey", label="2 s/chunk")
    ax.set_xlabel("chunks verified")
    ax.set_ylabel("seconds")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_storage(stats: SealStats, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar(["cleartext", "sealed"], [stats.cleartext_bytes / MB, stats.sealed_bytes / MB], color=["C0", "C1"])
    ax.set_ylabel("MiB")
    ax.set_title(f"overhead {stats.overhead:.1%}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_seal_times(seconds: list, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.hist(seconds, bins=30)
    ax.set_xlabel("seconds to seal one chunk")
    ax.set_ylabel("chunks")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def run(out_dir, chunks: int = 20, seed: int = 0, events_per_day: int = 1_800_000,
        max_bytes: int = 5 * MB, max_age: int = 1800, audit_counts=(1, 5, 10)) -> dict:
    """Generate, seal into a scratch store under ``out_dir`` and measure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    key = KeyPair.generate()
    readings_needed = int(chunks * max_bytes / 140) + 1
    days = max(readings_needed / events_per_day * 1.05, 0.05)
    w = wl.generate(days=days, events_per_day=events_per_day, seed=seed)
    rules = wl.campus_rules(seed=seed)
    store = ChunkStore(out / "store", Mode.MIXED)
    policy = ChunkPolicy(max_bytes=max_bytes, max_age=max_age, mode=Mode.MIXED)
    t0 = time.perf_counter()
    stats = seal_stream(evaluated(w.readings(), rules), key, policy, store, max_chunks=chunks)
    seal_wall = time.perf_counter() - t0
    seal_one = measure_seal_chunk()
    counts = [n for n in audit_counts if n <= stats.chunks]
    audit = time_audit(store, key.public, counts)
    alt = compare_alternating(key=key)
    report = {
        "workload": {"readings": stats.readings, "days": days, "seed": seed},
        "storage": stats.summary(),
        "seal_wall_seconds": seal_wall,
        "seal_one_chunk": seal_one,
        "audit": {str(n): v for n, v in audit.items()},
        "alternating": alt,
        "reference": {k: list(v) if isinstance(v, tuple) else v for k, v in REFERENCE.items()},
        "thresholds": {k: list(v) if isinstance(v, tuple) else v for k, v in THRESHOLDS.items()},
    }
    (out / "report.json").write_text(json.dumps(report, indent=1))
    rows = [
        ("seal_seconds_per_chunk", seal_one["best"], REFERENCE["seal_seconds_per_chunk"], THRESHOLDS["seal_seconds_per_chunk"]),
        ("storage_overhead", stats.overhead, REFERENCE["storage_overhead"], "0.10-0.35"),
        ("per_sensor_saving", alt["saving"], 0.065, "> 0"),
    ]
    rows += [(f"audit_seconds_{n}_chunks", v["seconds"], "", THRESHOLDS["audit_seconds_per_chunk"] * n)
             for n, v in audit.items()]
    with open(out / "results.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["metric", "measured", "reference", "threshold"])
        wr.writerows(rows)
    plot_storage(stats, out / "storage.png")
    plot_seal_times(stats.seal_seconds, out / "seal_times.png")
    if audit:
        plot_audit(audit, out / "audit.png")
    report["rows"] = rows
    return report


__all__ = [
    "SealStats", "seal_stream", "evaluated", "measure_seal_chunk", "time_audit", "time_user_day",
    "user_day_views", "alternating_items", "compare_alternating", "cleartext_size", "run", "REFERENCE",
    "THRESHOLDS",
]
