"""Synthetic campus WiFi workload, campus rule sets and the controller feed.

Events follow a diurnal rate (quiet nights, a midday peak). Each device has a
home building and mostly connects to access points there. Params mimic the
attributes of a controller trap so a stored reading is ~140 bytes.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Optional

import numpy as np

from . import crypto
from .crypto import PublicKey
from .model import SensorReading
from .policy import DAY, DataCaptureRule, Polarity, RuleSet
from .sealing import encode_batch

BUILDINGS = 30
DEFAULT_START = 1_577_836_800  # 2020-01-01T00:00:00Z
DEFAULT_EVENTS_PER_DAY = 600_000

_CHANNELS = np.array([1, 6, 11, 36, 40, 44, 48, 149, 153, 157, 161])
_KINDS = ("assoc", "reassoc", "disassoc", "roam")


def device_id(i: int) -> bytes:
    """Six-byte locally administered MAC-style id."""
    return b"\x02\x00" + int(i).to_bytes(4, "big")


def sensor_id(j: int) -> bytes:
    return f"ap{int(j):04d}".encode()


def building_of(j: int, sensors: int) -> int:
    return int(j) * BUILDINGS // sensors


def _hour_weights() -> np.ndarray:
    h = np.arange(24) + 0.5
    w = 0.15 + np.exp(-(((h - 13.0) / 4.0) ** 2))
    return w / w.sum()


@dataclass
class Workload:
    """Time-sorted events held as columns; readings are built on demand."""

    times: np.ndarray
    devices: np.ndarray
    sensors: np.ndarray
    rssi: np.ndarray
    channel: np.ndarray
    kind: np.ndarray
    uptime: np.ndarray
    sensor_count: int = 490

    def __len__(self) -> int:
        return len(self.times)

    def params(self, i: int) -> bytes:
        ch = int(self.channel[i])
        band = "5GHz" if ch > 14 else "2.4GHz"
        s = int(self.sensors[i])
        return (f"type={_KINDS[self.kind[i]]};rssi={int(self.rssi[i])};snr={int(self.rssi[i]) + 95};ch={ch};"
                f"band={band};ssid=campus-secure;vlan={100 + s % 40};ap=ap-b{s * BUILDINGS // self.sensor_count:02d}-"
                f"{s:04d};ctrl=wlc-{s % 8:02d};uptime={int(self.uptime[i])}").encode()

    def reading(self, i: int) -> SensorReading:
        return SensorReading(device_id(self.devices[i]), sensor_id(self.sensors[i]), int(self.times[i]),
                             self.params(i))

    def readings(self, start: int = 0, stop: Optional[int] = None) -> Iterator[SensorReading]:
        stop = len(self) if stop is None else stop
        for i in range(start, stop):
            yield self.reading(i)


def generate(days: float = 1, sensors: int = 490, devices: int = 5000,
             events_per_day: int = DEFAULT_EVENTS_PER_DAY, seed: int = 0,
             start: int = DEFAULT_START, home_bias: float = 0.8) -> Workload:
    """Deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    weights = _hour_weights()
    activity = rng.lognormal(0.0, 1.0, devices)
    activity /= activity.sum()
    home = rng.integers(0, BUILDINGS, devices)
    first = np.array([-(-b * sensors // BUILDINGS) for b in range(BUILDINGS + 1)])
    hours = int(np.ceil(days * 24))
    counts = rng.poisson(events_per_day * weights[np.arange(hours) % 24])
    if days * 24 < hours:
        counts[-1] = int(counts[-1] * (days * 24 - (hours - 1)))
    n = int(counts.sum())
    hour_of = np.repeat(np.arange(hours), counts)
    times = start + hour_of * 3600 + rng.integers(0, 3600, n)
    order = np.argsort(times, kind="stable")
    times = times[order]
    dev = rng.choice(devices, n, p=activity)
    b = home[dev]
    lo, hi = first[b], first[b + 1]
    local = lo + (rng.random(n) * np.maximum(hi - lo, 1)).astype(np.int64)
    roam = rng.integers(0, sensors, n)
    sens = np.where(rng.random(n) < home_bias, np.minimum(local, sensors - 1), roam)
    return Workload(
        times=times.astype(np.int64),
        devices=dev.astype(np.int64),
        sensors=sens.astype(np.int64),
        rssi=rng.integers(-90, -30, n),
        channel=rng.choice(_CHANNELS, n),
        kind=rng.integers(0, len(_KINDS), n),
        uptime=rng.integers(1_000, 50_000_000, n),
        sensor_count=sensors,
    )


def write_events(path, readings: Iterable[SensorReading]) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for r in readings:
            w.writerow([r.device.hex(), r.sensor.decode(), r.time, r.params.decode()])
            n += 1
    return n


def read_events(path) -> Iterator[SensorReading]:
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            params = row[3].encode() if len(row) > 3 else b""
            yield SensorReading(bytes.fromhex(row[0]), row[1].encode(), int(row[2]), params)


# -- campus rules ----------------------------------------------------------

def campus_rules(start: int = DEFAULT_START, days: int = 180, sensors: int = 490, devices: int = 5000,
                 seed: int = 0, opt_out_users: int = 50) -> RuleSet:
    """Opt-in default with one rule of each family the deployment used.

    Time-based (no capture 01:00-05:00), user-location (some users opt out of
    some buildings), user-time (some users opt out after 18:00) and
    time-location (one building dark on weekday evenings of a period).
    """
    rng = np.random.default_rng(seed + 1)
    end = start + days * DAY
    rules = [DataCaptureRule(1, Polarity.OPT_OUT, start, end, daily_window=(3600, 5 * 3600))]
    users = [device_id(i) for i in rng.choice(devices, min(opt_out_users, devices), replace=False)]
    half = len(users) // 2

    def building_sensors(b):
        return {sensor_id(j) for j in range(sensors) if building_of(j, sensors) == b}

    rules.append(DataCaptureRule(2, Polarity.OPT_OUT, start, end, devices=users[:half],
                                 sensors=building_sensors(int(rng.integers(BUILDINGS)))))
    rules.append(DataCaptureRule(3, Polarity.OPT_OUT, start, end, devices=users[half:],
                                 daily_window=(18 * 3600, DAY)))
    rules.append(DataCaptureRule(4, Polarity.OPT_OUT, start, end, sensors=building_sensors(0),
                                 daily_window=(20 * 3600, 23 * 3600), interval=(start, start + 30 * DAY)))
    return RuleSet(Polarity.OPT_IN, tuple(rules))


# -- controller feed -------------------------------------------------------

_FRAME = struct.Struct(">I")
FEED_BATCH = 256


def encrypt_feed(readings: Iterable[SensorReading], enclave_pk: PublicKey,
                 batch: int = FEED_BATCH) -> Iterator[bytes]:
    """Controller side: readings encrypted to the enclave in batches."""
    buf = []
    for r in readings:
        buf.append(r)
        if len(buf) >= batch:
            yield crypto.pk_encrypt(enclave_pk, encode_batch(buf))
            buf = []
    if buf:
        yield crypto.pk_encrypt(enclave_pk, encode_batch(buf))


def write_feed(fh: BinaryIO, ciphertexts: Iterable[bytes]) -> int:
    n = 0
    for ct in ciphertexts:
        fh.write(_FRAME.pack(len(ct)) + ct)
        n += 1
    return n


def read_feed(fh: BinaryIO) -> Iterator[bytes]:
    while True:
        head = fh.read(4)
        if not head:
            return
        if len(head) != 4:
            raise ValueError("truncated feed frame")
        (size,) = _FRAME.unpack(head)
        body = fh.read(size)
        if len(body) != size:
            raise ValueError("truncated feed frame")
        yield body


def alternating_states(n: int, period: int = 1) -> list[int]:
    """1,0,1,0... (or runs of ``period``) for the optimization comparison."""
    return [1 - (i // period) % 2 for i in range(n)]


__all__ = [
    "Workload", "generate", "device_id", "sensor_id", "building_of", "write_events", "read_events",
    "campus_rules", "encrypt_feed", "write_feed", "read_feed", "alternating_states",
]
