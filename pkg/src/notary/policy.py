"""Data-capture rules, their evaluation, and the two notification models.

Under notice-only (NoM) the trusted component encrypts each new rule for the
notifier, who re-signs it into a public broadcast file. Under
notice-and-acknowledgment (NaM) devices sign an acknowledgment of the rule
digest, and only acknowledged devices may have data retained.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Optional

from . import crypto
from .crypto import KeyPair, PublicKey
from .model import EncodingError, SensorReading, SensorState, pack_fields, read_u64, sha256, u64, unpack_fields

DAY = 86400


class IntegrityError(Exception):
    """Rules at rest no longer match their recorded digest."""


class InvalidAck(Exception):
    pass


class Polarity(enum.IntEnum):
    OPT_OUT = 0
    OPT_IN = 1

    @classmethod
    def parse(cls, text: str) -> "Polarity":
        return cls[text.upper().replace("-", "_")]

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")


def _window_contains(window: tuple[int, int], t: int) -> bool:
    start, end = window
    sod = t % DAY
    if start <= end:
        return start <= sod < end
    return sod >= start or sod < end  # wraps past midnight


@dataclass(frozen=True)
class DataCaptureRule:
    """Predicate over device, sensor and time, valid over [validity_start, validity_end).

    Predicate parts left as ``None`` match anything; ``daily_window`` is in
    seconds of the UTC day and may wrap past midnight.
    """

    rule_id: int
    polarity: Polarity
    validity_start: int
    validity_end: int
    devices: Optional[frozenset] = None
    sensors: Optional[frozenset] = None
    daily_window: Optional[tuple] = None
    interval: Optional[tuple] = None

    def __post_init__(self):
        if self.validity_end <= self.validity_start:
            raise ValueError("rule validity window is empty")
        if self.devices is not None and not isinstance(self.devices, frozenset):
            object.__setattr__(self, "devices", frozenset(self.devices))
        if self.sensors is not None and not isinstance(self.sensors, frozenset):
            object.__setattr__(self, "sensors", frozenset(self.sensors))
        if self.daily_window is not None:
            a, b = self.daily_window
            if not (0 <= a < DAY and 0 <= b <= DAY):
                raise ValueError("daily window must lie within one day")
            object.__setattr__(self, "daily_window", (int(a), int(b)))
        if self.interval is not None:
            object.__setattr__(self, "interval", (int(self.interval[0]), int(self.interval[1])))

    def valid_at(self, t: int) -> bool:
        return self.validity_start <= t < self.validity_end

    def matches(self, reading: SensorReading) -> bool:
        if self.devices is not None and reading.device not in self.devices:
            return False
        if self.sensors is not None and reading.sensor not in self.sensors:
            return False
        if self.daily_window is not None and not _window_contains(self.daily_window, reading.time):
            return False
        if self.interval is not None and not (self.interval[0] <= reading.time < self.interval[1]):
            return False
        return True

    def encode(self) -> bytes:
        def id_set(s):
            return b"\x00" if s is None else b"\x01" + pack_fields(*sorted(s))

        def pair(p):
            return b"" if p is None else u64(p[0]) + u64(p[1])

        return pack_fields(
            u64(self.rule_id), bytes([self.polarity]), u64(self.validity_start), u64(self.validity_end),
            id_set(self.devices), id_set(self.sensors), pair(self.daily_window), pair(self.interval),
        )

    @classmethod
    def decode(cls, data: bytes) -> "DataCaptureRule":
        f = unpack_fields(data)
        if len(f) != 8:
            raise EncodingError("rule must have 8 fields")

        def id_set(b):
            if b == b"\x00":
                return None
            if b[:1] != b"\x01":
                raise EncodingError("bad id set")
            return frozenset(unpack_fields(b[1:]))

        def pair(b):
            if not b:
                return None
            if len(b) != 16:
                raise EncodingError("bad pair")
            return (read_u64(b[:8]), read_u64(b[8:]))

        if len(f[1]) != 1:
            raise EncodingError("bad polarity")
        return cls(read_u64(f[0]), Polarity(f[1][0]), read_u64(f[2]), read_u64(f[3]),
                   id_set(f[4]), id_set(f[5]), pair(f[6]), pair(f[7]))

    @property
    def digest(self) -> bytes:
        return sha256(self.encode())

    def to_json(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "polarity": self.polarity.label,
            "device_ids": None if self.devices is None else sorted(d.hex() for d in self.devices),
            "sensor_ids": None if self.sensors is None else sorted(s.decode() for s in self.sensors),
            "daily_window": None if self.daily_window is None else list(self.daily_window),
            "interval": None if self.interval is None else list(self.interval),
            "validity_start": self.validity_start,
            "validity_end": self.validity_end,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "DataCaptureRule":
        devices = obj.get("device_ids")
        sensors = obj.get("sensor_ids")
        return cls(
            rule_id=int(obj["rule_id"]),
            polarity=Polarity.parse(obj["polarity"]),
            validity_start=int(obj["validity_start"]),
            validity_end=int(obj["validity_end"]),
            devices=None if devices is None else frozenset(bytes.fromhex(d) for d in devices),
            sensors=None if sensors is None else frozenset(s.encode() for s in sensors),
            daily_window=tuple(obj["daily_window"]) if obj.get("daily_window") is not None else None,
            interval=tuple(obj["interval"]) if obj.get("interval") is not None else None,
        )


def load_rule_file(path) -> list[DataCaptureRule]:
    """Rule files hold one JSON object per line."""
    rules = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            rules.append(DataCaptureRule.from_json(json.loads(line)))
    return rules


def write_rule_file(path, rules: Iterable[DataCaptureRule]) -> None:
    Path(path).write_text("".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in rules))


def ruleset_digest(default: Polarity, rules: Iterable[DataCaptureRule]) -> bytes:
    return sha256(pack_fields(b"ruleset", bytes([default]), *(r.encode() for r in rules)))


@dataclass(frozen=True)
class RuleSet:
    default_polarity: Polarity
    rules: tuple = ()
    digest: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        if not self.digest:
            object.__setattr__(self, "digest", self.expected_digest)

    @cached_property
    def expected_digest(self) -> bytes:
        return ruleset_digest(self.default_polarity, self.rules)

    def check(self) -> None:
        if self.digest != self.expected_digest:
            raise IntegrityError("rule set digest does not match its rules")

    def with_rule(self, rule: DataCaptureRule) -> "RuleSet":
        if any(r.rule_id == rule.rule_id for r in self.rules):
            raise ValueError(f"rule id {rule.rule_id} already present")
        return RuleSet(self.default_polarity, self.rules + (rule,))

    def get(self, rule_id: int) -> Optional[DataCaptureRule]:
        for r in self.rules:
            if r.rule_id == rule_id:
                return r
        return None

    def save(self, path, enclave: KeyPair) -> None:
        """Write rules to untrusted storage, digest signed by the trusted component."""
        self.check()
        doc = {
            "default_polarity": self.default_polarity.label,
            "rules": [r.to_json() for r in self.rules],
            "digest": self.digest.hex(),
            "signature": crypto.sign(enclave, b"ruleset-digest" + self.digest).hex(),
        }
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path, enclave_pk: PublicKey) -> "RuleSet":
        doc = json.loads(Path(path).read_text())
        rs = cls(Polarity.parse(doc["default_polarity"]),
                 tuple(DataCaptureRule.from_json(r) for r in doc["rules"]),
                 bytes.fromhex(doc["digest"]))
        rs.check()
        if not crypto.verify_sig(enclave_pk, b"ruleset-digest" + rs.digest, bytes.fromhex(doc["signature"])):
            raise IntegrityError("rule set digest signature invalid")
        return rs


@dataclass(frozen=True)
class Acknowledgment:
    device: bytes
    rule_id: int
    rule_digest: bytes
    signature: bytes

    def message(self) -> bytes:
        return ack_message(self.device, self.rule_digest)

    def to_json(self) -> dict:
        return {"device": self.device.hex(), "rule_id": self.rule_id,
                "rule_digest": self.rule_digest.hex(), "signature": self.signature.hex()}

    @classmethod
    def from_json(cls, obj) -> "Acknowledgment":
        return cls(bytes.fromhex(obj["device"]), int(obj["rule_id"]),
                   bytes.fromhex(obj["rule_digest"]), bytes.fromhex(obj["signature"]))


def ack_message(device: bytes, rule_digest: bytes) -> bytes:
    return pack_fields(b"ack", device, rule_digest)


@dataclass(frozen=True)
class AckRegistry:
    """Acknowledged rule ids per device, plus the device keys that vouch for them."""

    device_keys: Mapping = field(default_factory=dict)
    acks: Mapping = field(default_factory=dict)

    def acked(self, device: bytes) -> frozenset:
        return self.acks.get(device, frozenset())


def ack_rule_nam(device_keys: KeyPair, device: bytes, rule: DataCaptureRule) -> Acknowledgment:
    digest = rule.digest
    return Acknowledgment(device, rule.rule_id, digest, crypto.sign(device_keys, ack_message(device, digest)))


def register_ack(registry: AckRegistry, ack: Acknowledgment, rules: Optional[RuleSet] = None) -> AckRegistry:
    pk = registry.device_keys.get(ack.device)
    if pk is None:
        raise InvalidAck("unknown device")
    if not crypto.verify_sig(pk, ack.message(), ack.signature):
        raise InvalidAck("acknowledgment signature invalid")
    if rules is not None:
        rule = rules.get(ack.rule_id)
        if rule is None or rule.digest != ack.rule_digest:
            raise InvalidAck("acknowledgment does not match an active rule")
    acks = dict(registry.acks)
    acks[ack.device] = registry.acked(ack.device) | {ack.rule_id}
    return AckRegistry(registry.device_keys, acks)


def evaluate(rules: RuleSet, acks: Optional[AckRegistry], reading: SensorReading) -> SensorState:
    """State 1 iff the reading may be retained.

    Opt-out beats opt-in when both match. With ``acks`` (NaM), the device must
    also have acknowledged a rule of the set that is valid at the reading's time.
    """
    rules.check()
    t = reading.time
    granted = rules.default_polarity == Polarity.OPT_IN
    for rule in rules.rules:
        if not rule.valid_at(t) or not rule.matches(reading):
            continue
        if rule.polarity == Polarity.OPT_OUT:
            return SensorState.PASSIVE
        granted = True
    if not granted:
        return SensorState.PASSIVE
    if acks is not None:
        mine = acks.acked(reading.device)
        if not any(r.rule_id in mine and r.valid_at(t) for r in rules.rules):
            return SensorState.PASSIVE
    return SensorState.ACTIVE


class Evaluator:
    """Cached evaluation for the sealing hot path.

    The digest is checked once at construction; the rule tuple is immutable.
    """

    def __init__(self, rules: RuleSet, acks: Optional[AckRegistry] = None):
        rules.check()
        self.rules = rules
        self.acks = acks
        self._rules = rules.rules
        self._default_in = rules.default_polarity == Polarity.OPT_IN

    def __call__(self, reading: SensorReading) -> SensorState:
        t = reading.time
        granted = self._default_in
        for rule in self._rules:
            if rule.validity_start <= t < rule.validity_end and rule.matches(reading):
                if rule.polarity == Polarity.OPT_OUT:
                    return SensorState.PASSIVE
                granted = True
        if not granted:
            return SensorState.PASSIVE
        if self.acks is not None:
            mine = self.acks.acked(reading.device)
            if not any(r.rule_id in mine and r.valid_at(t) for r in self._rules):
                return SensorState.PASSIVE
        return SensorState.ACTIVE


@dataclass(frozen=True)
class NoticeBundle:
    """Encrypted rule plus the trusted component's signature over the ciphertext."""

    ciphertext: bytes
    signature: bytes

    def to_json(self) -> dict:
        return {"ciphertext": self.ciphertext.hex(), "signature": self.signature.hex()}

    @classmethod
    def from_json(cls, obj) -> "NoticeBundle":
        return cls(bytes.fromhex(obj["ciphertext"]), bytes.fromhex(obj["signature"]))


def _seal_notice(rule: DataCaptureRule, recipient: PublicKey, enclave: KeyPair) -> NoticeBundle:
    ct = crypto.pk_encrypt(recipient, rule.encode())
    return NoticeBundle(ct, crypto.sign(enclave, b"notice" + ct))


def publish_rule_nom(rule: DataCaptureRule, rules: RuleSet, enclave: KeyPair,
                     notifier_pk: PublicKey) -> tuple[RuleSet, NoticeBundle]:
    """Add ``rule`` to the active set, then produce the notifier's bundle.

    The returned rule set is in force before the bundle exists.
    """
    updated = rules.with_rule(rule)
    return updated, _seal_notice(rule, notifier_pk, enclave)


def publish_rule_nam(rule: DataCaptureRule, rules: RuleSet, enclave: KeyPair,
                     device_pks: Mapping) -> tuple[RuleSet, dict]:
    updated = rules.with_rule(rule)
    return updated, {dev: _seal_notice(rule, pk, enclave) for dev, pk in device_pks.items()}


def open_notice(bundle: NoticeBundle, recipient: KeyPair, enclave_pk: PublicKey) -> DataCaptureRule:
    """Check the trusted component's signature and decrypt the rule."""
    if not crypto.verify_sig(enclave_pk, b"notice" + bundle.ciphertext, bundle.signature):
        raise crypto.DecryptionError("notice signature invalid")
    return DataCaptureRule.decode(crypto.pk_decrypt(recipient, bundle.ciphertext))


def broadcast(bundle: NoticeBundle, notifier: KeyPair, enclave_pk: PublicKey) -> dict:
    """Notifier side: open the bundle and publish the rule under its own signature."""
    rule = open_notice(bundle, notifier, enclave_pk)
    canonical = rule.encode()
    return {
        "rule": rule.to_json(),
        "canonical": canonical.hex(),
        "notifier_signature": crypto.sign(notifier, b"broadcast" + canonical).hex(),
    }


def check_broadcast(doc: Mapping, notifier_pk: PublicKey) -> DataCaptureRule:
    canonical = bytes.fromhex(doc["canonical"])
    if not crypto.verify_sig(notifier_pk, b"broadcast" + canonical, bytes.fromhex(doc["notifier_signature"])):
        raise IntegrityError("broadcast signature invalid")
    rule = DataCaptureRule.decode(canonical)
    if rule != DataCaptureRule.from_json(doc["rule"]):
        raise IntegrityError("broadcast rule text differs from signed rule")
    return rule


def save_acks(path, acks: Iterable[Acknowledgment]) -> None:
    Path(path).write_text("".join(json.dumps(a.to_json(), sort_keys=True) + "\n" for a in acks))


def load_acks(path) -> list[Acknowledgment]:
    p = Path(path)
    if not p.exists():
        return []
    return [Acknowledgment.from_json(json.loads(l)) for l in p.read_text().splitlines() if l.strip()]


def with_rules(rules: RuleSet, extra: Iterable[DataCaptureRule]) -> RuleSet:
    for r in extra:
        rules = rules.with_rule(r)
    return rules


__all__ = [
    "Polarity", "DataCaptureRule", "RuleSet", "AckRegistry", "Acknowledgment", "NoticeBundle",
    "IntegrityError", "InvalidAck", "evaluate", "Evaluator", "publish_rule_nom", "publish_rule_nam",
    "ack_rule_nam", "register_ack", "open_notice", "broadcast", "check_broadcast",
    "load_rule_file", "write_rule_file", "save_acks", "load_acks", "with_rules",
]
