"""Authenticated log retrieval: a SIGMA-style exchange followed by one query.

Wire frames are a 4-byte big-endian length of what follows, a type byte and
length-prefixed fields::

    0x01 msg1     g^x
    0x02 msg2     g^y, SP_id, MAC_k(SP_id, g^x, g^y)
    0x03 msg3     AEAD_e(v_id, MAC_k(v_id, SP_id, g^x, g^y), signature, query)
    0x04 response AEAD_e(payload)
    0x05 error    reason

e = KDF(g^xy, "session") and k = KDF(e, "mac"). The verifier's identity only
travels inside the encrypted msg3. msg3 also carries a signature under the
verifier's registered key over (v_id, SP_id, g^x, g^y), which ties the
session to a key the service provider already knows.
"""

from __future__ import annotations

import enum
import json
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import crypto
from .crypto import KeyPair, PublicKey
from .model import ChunkId, EncodingError, pack_fields, u64, read_u64, unpack_fields
from .store import ChunkFormatError, ChunkStore, Retrieved, decode_chunk
from .verify import UserView

log = logging.getLogger(__name__)

MSG1, MSG2, MSG3, RESPONSE, ERROR = 0x01, 0x02, 0x03, 0x04, 0x05
MAX_FRAME = 1 << 31
_LEN = struct.Struct(">I")


class SessionAborted(Exception):
    """The exchange stopped; no log data was or will be sent."""


class AuthorizationError(SessionAborted):
    pass


class State(enum.Enum):
    INIT = "init"
    SENT_EXP = "sent-exp"
    KEY_DERIVED = "key-derived"
    AUTHENTICATED = "authenticated"
    CLOSED = "closed"


def encode_frame(mtype: int, *fields: bytes) -> bytes:
    body = bytes([mtype]) + pack_fields(*fields)
    return _LEN.pack(len(body)) + body


def decode_frame(frame: bytes) -> tuple[int, list[bytes]]:
    if len(frame) < 5:
        raise SessionAborted("short frame")
    (size,) = _LEN.unpack_from(frame)
    if size != len(frame) - 4:
        raise SessionAborted("frame length mismatch")
    try:
        return frame[4], unpack_fields(frame[5:])
    except EncodingError as exc:
        raise SessionAborted(f"bad frame: {exc}") from exc


def _expect(frame: bytes, mtype: int, count: int) -> list[bytes]:
    got, fields = decode_frame(frame)
    if got == ERROR:
        reason = fields[0].decode(errors="replace") if fields else "error"
        raise SessionAborted(f"peer aborted: {reason}")
    if got != mtype or len(fields) != count:
        raise SessionAborted(f"unexpected message type {got:#x}")
    return fields


def _keys(shared: bytes) -> tuple[bytes, bytes]:
    e = crypto.kdf(shared, "session")
    return e, crypto.kdf(e, "mac")


def _transcript(v_id: bytes, sp_id: bytes, gx: bytes, gy: bytes) -> bytes:
    return pack_fields(b"sigma-verifier", v_id, sp_id, gx, gy)


@dataclass(frozen=True)
class LogQuery:
    kind: str  # "audit" (whole chunks) or "user" (digest views)
    t_from: Optional[int] = None
    t_to: Optional[int] = None
    device: Optional[bytes] = None
    ids: tuple = ()

    def __post_init__(self):
        if self.kind not in ("audit", "user"):
            raise ValueError("query kind must be audit or user")
        if self.kind == "user" and self.device is None:
            raise ValueError("user queries name a device")

    def to_json(self) -> bytes:
        return json.dumps({
            "kind": self.kind, "from": self.t_from, "to": self.t_to,
            "device": None if self.device is None else self.device.hex(),
            "ids": [[c.stream_tag, c.index] for c in self.ids],
        }, sort_keys=True).encode()

    @classmethod
    def from_json(cls, data: bytes) -> "LogQuery":
        try:
            obj = json.loads(data)
            dev = obj.get("device")
            return cls(obj["kind"], obj.get("from"), obj.get("to"), None if dev is None else bytes.fromhex(dev),
                       tuple(ChunkId(int(i), t) for t, i in obj.get("ids", [])))
        except (ValueError, KeyError, TypeError) as exc:
            raise SessionAborted(f"bad query: {exc}") from exc


@dataclass(frozen=True)
class VerifierEntry:
    v_id: bytes
    role: str  # "auditor" or "user"
    public_key: PublicKey
    device: Optional[bytes] = None


@dataclass
class Registry:
    """Verifiers known to the service provider, keyed by v_id."""

    sp_id: bytes
    verifiers: dict = field(default_factory=dict)

    def add(self, entry: VerifierEntry) -> None:
        if entry.role not in ("auditor", "user"):
            raise ValueError("role must be auditor or user")
        if entry.role == "user" and entry.device is None:
            raise ValueError("user verifiers are bound to a device")
        self.verifiers[entry.v_id] = entry

    def get(self, v_id: bytes) -> Optional[VerifierEntry]:
        return self.verifiers.get(v_id)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({
            "sp_id": self.sp_id.decode(),
            "verifiers": [
                {"id": e.v_id.decode(), "role": e.role, "public_key": e.public_key.hex(),
                 "device": None if e.device is None else e.device.hex()}
                for e in self.verifiers.values()
            ],
        }, indent=1))

    @classmethod
    def load(cls, path) -> "Registry":
        obj = json.loads(Path(path).read_text())
        reg = cls(obj["sp_id"].encode())
        for v in obj["verifiers"]:
            dev = v.get("device")
            reg.add(VerifierEntry(v["id"].encode(), v["role"], PublicKey.fromhex(v["public_key"]),
                                  None if dev is None else bytes.fromhex(dev)))
        return reg


class _Session:
    def __init__(self):
        self.state = State.INIT
        self.session_key: Optional[bytes] = None
        self._mac_key: Optional[bytes] = None
        self._secret: Optional[crypto.DHSecret] = None
        self.gx = self.gy = b""
        self.abort_reason: Optional[str] = None

    def close(self) -> None:
        if self._secret is not None:
            self._secret.erase()
        self.state = State.CLOSED

    @property
    def ephemeral_erased(self) -> bool:
        return self._secret is None or self._secret.erased

    def _ad(self, mtype: int) -> bytes:
        return bytes([mtype]) + self.gx + self.gy


class Initiator(_Session):
    """Verifier side of the exchange."""

    def __init__(self, v_id: bytes, keys: KeyPair, expected_sp: Optional[bytes] = None):
        super().__init__()
        self.v_id = v_id
        self._keys = keys
        self.expected_sp = expected_sp
        self.sp_id: Optional[bytes] = None

    def msg1(self) -> bytes:
        if self.state != State.INIT:
            raise SessionAborted("msg1 already sent")
        self._secret, self.gx = crypto.dh_keygen()
        self.state = State.SENT_EXP
        return encode_frame(MSG1, self.gx)

    def handle_msg2(self, frame: bytes) -> None:
        try:
            if self.state != State.SENT_EXP:
                raise SessionAborted("unexpected msg2")
            gy, sp_id, tag = _expect(frame, MSG2, 3)
            try:
                shared = crypto.dh_shared(self._secret, gy)
            except crypto.CryptoError as exc:
                raise SessionAborted(f"bad exponent: {exc}") from exc
            e, mac_key = _keys(shared)
            if not crypto.mac_verify(mac_key, pack_fields(sp_id, self.gx, gy), tag):
                raise SessionAborted("msg2 MAC check failed")
            if self.expected_sp is not None and sp_id != self.expected_sp:
                raise SessionAborted("unexpected service provider")
        except SessionAborted as exc:
            self.abort_reason = str(exc)
            self.close()
            raise
        self.gy, self.sp_id, self.session_key, self._mac_key = gy, sp_id, e, mac_key
        self.state = State.KEY_DERIVED

    def msg3(self, query: LogQuery) -> bytes:
        if self.state != State.KEY_DERIVED:
            raise SessionAborted("msg3 before key derivation")
        tag = crypto.mac(self._mac_key, pack_fields(self.v_id, self.sp_id, self.gx, self.gy))
        sig = crypto.sign(self._keys, _transcript(self.v_id, self.sp_id, self.gx, self.gy))
        inner = pack_fields(self.v_id, tag, sig, query.to_json())
        self._secret.erase()
        self.state = State.AUTHENTICATED
        return encode_frame(MSG3, crypto.aead_encrypt(self.session_key, inner, self._ad(MSG3)))

    def handle_response(self, frame: bytes) -> bytes:
        try:
            if self.state != State.AUTHENTICATED:
                raise SessionAborted("unexpected response")
            (ct,) = _expect(frame, RESPONSE, 1)
            try:
                return crypto.aead_decrypt(self.session_key, ct, self._ad(RESPONSE))
            except crypto.DecryptionError as exc:
                raise SessionAborted("response failed authentication") from exc
        except SessionAborted as exc:
            self.abort_reason = str(exc)
            raise
        finally:
            self.close()


Service = Callable[[LogQuery, VerifierEntry], bytes]


def authorize(query: LogQuery, entry: VerifierEntry) -> None:
    if entry.role == "auditor":
        return
    if query.kind != "user":
        raise AuthorizationError("users may not request whole chunks")
    if query.device != entry.device:
        raise AuthorizationError("users may only query their own device")


class Responder(_Session):
    """Service-provider side; one instance per connection."""

    def __init__(self, sp_id: bytes, registry: Registry, service: Service):
        super().__init__()
        self.sp_id = sp_id
        self.registry = registry
        self.service = service
        self.peer: Optional[VerifierEntry] = None
        self.query: Optional[LogQuery] = None
        self.log_bytes_sent = 0

    def on_frame(self, frame: bytes) -> bytes:
        """Consume one frame and return the reply frame (an error frame on abort)."""
        try:
            mtype, _ = decode_frame(frame)
            if mtype == MSG1 and self.state == State.INIT:
                return self._msg2(frame)
            if mtype == MSG3 and self.state == State.KEY_DERIVED:
                self.query = self._handle_msg3(frame)
                payload = self.service(self.query, self.peer)
                reply = encode_frame(RESPONSE, crypto.aead_encrypt(self.session_key, payload, self._ad(RESPONSE)))
                self.log_bytes_sent += len(payload)
                self.close()
                return reply
            raise SessionAborted(f"unexpected message {mtype:#x} in state {self.state.value}")
        except SessionAborted as exc:
            self.abort_reason = str(exc)
            self.close()
            return encode_frame(ERROR, str(exc).encode())

    def _msg2(self, frame: bytes) -> bytes:
        (gx,) = _expect(frame, MSG1, 1)
        self._secret, gy = crypto.dh_keygen()
        try:
            shared = crypto.dh_shared(self._secret, gx)
        except crypto.CryptoError as exc:
            raise SessionAborted(f"bad exponent: {exc}") from exc
        self.gx, self.gy = gx, gy
        self.session_key, self._mac_key = _keys(shared)
        self.state = State.KEY_DERIVED
        tag = crypto.mac(self._mac_key, pack_fields(self.sp_id, gx, gy))
        return encode_frame(MSG2, gy, self.sp_id, tag)

    def _handle_msg3(self, frame: bytes) -> LogQuery:
        (ct,) = _expect(frame, MSG3, 1)
        try:
            inner = unpack_fields(crypto.aead_decrypt(self.session_key, ct, self._ad(MSG3)))
        except (crypto.DecryptionError, EncodingError) as exc:
            raise SessionAborted("msg3 failed authentication") from exc
        if len(inner) != 4:
            raise SessionAborted("malformed msg3")
        v_id, tag, sig, query = inner
        if not crypto.mac_verify(self._mac_key, pack_fields(v_id, self.sp_id, self.gx, self.gy), tag):
            raise SessionAborted("msg3 MAC check failed")
        entry = self.registry.get(v_id)
        if entry is None:
            raise AuthorizationError("unregistered verifier")
        if not crypto.verify_sig(entry.public_key, _transcript(v_id, self.sp_id, self.gx, self.gy), sig):
            raise AuthorizationError("verifier signature check failed")
        self.state = State.AUTHENTICATED
        self.peer = entry
        q = LogQuery.from_json(query)
        authorize(q, entry)
        return q


def run_exchange(initiator: Initiator, responder: Responder, query: LogQuery,
                 tap: Optional[Callable[[str, bytes], bytes]] = None) -> bytes:
    """Run one session in memory. ``tap(direction, frame)`` may rewrite frames."""
    tap = tap or (lambda direction, frame: frame)
    m2 = tap("sp->v", responder.on_frame(tap("v->sp", initiator.msg1())))
    initiator.handle_msg2(m2)
    return initiator.handle_response(tap("sp->v", responder.on_frame(tap("v->sp", initiator.msg3(query)))))


# -- log payloads -----------------------------------------------------------

def encode_audit_payload(items: list[Retrieved], store: ChunkStore) -> bytes:
    parts = []
    for it in items:
        data = b""
        if it.error != "missing-chunk":
            try:
                data = store.read_bytes(it.chunk_id)
            except OSError:
                data = b""
        parts.append(pack_fields(it.chunk_id.stream_tag.encode(), u64(it.chunk_id.index), data,
                                 it.g_prev or b"", it.g_next or b""))
    return pack_fields(b"audit", *parts)


def decode_audit_payload(payload: bytes) -> list[Retrieved]:
    fields = unpack_fields(payload)
    if not fields or fields[0] != b"audit":
        raise EncodingError("not an audit payload")
    out = []
    for part in fields[1:]:
        tag, idx, data, gp, gn = unpack_fields(part)
        cid = ChunkId(read_u64(idx), tag.decode())
        if not data:
            out.append(Retrieved(cid, None, None, None, 0, "missing-chunk"))
            continue
        try:
            chunk = decode_chunk(data)
            if chunk.id != cid:
                raise ChunkFormatError("chunk id disagrees with request")
        except ChunkFormatError as exc:
            out.append(Retrieved(cid, None, None, None, len(data), f"format: {exc}"))
            continue
        out.append(Retrieved(cid, chunk, gp or None, gn or None, len(data)))
    return out


def decode_user_payload(payload: bytes) -> list[UserView]:
    obj = json.loads(payload)
    return [UserView.from_json(v) for v in obj["views"]]


class LogService:
    """Answers authorized queries from a chunk store."""

    def __init__(self, store: ChunkStore):
        self.store = store

    def __call__(self, query: LogQuery, entry: VerifierEntry) -> bytes:
        if query.kind == "audit":
            items = self.store.get_chunks(query.ids or None, query.t_from, query.t_to)
            return encode_audit_payload(items, self.store)
        items = self.store.get_chunks(query.ids or None, query.t_from, query.t_to, device=query.device)
        views = [UserView.of(it.chunk, it.g_prev, it.g_next).to_json() for it in items if it.chunk is not None]
        return json.dumps({"views": views}).encode()


# -- TCP transport ----------------------------------------------------------

def read_frame(sock_file) -> bytes:
    head = sock_file.read(4)
    if len(head) != 4:
        raise SessionAborted("connection closed")
    (size,) = _LEN.unpack(head)
    if size < 1 or size > MAX_FRAME:
        raise SessionAborted("frame size out of range")
    body = sock_file.read(size)
    if len(body) != size:
        raise SessionAborted("connection closed mid-frame")
    return head + body


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server = self.server
        responder = Responder(server.sp_id, server.registry, server.service)
        try:
            for _ in range(2):
                reply = responder.on_frame(read_frame(self.rfile))
                self.wfile.write(reply)
                self.wfile.flush()
                if responder.state == State.CLOSED:
                    break
        except (SessionAborted, OSError) as exc:
            log.info("session ended: %s", exc)
        finally:
            responder.close()
            if responder.abort_reason:
                log.info("session aborted: %s", responder.abort_reason)


class LogServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, sp_id: bytes, registry: Registry, service: Service):
        self.sp_id = sp_id
        self.registry = registry
        self.service = service
        super().__init__(address, _Handler)

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def fetch(address, v_id: bytes, keys: KeyPair, query: LogQuery, expected_sp: Optional[bytes] = None,
          timeout: float = 60.0) -> bytes:
    """Connect, run one session and return the decrypted payload."""
    if isinstance(address, str):
        address = parse_address(address)
    init = Initiator(v_id, keys, expected_sp)
    with socket.create_connection(address, timeout=timeout) as sock:
        f = sock.makefile("rwb")
        f.write(init.msg1())
        f.flush()
        init.handle_msg2(read_frame(f))
        f.write(init.msg3(query))
        f.flush()
        return init.handle_response(read_frame(f))


__all__ = [
    "MSG1", "MSG2", "MSG3", "RESPONSE", "ERROR", "SessionAborted", "AuthorizationError", "State",
    "LogQuery", "VerifierEntry", "Registry", "Initiator", "Responder", "LogService", "LogServer",
    "run_exchange", "fetch", "encode_frame", "decode_frame", "encode_audit_payload",
    "decode_audit_payload", "decode_user_payload", "authorize", "parse_address",
]
