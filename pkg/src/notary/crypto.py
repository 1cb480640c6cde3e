"""Cryptographic primitives behind small key-handle types.

Concrete schemes: SHA-256 hashing, Ed25519 signatures, X25519 for both the
key exchange and sealed-box public-key encryption, HKDF-SHA256, HMAC-SHA256
and AES-256-GCM.
"""

from __future__ import annotations

import hmac as _hmac
import os
import secrets
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .model import RANDOM_STRING_SIZE, sha256

__all__ = [
    "CryptoError", "DecryptionError", "InvalidGroupElement",
    "PublicKey", "KeyPair", "DHSecret",
    "hash", "sign", "verify_sig", "mac", "mac_verify", "kdf",
    "dh_keygen", "dh_shared", "aead_encrypt", "aead_decrypt",
    "pk_encrypt", "pk_decrypt", "random_string",
]

_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw
_RAW_PRIV = serialization.PrivateFormat.Raw
_NOENC = serialization.NoEncryption()

_KEY_MAGIC = b"NTK1"
_PUB_MAGIC = b"NTP1"
NONCE_SIZE = 12


class CryptoError(Exception):
    pass


class DecryptionError(CryptoError):
    """Authenticated decryption failed (wrong key or tampered ciphertext)."""


class InvalidGroupElement(CryptoError):
    pass


def hash(data: bytes) -> bytes:  # noqa: A001 - mirrors the protocol's H
    return sha256(data)


@dataclass(frozen=True)
class PublicKey:
    """Verification key plus encryption key of one party."""

    verify_key: bytes
    box_key: bytes

    def to_bytes(self) -> bytes:
        return self.verify_key + self.box_key

    @classmethod
    def from_bytes(cls, data: bytes) -> "PublicKey":
        if len(data) != 64:
            raise ValueError("public key must be 64 bytes")
        return cls(data[:32], data[32:])

    def hex(self) -> str:
        return self.to_bytes().hex()

    @classmethod
    def fromhex(cls, text: str) -> "PublicKey":
        return cls.from_bytes(bytes.fromhex(text))

    def save(self, path) -> None:
        Path(path).write_bytes(_PUB_MAGIC + self.to_bytes())

    @classmethod
    def load(cls, path) -> "PublicKey":
        data = Path(path).read_bytes()
        if data[:4] != _PUB_MAGIC:
            raise ValueError(f"{path}: not a public key file")
        return cls.from_bytes(data[4:])


@dataclass(frozen=True)
class KeyPair:
    """Signing and decryption key of one party. Private bytes never leave here
    except through :meth:`save`, which writes a mode-0600 file."""

    public: PublicKey
    _sign: Ed25519PrivateKey = field(repr=False, compare=False)
    _box: X25519PrivateKey = field(repr=False, compare=False)

    @classmethod
    def generate(cls) -> "KeyPair":
        return cls._from_keys(Ed25519PrivateKey.generate(), X25519PrivateKey.generate())

    @classmethod
    def _from_keys(cls, sk: Ed25519PrivateKey, bk: X25519PrivateKey) -> "KeyPair":
        pub = PublicKey(sk.public_key().public_bytes(_RAW, _RAW_PUB), bk.public_key().public_bytes(_RAW, _RAW_PUB))
        return cls(pub, sk, bk)

    def save(self, path) -> None:
        path = Path(path)
        raw = self._sign.private_bytes(_RAW, _RAW_PRIV, _NOENC) + self._box.private_bytes(_RAW, _RAW_PRIV, _NOENC)
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "wb") as fh:
            fh.write(_KEY_MAGIC + raw)
        os.chmod(path, 0o600)

    @classmethod
    def load(cls, path) -> "KeyPair":
        data = Path(path).read_bytes()
        if data[:4] != _KEY_MAGIC or len(data) != 68:
            raise ValueError(f"{path}: not a private key file")
        return cls._from_keys(
            Ed25519PrivateKey.from_private_bytes(data[4:36]),
            X25519PrivateKey.from_private_bytes(data[36:68]),
        )


def sign(keys: KeyPair, message: bytes) -> bytes:
    return keys._sign.sign(message)


def verify_sig(public: PublicKey, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public.verify_key).verify(bytes(signature), message)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def mac(mac_key: bytes, message: bytes) -> bytes:
    return _hmac.new(mac_key, message, "sha256").digest()


def mac_verify(mac_key: bytes, message: bytes, tag: bytes) -> bool:
    return _hmac.compare_digest(mac(mac_key, message), tag)


def kdf(secret: bytes, label: str, length: int = 32) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=None, info=label.encode()).derive(secret)


class DHSecret:
    """Ephemeral exchange scalar; :meth:`erase` drops it."""

    __slots__ = ("_key", "public")

    def __init__(self):
        self._key = X25519PrivateKey.generate()
        self.public = self._key.public_key().public_bytes(_RAW, _RAW_PUB)

    def erase(self) -> None:
        self._key = None

    @property
    def erased(self) -> bool:
        return self._key is None


def dh_keygen() -> tuple[DHSecret, bytes]:
    s = DHSecret()
    return s, s.public


def check_group_element(element: bytes) -> None:
    if not isinstance(element, (bytes, bytearray)) or len(element) != 32:
        raise InvalidGroupElement("group element must be 32 bytes")
    if not any(element):
        raise InvalidGroupElement("identity element")


def dh_shared(secret: DHSecret, peer: bytes) -> bytes:
    if secret.erased:
        raise CryptoError("exchange secret already erased")
    check_group_element(peer)
    try:
        shared = secret._key.exchange(X25519PublicKey.from_public_bytes(bytes(peer)))
    except ValueError as exc:  # low-order point gives an all-zero secret
        raise InvalidGroupElement(str(exc)) from exc
    return shared


def aead_encrypt(key: bytes, plaintext: bytes, associated: bytes = b"") -> bytes:
    nonce = secrets.token_bytes(NONCE_SIZE)
    return nonce + AESGCM(key).encrypt(nonce, plaintext, associated)


def aead_decrypt(key: bytes, ciphertext: bytes, associated: bytes = b"") -> bytes:
    if len(ciphertext) < NONCE_SIZE + 16:
        raise DecryptionError("ciphertext too short")
    try:
        return AESGCM(key).decrypt(ciphertext[:NONCE_SIZE], ciphertext[NONCE_SIZE:], associated)
    except InvalidTag as exc:
        raise DecryptionError("authentication failed") from exc


def pk_encrypt(recipient: PublicKey, plaintext: bytes) -> bytes:
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes(_RAW, _RAW_PUB)
    shared = eph.exchange(X25519PublicKey.from_public_bytes(recipient.box_key))
    key = kdf(shared + eph_pub + recipient.box_key, "pk-encrypt")
    return eph_pub + aead_encrypt(key, plaintext, eph_pub)


def pk_decrypt(keys: KeyPair, ciphertext: bytes) -> bytes:
    if len(ciphertext) < 32 + NONCE_SIZE + 16:
        raise DecryptionError("ciphertext too short")
    eph_pub = ciphertext[:32]
    try:
        shared = keys._box.exchange(X25519PublicKey.from_public_bytes(eph_pub))
    except ValueError as exc:
        raise DecryptionError("bad ephemeral key") from exc
    key = kdf(shared + eph_pub + keys.public.box_key, "pk-encrypt")
    return aead_decrypt(key, ciphertext[32:], eph_pub)


def random_string() -> bytes:
    return secrets.token_bytes(RANDOM_STRING_SIZE)
