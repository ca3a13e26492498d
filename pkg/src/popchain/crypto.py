"""Hashing, canonical encoding and pluggable signature schemes.

Two schemes are provided:

* ``Ed25519Scheme`` -- a real public-key signature scheme, used wherever the
  protocol logic itself is under test.
* ``MacScheme`` -- a deterministic keyed-MAC stand-in for large simulations.
  Verification goes through the scheme object, which remembers the secret for
  every public key it generated. Forgery without the secret is out of model.
"""
from __future__ import annotations

import hashlib
import hmac
import random
import struct
from dataclasses import dataclass
from typing import Protocol

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

DIGEST_SIZE = 32
ID_BITS = 256
ZERO_DIGEST = bytes(DIGEST_SIZE)

_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


def H(*parts: bytes) -> bytes:
    """SHA-256 over the raw concatenation of ``parts``."""
    return hashlib.sha256(b"".join(parts)).digest()


def be32(i: int) -> bytes:
    return _U32.pack(i)


# -- canonical encoding -------------------------------------------------------
# Every field is a 4-byte big-endian length followed by its payload. Integers
# are 8-byte big-endian, strings UTF-8.


def enc_bytes(b: bytes) -> bytes:
    return _U32.pack(len(b)) + b


def enc_int(i: int) -> bytes:
    if i < 0:
        raise ValueError(f"cannot encode negative integer {i}")
    return b"\x00\x00\x00\x08" + _U64.pack(i)


def enc_str(s: str) -> bytes:
    return enc_bytes(s.encode("utf-8"))


class Decoder:
    """Cursor over a canonical encoding."""

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def bytes(self) -> bytes:
        if self.pos + 4 > len(self.data):
            raise ValueError("truncated field header")
        (n,) = _U32.unpack_from(self.data, self.pos)
        start = self.pos + 4
        end = start + n
        if end > len(self.data):
            raise ValueError("truncated field payload")
        self.pos = end
        return self.data[start:end]

    def int(self) -> int:
        b = self.bytes()
        if len(b) != 8:
            raise ValueError("integer field must be 8 bytes")
        return _U64.unpack(b)[0]

    def str(self) -> str:
        return self.bytes().decode("utf-8")

    def done(self) -> bool:
        return self.pos == len(self.data)


# -- signatures ---------------------------------------------------------------


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    private_key: bytes


class SignatureScheme(Protocol):
    name: str

    def generate(self, rng: random.Random) -> KeyPair: ...

    def sign(self, private_key: bytes, message: bytes) -> bytes: ...

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool: ...


class Ed25519Scheme:
    name = "ed25519"

    def generate(self, rng: random.Random) -> KeyPair:
        seed = rng.getrandbits(256).to_bytes(32, "big")
        sk = Ed25519PrivateKey.from_private_bytes(seed)
        pk = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return KeyPair(pk, seed)

    def sign(self, private_key: bytes, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(private_key).sign(message)

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        except (InvalidSignature, ValueError):
            return False
        return True


class MacScheme:
    name = "mac"

    def __init__(self):
        self._secrets: dict[bytes, bytes] = {}

    def generate(self, rng: random.Random) -> KeyPair:
        secret = rng.getrandbits(256).to_bytes(32, "big")
        public = H(b"mac-public", secret)
        self._secrets[public] = secret
        return KeyPair(public, secret)

    def adopt(self, keys: KeyPair) -> None:
        """Make a key pair generated by another instance verifiable here."""
        self._secrets[keys.public_key] = keys.private_key

    def sign(self, private_key: bytes, message: bytes) -> bytes:
        return hmac.digest(private_key, message, "sha256")

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        secret = self._secrets.get(public_key)
        if secret is None:
            return False
        return hmac.compare_digest(hmac.digest(secret, message, "sha256"), signature)


def get_scheme(name: str) -> SignatureScheme:
    if name == "ed25519":
        return Ed25519Scheme()
    if name == "mac":
        return MacScheme()
    raise ValueError(f"unknown signature scheme {name!r}")
