"""Two-stage pseudonymous registration.

The identification authority maps real identities to pseudonyms; the network
registry maps pseudonyms to network IDs. Neither store alone links a real
identity to a network ID.
"""
from __future__ import annotations

import random
import threading
from dataclasses import dataclass
from typing import Iterable

from .crypto import (
    DIGEST_SIZE,
    Decoder,
    KeyPair,
    SignatureScheme,
    enc_bytes,
    enc_str,
)

SNAPSHOT_HEADER = "#popchain-registry v1"


class IdentityError(Exception):
    pass


class DuplicateRealId(IdentityError):
    pass


class InvalidCertificate(IdentityError):
    pass


class DuplicatePseudonym(IdentityError):
    pass


class AuthenticationFailed(IdentityError):
    pass


class UnknownNetworkId(IdentityError):
    pass


@dataclass(frozen=True)
class Certificate:
    subject_id: bytes
    subject_key: bytes
    issuer: str
    issuer_signature: bytes

    def payload(self) -> bytes:
        return enc_str(self.issuer) + enc_bytes(self.subject_id) + enc_bytes(self.subject_key)

    def to_bytes(self) -> bytes:
        return (
            enc_bytes(self.subject_id)
            + enc_bytes(self.subject_key)
            + enc_str(self.issuer)
            + enc_bytes(self.issuer_signature)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        d = Decoder(data)
        cert = cls(d.bytes(), d.bytes(), d.str(), d.bytes())
        if not d.done():
            raise ValueError("trailing bytes after certificate")
        return cert

    def verify(self, scheme: SignatureScheme, issuer_key: bytes) -> bool:
        return scheme.verify(issuer_key, self.payload(), self.issuer_signature)


def _issue(scheme: SignatureScheme, issuer: str, keys: KeyPair, subject_id: bytes, subject_key: bytes) -> Certificate:
    unsigned = Certificate(subject_id, subject_key, issuer, b"")
    return Certificate(subject_id, subject_key, issuer, scheme.sign(keys.private_key, unsigned.payload()))


def _fresh_id(rng: random.Random, taken) -> bytes:
    while True:
        candidate = rng.getrandbits(8 * DIGEST_SIZE).to_bytes(DIGEST_SIZE, "big")
        if candidate not in taken:
            return candidate


class IdentificationAuthority:
    """Holds (real_id, pseudonym_id, Cert_I) tuples and nothing else."""

    def __init__(self, scheme: SignatureScheme, rng: random.Random, name: str = "authority"):
        self.scheme = scheme
        self.name = name
        self.keys = scheme.generate(rng)
        self._rng = rng
        self._lock = threading.Lock()
        self.records: dict[str, tuple[bytes, Certificate]] = {}
        self._pids: set[bytes] = set()

    @property
    def public_key(self) -> bytes:
        return self.keys.public_key

    def register_identity(self, real_id: str, pub_I: bytes) -> tuple[bytes, Certificate]:
        with self._lock:
            if real_id in self.records:
                raise DuplicateRealId(real_id)
            pid = _fresh_id(self._rng, self._pids)
            cert = _issue(self.scheme, self.name, self.keys, pid, pub_I)
            self.records[real_id] = (pid, cert)
            self._pids.add(pid)
            return pid, cert

    def snapshot(self) -> str:
        lines = [SNAPSHOT_HEADER]
        for real_id, (pid, cert) in self.records.items():
            lines.append("\t".join(["I", real_id.encode().hex(), pid.hex(), cert.to_bytes().hex()]))
        return "\n".join(lines) + "\n"

    def load_snapshot(self, text: str) -> None:
        with self._lock:
            self.records.clear()
            self._pids.clear()
            for kind, fields in _parse_snapshot(text):
                if kind != "I" or len(fields) != 3:
                    raise ValueError(f"unexpected authority record {kind!r}")
                real_id = bytes.fromhex(fields[0]).decode()
                pid = bytes.fromhex(fields[1])
                self.records[real_id] = (pid, Certificate.from_bytes(bytes.fromhex(fields[2])))
                self._pids.add(pid)


@dataclass(frozen=True)
class ChangeLogEntry:
    pseudonym_id: bytes
    old_network_id: bytes | None
    new_network_id: bytes
    timestamp: int


class NetworkRegistry:
    """Holds (pseudonym_id, network_id, Cert_N) tuples plus an append-only change log."""

    def __init__(
        self,
        scheme: SignatureScheme,
        authority_key: bytes,
        rng: random.Random,
        name: str = "registry",
    ):
        self.scheme = scheme
        self.name = name
        self.authority_key = authority_key
        self.keys = scheme.generate(rng)
        self._rng = rng
        self._lock = threading.Lock()
        self.records: dict[bytes, tuple[bytes, Certificate]] = {}
        self._by_nid: dict[bytes, bytes] = {}
        self._retired: set[bytes] = set()
        self._challenges: dict[bytes, bytes] = {}
        self.change_log: list[ChangeLogEntry] = []
        self._clock = 0

    @property
    def public_key(self) -> bytes:
        return self.keys.public_key

    def issue_challenge(self, subject: bytes) -> bytes:
        """Fresh nonce the holder of ``subject``'s key must sign."""
        with self._lock:
            nonce = self._rng.getrandbits(256).to_bytes(32, "big")
            self._challenges[subject] = nonce
            return nonce

    def _consume_challenge(self, subject: bytes) -> bytes:
        nonce = self._challenges.pop(subject, None)
        if nonce is None:
            raise AuthenticationFailed("no outstanding challenge")
        return nonce

    def _tick(self, timestamp: int | None) -> int:
        self._clock = self._clock + 1 if timestamp is None else max(self._clock, timestamp)
        return self._clock

    def register_network_id(
        self,
        pseudonym_id: bytes,
        cert_I: Certificate,
        pub_G: bytes,
        auth_proof: bytes,
        timestamp: int | None = None,
    ) -> tuple[bytes, Certificate]:
        with self._lock:
            if cert_I.subject_id != pseudonym_id or not cert_I.verify(self.scheme, self.authority_key):
                raise InvalidCertificate(pseudonym_id.hex())
            if pseudonym_id in self.records:
                raise DuplicatePseudonym(pseudonym_id.hex())
            challenge = self._consume_challenge(pseudonym_id)
            if not self.scheme.verify(cert_I.subject_key, challenge, auth_proof):
                raise AuthenticationFailed(pseudonym_id.hex())
            nid = _fresh_id(self._rng, self._by_nid.keys() | self._retired)
            cert = _issue(self.scheme, self.name, self.keys, nid, pub_G)
            self.records[pseudonym_id] = (nid, cert)
            self._by_nid[nid] = pseudonym_id
            self.change_log.append(ChangeLogEntry(pseudonym_id, None, nid, self._tick(timestamp)))
            return nid, cert

    def rotate_network_id(self, old_network_id: bytes, auth_proof: bytes, timestamp: int | None = None) -> bytes:
        with self._lock:
            pid = self._by_nid.get(old_network_id)
            if pid is None:
                raise UnknownNetworkId(old_network_id.hex())
            _, cert = self.records[pid]
            challenge = self._consume_challenge(old_network_id)
            if not self.scheme.verify(cert.subject_key, challenge, auth_proof):
                raise AuthenticationFailed(old_network_id.hex())
            nid = _fresh_id(self._rng, self._by_nid.keys() | self._retired)
            new_cert = _issue(self.scheme, self.name, self.keys, nid, cert.subject_key)
            del self._by_nid[old_network_id]
            self._retired.add(old_network_id)
            self.records[pid] = (nid, new_cert)
            self._by_nid[nid] = pid
            self.change_log.append(ChangeLogEntry(pid, old_network_id, nid, self._tick(timestamp)))
            return nid

    def certificate(self, network_id: bytes) -> Certificate:
        pid = self._by_nid.get(network_id)
        if pid is None:
            raise UnknownNetworkId(network_id.hex())
        return self.records[pid][1]

    def roster(self) -> dict[bytes, bytes]:
        """network_id -> certified public key, for every member whose certificate verifies."""
        out = {}
        for nid, cert in self.records.values():
            if cert.subject_id == nid and cert.verify(self.scheme, self.public_key):
                out[nid] = cert.subject_key
        return out

    def replay_log(self) -> dict[bytes, bytes]:
        """pseudonym_id -> network_id obtained by replaying the change log from empty."""
        mapping: dict[bytes, bytes] = {}
        for entry in self.change_log:
            if mapping.get(entry.pseudonym_id) != entry.old_network_id:
                raise ValueError("change log is inconsistent")
            mapping[entry.pseudonym_id] = entry.new_network_id
        return mapping

    def snapshot(self) -> str:
        lines = [SNAPSHOT_HEADER]
        for pid, (nid, cert) in self.records.items():
            lines.append("\t".join(["N", pid.hex(), nid.hex(), cert.to_bytes().hex()]))
        for e in self.change_log:
            old = e.old_network_id.hex() if e.old_network_id else "-"
            lines.append("\t".join(["L", e.pseudonym_id.hex(), old, e.new_network_id.hex(), str(e.timestamp)]))
        return "\n".join(lines) + "\n"

    def load_snapshot(self, text: str) -> None:
        with self._lock:
            self.records.clear()
            self._by_nid.clear()
            self._retired.clear()
            self.change_log.clear()
            for kind, f in _parse_snapshot(text):
                if kind == "N" and len(f) == 3:
                    pid, nid = bytes.fromhex(f[0]), bytes.fromhex(f[1])
                    self.records[pid] = (nid, Certificate.from_bytes(bytes.fromhex(f[2])))
                    self._by_nid[nid] = pid
                elif kind == "L" and len(f) == 4:
                    old = None if f[1] == "-" else bytes.fromhex(f[1])
                    self.change_log.append(ChangeLogEntry(bytes.fromhex(f[0]), old, bytes.fromhex(f[2]), int(f[3])))
                    if old is not None:
                        self._retired.add(old)
                    self._clock = max(self._clock, int(f[3]))
                else:
                    raise ValueError(f"unexpected registry record {kind!r}")


def _parse_snapshot(text: str) -> Iterable[tuple[str, list[str]]]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != SNAPSHOT_HEADER:
        raise ValueError("missing registry snapshot header")
    for line in lines[1:]:
        if not line.strip():
            continue
        kind, *fields = line.split("\t")
        yield kind, fields


@dataclass
class Wallet:
    """What a node keeps locally after the two registration stages."""

    real_id: str
    identity_keys: KeyPair
    network_keys: KeyPair
    pseudonym_id: bytes
    cert_I: Certificate
    network_id: bytes
    cert_G: Certificate


def enroll(
    real_id: str,
    authority: IdentificationAuthority,
    registry: NetworkRegistry,
    rng: random.Random,
    timestamp: int | None = None,
) -> Wallet:
    """Run both registration stages for one honest user."""
    scheme = registry.scheme
    id_keys = scheme.generate(rng)
    pid, cert_I = authority.register_identity(real_id, id_keys.public_key)
    challenge = registry.issue_challenge(pid)
    proof = scheme.sign(id_keys.private_key, challenge)
    net_keys = scheme.generate(rng)
    nid, cert_G = registry.register_network_id(pid, cert_I, net_keys.public_key, proof, timestamp)
    return Wallet(real_id, id_keys, net_keys, pid, cert_I, nid, cert_G)


def rotate(wallet: Wallet, registry: NetworkRegistry, timestamp: int | None = None) -> bytes:
    challenge = registry.issue_challenge(wallet.network_id)
    proof = registry.scheme.sign(wallet.network_keys.private_key, challenge)
    nid = registry.rotate_network_id(wallet.network_id, proof, timestamp)
    wallet.network_id = nid
    wallet.cert_G = registry.certificate(nid)
    return nid
