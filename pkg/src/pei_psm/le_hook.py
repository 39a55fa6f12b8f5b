"""Lawful-access escrow of the PEI.

The UE seals its PEI to the law-enforcement key (X25519 + HKDF-SHA256 +
AES-256-GCM).  The MNO only ever holds the opaque blob and forwards it when a
greylist match occurs; opening it requires ``sk_LE`` which lives with LE.
"""
from __future__ import annotations

import os
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .encoding import PEI
from .psm import Decision

AUDIT_MAGIC = b"PSMAUD1"
_INFO = b"pei-escrow v1"
_RAW = dict(encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw)
LE_CT_BYTES = 32 + 12 + 14 + 16  # ephemeral key, nonce, PEI digits, tag


class LEIntegrityError(Exception):
    """Escrow ciphertext failed authentication (tampered or wrong key)."""


class AuditLogError(Exception):
    """Corrupt or foreign audit log."""


@dataclass(frozen=True)
class LEKeyPair:
    pk_LE: bytes   # raw X25519 public key
    sk_LE: bytes   # raw X25519 private key

    def __repr__(self):
        return f"LEKeyPair(pk_LE={self.pk_LE.hex()}, sk_LE=<hidden>)"


def le_keygen() -> LEKeyPair:
    sk = X25519PrivateKey.generate()
    return LEKeyPair(
        sk.public_key().public_bytes(**_RAW),
        sk.private_bytes(serialization.Encoding.Raw, serialization.PrivateFormat.Raw,
                         serialization.NoEncryption()),
    )


def _kek(shared: bytes, eph_pub: bytes, pk: bytes) -> bytes:
    return HKDF(hashes.SHA256(), 32, salt=eph_pub + pk, info=_INFO).derive(shared)


def le_encrypt(p: PEI | str, pk_LE: bytes) -> bytes:
    """Seal a PEI; output is eph_pub(32) | nonce(12) | AES-GCM(ciphertext+tag)."""
    p = p if isinstance(p, PEI) else PEI(str(p))
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes(**_RAW)
    key = _kek(eph.exchange(X25519PublicKey.from_public_bytes(pk_LE)), eph_pub, pk_LE)
    nonce = os.urandom(12)
    return eph_pub + nonce + AESGCM(key).encrypt(nonce, p.digits.encode(), eph_pub)


def le_decrypt(ct: bytes, sk_LE: bytes) -> PEI:
    if len(ct) != LE_CT_BYTES:
        raise LEIntegrityError("escrow ciphertext has wrong length")
    sk = X25519PrivateKey.from_private_bytes(sk_LE)
    pk = sk.public_key().public_bytes(**_RAW)
    eph_pub, nonce, body = ct[:32], ct[32:44], ct[44:]
    try:
        key = _kek(sk.exchange(X25519PublicKey.from_public_bytes(eph_pub)), eph_pub, pk)
        pt = AESGCM(key).decrypt(nonce, body, eph_pub)
    except (InvalidTag, ValueError) as e:
        raise LEIntegrityError("escrow ciphertext failed authentication") from e
    return PEI(pt.decode("ascii"))


# ---------------------------------------------------------------- audit log

TRIGGER_GREYLIST_MATCH = 1


@dataclass(frozen=True)
class AuditRecord:
    session_id: bytes      # 16 random bytes
    timestamp: int         # UTC seconds
    le_ct: bytes
    trigger: int = TRIGGER_GREYLIST_MATCH

    def encode(self) -> bytes:
        return self.session_id + struct.pack("<QB", self.timestamp, self.trigger) + self.le_ct

    @classmethod
    def decode(cls, b: bytes) -> "AuditRecord":
        if len(b) < 25:
            raise AuditLogError("audit record too short")
        ts, trig = struct.unpack_from("<QB", b, 16)
        return cls(bytes(b[:16]), ts, bytes(b[25:]), trig)


class AuditLog:
    """Append-only record store; file-backed when `path` is given.

    All appends go through one lock so concurrent sessions cannot interleave
    partial records.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._mem: list[AuditRecord] = []
        if self.path is not None:
            if self.path.exists() and self.path.stat().st_size:
                self._mem = list(read_audit_log(self.path))
            else:
                self.path.write_bytes(AUDIT_MAGIC)

    def append(self, rec: AuditRecord) -> None:
        payload = rec.encode()
        frame = struct.pack("<I", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))
        with self._lock:
            if self.path is not None:
                with open(self.path, "ab") as f:
                    f.write(frame)
                    f.flush()
                    os.fsync(f.fileno())
            self._mem.append(rec)

    def records(self) -> list[AuditRecord]:
        with self._lock:
            return list(self._mem)

    def __len__(self):
        with self._lock:
            return len(self._mem)


def read_audit_log(path) -> list[AuditRecord]:
    data = Path(path).read_bytes()
    if not data.startswith(AUDIT_MAGIC):
        raise AuditLogError("missing audit log magic")
    pos = len(AUDIT_MAGIC)
    out = []
    while pos < len(data):
        if pos + 4 > len(data):
            raise AuditLogError(f"truncated record header at offset {pos}")
        (n,) = struct.unpack_from("<I", data, pos)
        end = pos + 4 + n + 4
        if end > len(data):
            raise AuditLogError(f"truncated record at offset {pos}")
        payload = data[pos + 4:pos + 4 + n]
        (crc,) = struct.unpack_from("<I", data, pos + 4 + n)
        if zlib.crc32(payload) != crc:
            raise AuditLogError(f"checksum mismatch in record at offset {pos}")
        out.append(AuditRecord.decode(payload))
        pos = end
    return out


def forward_on_greylist(decision: Decision, le_ct: bytes, log: AuditLog,
                        session_id: bytes | None = None) -> AuditRecord | None:
    """Emit an audit record iff the decision is a greylist listing."""
    if decision is not Decision.LISTED_GREYLIST:
        return None
    rec = AuditRecord(session_id or os.urandom(16), int(time.time()), bytes(le_ct))
    log.append(rec)
    return rec
