"""Byte-blob forms of ciphertexts, keys and parameters.

Every blob is ``u32 length | u8 version | u8 kind | body`` (little endian),
where ``length`` counts everything after itself.  Residues are bit-packed at
the width of their prime, and a ciphertext whose second component came from
a seed carries the 32-byte seed in place of that component.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from . import _kernels as K
from .bfv import (
    SEED_BYTES, Cipher, HEError, KeyMaterial, PublicKey, RelinKeys, SecretKey,
    _uniform_rows, SeededStream,
)
from .params import HEParams, context

FORMAT_VERSION = 1

KIND_CIPHER = 1
KIND_PUBLIC = 2
KIND_RELIN = 3
KIND_SECRET = 4
KIND_PARAMS = 5

_FLAG_NTT = 1
_FLAG_SEEDED = 2


class SerializationError(HEError):
    """Malformed, truncated or mismatched blob."""


# ------------------------------------------------------------------ envelope

def _wrap(kind: int, body: bytes) -> bytes:
    return struct.pack("<IBB", len(body) + 2, FORMAT_VERSION, kind) + body


def _unwrap(blob: bytes, kind: int) -> memoryview:
    mv = memoryview(blob)
    if len(mv) < 6:
        raise SerializationError("blob truncated in header")
    n, ver, k = struct.unpack_from("<IBB", mv)
    if ver != FORMAT_VERSION:
        raise SerializationError(f"unsupported format version {ver}")
    if k != kind:
        raise SerializationError(f"expected blob kind {kind}, got {k}")
    if len(mv) != n + 4:
        raise SerializationError(f"length field says {n + 4} bytes, got {len(mv)}")
    return mv[6:]


def blob_length(buf, offset: int = 0) -> int:
    """Total size of the blob starting at `offset` (length prefix included)."""
    if len(buf) - offset < 4:
        raise SerializationError("blob truncated in length prefix")
    return struct.unpack_from("<I", buf, offset)[0] + 4


# -------------------------------------------------------------- limb packing

def _packed_len(bits: int, n: int) -> int:
    return (bits * n + 7) // 8


def _pack_rows(rows: np.ndarray, moduli) -> bytes:
    parts = []
    for r, q in zip(rows, moduli):
        bits = int(q).bit_length()
        out = np.zeros(_packed_len(bits, len(r)), dtype=np.uint8)
        K.pack_bits(np.ascontiguousarray(r), bits, out)
        parts.append(out.tobytes())
    return b"".join(parts)


def _unpack_rows(mv, pos: int, moduli, n: int) -> tuple[np.ndarray, int]:
    out = np.empty((len(moduli), n))
    for i, q in enumerate(moduli):
        bits = int(q).bit_length()
        ln = _packed_len(bits, n)
        if pos + ln > len(mv):
            raise SerializationError("blob truncated in residue data")
        buf = np.frombuffer(mv[pos:pos + ln], dtype=np.uint8)
        K.unpack_bits(buf, bits, n, out[i])
        if (out[i] >= q).any():
            raise SerializationError("residue out of range")
        pos += ln
    return out, pos


def _fp_check(mv, params: HEParams) -> int:
    if bytes(mv[:8]) != params.fingerprint():
        raise SerializationError("blob was produced for different HE parameters")
    return 8


# --------------------------------------------------------------- ciphertext

def serialize_cipher(ct: Cipher) -> bytes:
    p = ct.params
    seeded = ct.seed is not None and ct.size == 2 and ct.level == p.max_level
    use_ntt = seeded or ct.native_ntt
    d = ct.ntt_data() if use_ntt else ct.coeff_data()
    flags = (_FLAG_NTT if use_ntt else 0) | (_FLAG_SEEDED if seeded else 0)
    head = p.fingerprint() + struct.pack("<BBBB", ct.size, ct.level, flags, min(ct.depth, 255))
    moduli = p.primes[:ct.level]
    body = [head]
    if seeded:
        body.append(ct.seed)
    for c in range(ct.size):
        if seeded and c == 1:
            continue
        body.append(_pack_rows(d[c], moduli))
    return _wrap(KIND_CIPHER, b"".join(body))


def deserialize_cipher(blob: bytes, params: HEParams) -> Cipher:
    mv = _unwrap(blob, KIND_CIPHER)
    pos = _fp_check(mv, params)
    if len(mv) < pos + 4:
        raise SerializationError("blob truncated in ciphertext header")
    size, level, flags, depth = struct.unpack_from("<BBBB", mv, pos)
    pos += 4
    if size < 2 or not 1 <= level <= params.max_level:
        raise SerializationError("bad ciphertext shape")
    n = params.poly_degree
    moduli = params.primes[:level]
    seed = None
    if flags & _FLAG_SEEDED:
        if level != params.max_level or size != 2 or not flags & _FLAG_NTT:
            raise SerializationError("seeded ciphertext with bad shape")
        seed = bytes(mv[pos:pos + SEED_BYTES])
        if len(seed) != SEED_BYTES:
            raise SerializationError("blob truncated in seed")
        pos += SEED_BYTES
    data = np.empty((size, level, n))
    for c in range(size):
        if seed is not None and c == 1:
            data[1] = _uniform_rows(SeededStream(seed), moduli, n)
            continue
        data[c], pos = _unpack_rows(mv, pos, moduli, n)
    if pos != len(mv):
        raise SerializationError("trailing bytes after ciphertext")
    return Cipher(params, data, bool(flags & _FLAG_NTT), depth, seed=seed)


# --------------------------------------------------------------------- keys

def serialize_params(params: HEParams) -> bytes:
    return _wrap(KIND_PARAMS, json.dumps(params.to_dict(), sort_keys=True).encode())


def deserialize_params(blob: bytes) -> HEParams:
    mv = _unwrap(blob, KIND_PARAMS)
    try:
        return HEParams.from_dict(json.loads(bytes(mv)))
    except (ValueError, KeyError, TypeError) as e:
        raise SerializationError(f"bad parameter blob: {e}") from e


def serialize_public_key(pk: PublicKey) -> bytes:
    p = pk.params
    return _wrap(KIND_PUBLIC, p.fingerprint() + pk.seed + _pack_rows(pk.b, p.data_primes))


def deserialize_public_key(blob: bytes, params: HEParams) -> PublicKey:
    mv = _unwrap(blob, KIND_PUBLIC)
    pos = _fp_check(mv, params)
    seed = bytes(mv[pos:pos + SEED_BYTES])
    pos += SEED_BYTES
    b, pos = _unpack_rows(mv, pos, params.data_primes, params.poly_degree)
    if pos != len(mv):
        raise SerializationError("trailing bytes after public key")
    return PublicKey(params, b, seed)


def serialize_relin_keys(rk: RelinKeys) -> bytes:
    p = rk.params
    body = [p.fingerprint(), struct.pack("<B", len(rk.seeds))]
    for i, sd in enumerate(rk.seeds):
        body.append(sd)
        body.append(_pack_rows(rk.b[i], p.primes))
    return _wrap(KIND_RELIN, b"".join(body))


def deserialize_relin_keys(blob: bytes, params: HEParams) -> RelinKeys:
    mv = _unwrap(blob, KIND_RELIN)
    pos = _fp_check(mv, params)
    k = mv[pos]
    pos += 1
    if k != params.max_level:
        raise SerializationError("relinearisation key count does not match parameters")
    bs, seeds = [], []
    for _ in range(k):
        seeds.append(bytes(mv[pos:pos + SEED_BYTES]))
        pos += SEED_BYTES
        b, pos = _unpack_rows(mv, pos, params.primes, params.poly_degree)
        bs.append(b)
    if pos != len(mv):
        raise SerializationError("trailing bytes after relinearisation keys")
    return RelinKeys(params, np.stack(bs), seeds)


def serialize_secret_key(sk: SecretKey) -> bytes:
    codes = (np.asarray(sk.s, dtype=np.int64) + 1).astype(np.float64)  # {0,1,2}
    out = np.zeros(_packed_len(2, len(codes)), dtype=np.uint8)
    K.pack_bits(codes, 2, out)
    return _wrap(KIND_SECRET, sk.params.fingerprint() + out.tobytes())


def deserialize_secret_key(blob: bytes, params: HEParams) -> SecretKey:
    mv = _unwrap(blob, KIND_SECRET)
    pos = _fp_check(mv, params)
    n = params.poly_degree
    if len(mv) - pos != _packed_len(2, n):
        raise SerializationError("secret key has wrong length")
    codes = np.empty(n)
    K.unpack_bits(np.frombuffer(mv[pos:], dtype=np.uint8), 2, n, codes)
    if (codes > 2).any():
        raise SerializationError("secret key coefficient out of range")
    s = codes - 1.0
    ctx = context(params)
    x = np.empty((len(params.primes), n))
    K.lift_signed(s, ctx.all_ntt.p, x)
    return SecretKey(params, s, ctx.all_ntt.forward(x))


def serialize_keys(km: KeyMaterial, include_secret: bool = True) -> bytes:
    """Params, public and relinearisation keys, and optionally the secret key."""
    parts = [serialize_params(km.params), serialize_public_key(km.pk), serialize_relin_keys(km.rk)]
    if include_secret:
        parts.append(serialize_secret_key(km.sk))
    return b"".join(parts)


def deserialize_keys(blob: bytes) -> KeyMaterial:
    """Inverse of serialize_keys; `sk` is None when it was not included."""
    parts = []
    pos = 0
    while pos < len(blob):
        ln = blob_length(blob, pos)
        if pos + ln > len(blob):
            raise SerializationError("key file truncated")
        parts.append(bytes(blob[pos:pos + ln]))
        pos += ln
    if len(parts) not in (3, 4):
        raise SerializationError("key file must hold 3 or 4 blobs")
    params = deserialize_params(parts[0])
    pk = deserialize_public_key(parts[1], params)
    rk = deserialize_relin_keys(parts[2], params)
    sk = deserialize_secret_key(parts[3], params) if len(parts) == 4 else None
    return KeyMaterial(params, sk, pk, rk)
