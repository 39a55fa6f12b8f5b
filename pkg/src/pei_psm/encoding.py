"""Identifier canonicalisation, permutation-based hashing and constant-weight codes."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

PEI_DIGITS = 14
PEI_BITS = 47


class EncodingError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class PEI:
    """A 14-digit equipment identifier (no check digit)."""

    digits: str

    def __post_init__(self):
        d = self.digits
        if not isinstance(d, str) or len(d) != PEI_DIGITS or not d.isascii() or not d.isdigit():
            raise EncodingError(f"PEI must be exactly {PEI_DIGITS} decimal digits, got {d!r}")

    @property
    def value(self) -> int:
        return int(self.digits)

    @classmethod
    def from_int(cls, v: int) -> "PEI":
        if not 0 <= v < 10 ** PEI_DIGITS:
            raise EncodingError("PEI value out of range")
        return cls(f"{v:0{PEI_DIGITS}d}")

    def __str__(self):
        return self.digits


def pei_to_int(p: PEI | str) -> int:
    if isinstance(p, str):
        p = PEI(p)
    return p.value


# ----------------------------------------------------------------- hashing

@dataclass(frozen=True)
class PBHParams:
    """Permutation-based hashing of lam-bit items into N slots."""

    N: int
    perm_key: bytes
    lam: int = PEI_BITS

    def __post_init__(self):
        if self.N < 2 or self.N & (self.N - 1):
            raise EncodingError("N must be a power of two")
        if len(self.perm_key) != 16:
            raise EncodingError("perm_key must be 128 bits")
        if self.lam_bar < 1:
            raise EncodingError("residual bitlength must be at least 1")

    @property
    def log_n(self) -> int:
        return self.N.bit_length() - 1

    @property
    def lam_bar(self) -> int:
        return self.lam - self.log_n

    def prf(self, lo) -> np.ndarray:
        """Keyed PRF F(x_lo) mod N, vectorised: AES-128 over the 16-byte encoding."""
        lo = np.atleast_1d(np.asarray(lo, dtype=np.uint64))
        blocks = np.zeros((lo.size, 2), dtype=np.uint64)
        blocks[:, 0] = lo
        enc = Cipher(algorithms.AES(self.perm_key), modes.ECB()).encryptor()
        out = np.frombuffer(enc.update(blocks.tobytes()) + enc.finalize(), dtype=np.uint64)
        return (out[0::2] & np.uint64(self.N - 1)).astype(np.int64)


def pbh_map_many(xs, pp: PBHParams) -> tuple[np.ndarray, np.ndarray]:
    xs = np.asarray(xs, dtype=np.int64)
    if xs.size and (xs.min() < 0 or xs.max() >= 1 << pp.lam):
        raise EncodingError("identifier out of range for PBH")
    lo = xs & ((1 << pp.lam_bar) - 1)
    hi = xs >> pp.lam_bar
    return hi ^ pp.prf(lo), lo


def pbh_map(x: int, pp: PBHParams) -> tuple[int, int]:
    """x -> (slot, residual); residual keeps the low lam_bar bits."""
    if not 0 <= x < 1 << pp.lam:
        raise EncodingError("identifier out of range for PBH")
    s, r = pbh_map_many([x], pp)
    return int(s[0]), int(r[0])


def pbh_invert(slot: int, residual: int, pp: PBHParams) -> int:
    hi = slot ^ int(pp.prf([residual])[0])
    return (hi << pp.lam_bar) | residual


# --------------------------------------------------------- constant weight

@dataclass(frozen=True)
class CWCParams:
    h: int
    l: int
    lam_bar: int

    def __post_init__(self):
        if math.comb(self.l, self.h) < 1 << self.lam_bar:
            raise EncodingError("C(l, h) too small for the residual space")


def min_length(lam_bar: int, h: int) -> int:
    """Smallest l with C(l, h) >= 2**lam_bar (exact integers)."""
    target = 1 << lam_bar
    if h == 1:
        return max(target, 1)
    lo, hi = h, h
    while math.comb(hi, h) < target:
        lo, hi = hi, hi * 2
    while lo < hi:
        mid = (lo + hi) // 2
        if math.comb(mid, h) >= target:
            hi = mid
        else:
            lo = mid + 1
    return lo


def cwc_params_for(lam_bar: int, h: int, t: int | None = None) -> CWCParams:
    if h < 1 or lam_bar < 1:
        raise EncodingError("need h >= 1 and lam_bar >= 1")
    if t is not None and math.factorial(h) >= t:
        raise EncodingError(f"h! = {math.factorial(h)} is not below t = {t}")
    return CWCParams(h, min_length(lam_bar, h), lam_bar)


@lru_cache(maxsize=32)
def _binom_table(l: int, h: int) -> np.ndarray:
    tab = np.zeros((l + 1, h + 1), dtype=object)
    for n in range(l + 1):
        for k in range(h + 1):
            tab[n, k] = math.comb(n, k)
    if math.comb(l, h) < 1 << 62:
        return tab.astype(np.int64)
    return tab


def encode_cwc(residual: int, cp: CWCParams) -> np.ndarray:
    """Lexicographic unranking: bit string b[0..l-1] with b[0] most significant."""
    if not 0 <= residual < 1 << cp.lam_bar:
        raise EncodingError("residual out of range")
    l, k = cp.l, cp.h
    r = residual
    bits = np.zeros(l, dtype=np.uint8)
    for i in range(l):
        if k == 0:
            break
        zeros_first = math.comb(l - i - 1, k)  # completions when b[i] = 0
        if r >= zeros_first:
            bits[i] = 1
            r -= zeros_first
            k -= 1
    return bits


def decode_cwc(cw, cp: CWCParams) -> int:
    cw = np.asarray(cw)
    if cw.shape != (cp.l,) or int(cw.sum()) != cp.h or not np.isin(cw, (0, 1)).all():
        raise EncodingError(f"codeword must have length {cp.l} and weight {cp.h}")
    l, k, r = cp.l, cp.h, 0
    for i in range(l):
        if k == 0:
            break
        if cw[i]:
            r += math.comb(l - i - 1, k)
            k -= 1
    if r >= 1 << cp.lam_bar:
        raise EncodingError("codeword rank outside the residual space")
    return r


def encode_cwc_many(residuals, cp: CWCParams) -> np.ndarray:
    """Vectorised encode_cwc: (M,) residuals -> (M, l) uint8 codewords."""
    r = np.asarray(residuals, dtype=np.int64).copy()
    if r.size and (r.min() < 0 or r.max() >= 1 << cp.lam_bar):
        raise EncodingError("residual out of range")
    tab = _binom_table(cp.l, cp.h)
    if tab.dtype == object:
        return np.stack([encode_cwc(int(x), cp) for x in r]) if r.size else np.zeros((0, cp.l), np.uint8)
    k = np.full(r.shape, cp.h, dtype=np.int64)
    out = np.zeros(r.shape + (cp.l,), dtype=np.uint8)
    for i in range(cp.l):
        z = tab[cp.l - i - 1][k]
        one = (k > 0) & (r >= z)
        out[..., i] = one
        r -= np.where(one, z, 0)
        k -= one
    return out
