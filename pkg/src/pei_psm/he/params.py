"""BFV parameter sets and the precomputed tables derived from them."""
from __future__ import annotations

import functools
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from sympy import isprime

from . import _kernels as K

# Largest total coefficient-modulus bit count per ring degree at 128/192/256
# bit classical security, ternary secret (HE standard tables).
MAX_MODULUS_BITS = {
    128: {1024: 27, 2048: 54, 4096: 109, 8192: 218, 16384: 438, 32768: 881},
    192: {1024: 19, 2048: 37, 4096: 75, 8192: 152, 16384: 305, 32768: 611},
    256: {1024: 14, 2048: 29, 4096: 58, 8192: 118, 16384: 237, 32768: 476},
}

MAX_PRIME_BITS = 50  # float64 residue arithmetic limit

# Default chains: last prime is the special (key-switching) prime.
DEFAULT_SAFE_CHAINS = {
    4096: (36, 36, 37),
    8192: (43, 43, 44, 44, 44),
    16384: (48, 48, 48, 49, 49, 49, 49, 49, 49),
}
# 204-bit chain used to replay the over-budget configuration at N = 8192.
PAPER_ORIGINAL_CHAINS = {8192: (38, 38, 38, 40, 50)}

BASELINE_PLAIN_MODULUS = 1_032_193


class ParamError(ValueError):
    pass


def primes_congruent(bits: int, n: int, count: int, skip=()) -> list[int]:
    """Largest `count` primes below 2**bits that are 1 mod 2n, excluding skip."""
    step = 2 * n
    c = ((1 << bits) - 1) // step * step + 1
    if c >= 1 << bits:
        c -= step
    out = []
    while len(out) < count:
        if c < 1 << (bits - 1):
            raise ParamError(f"not enough {bits}-bit primes for N={n}")
        if c not in skip and isprime(c):
            out.append(c)
        c -= step
    return out


def chain_primes(bit_sizes, n: int) -> list[int]:
    used: list[int] = []
    for b in bit_sizes:
        used.append(primes_congruent(b, n, 1, skip=set(used))[0])
    return used


def smallest_batching_prime(bits: int, n: int) -> int:
    step = 2 * n
    c = ((1 << (bits - 1)) + step - 1) // step * step + 1
    while c < 1 << bits:
        if isprime(c):
            return c
        c += step
    raise ParamError(f"no {bits}-bit batching prime for N={n}")


@dataclass(frozen=True)
class HEParams:
    """BFV parameters.  coeff_bits lists the chain, last entry special prime.

    security_level 0 disables the security table check (toy rings in tests).
    """

    poly_degree: int
    plain_modulus: int
    coeff_bits: tuple
    security_level: int = 128
    profile: str = "custom"
    primes: tuple = field(default=(), compare=False)

    def __post_init__(self):
        n = self.poly_degree
        if n < 8 or n & (n - 1):
            raise ParamError("poly_degree must be a power of two >= 8")
        t = self.plain_modulus
        if not isprime(t) or t % (2 * n) != 1:
            raise ParamError("plain modulus must be a prime congruent to 1 mod 2N (batching)")
        bits = tuple(int(b) for b in self.coeff_bits)
        if len(bits) < 2:
            raise ParamError("need at least one data prime and a special prime")
        if max(bits) > MAX_PRIME_BITS or min(bits) < 20:
            raise ParamError(f"prime sizes must lie in [20, {MAX_PRIME_BITS}] bits")
        object.__setattr__(self, "coeff_bits", bits)
        if self.security_level:
            table = MAX_MODULUS_BITS.get(self.security_level)
            if table is None or n not in table:
                raise ParamError("unsupported security level / ring degree")
            if sum(bits) > table[n]:
                raise ParamError(f"{sum(bits)}-bit modulus exceeds the {self.security_level}-bit bound {table[n]}")
        if not self.primes:
            object.__setattr__(self, "primes", tuple(chain_primes(bits, n)))
        if any(p % (2 * n) != 1 for p in self.primes) or len(set(self.primes)) != len(bits):
            raise ParamError("bad prime chain")
        if math.prod(self.primes[:-1]) <= 4 * t:
            raise ParamError("data modulus too small for the plaintext modulus")

    @property
    def data_primes(self) -> tuple:
        return self.primes[:-1]

    @property
    def special_prime(self) -> int:
        return self.primes[-1]

    @property
    def total_bits(self) -> int:
        return sum(p.bit_length() for p in self.primes)

    @property
    def data_bits(self) -> int:
        return math.prod(self.data_primes).bit_length()

    @property
    def max_level(self) -> int:
        return len(self.primes) - 1

    def fingerprint(self) -> bytes:
        h = hashlib.sha256(repr((self.poly_degree, self.plain_modulus, self.primes)).encode())
        return h.digest()[:8]

    def to_dict(self) -> dict:
        return {
            "poly_degree": self.poly_degree,
            "plain_modulus": self.plain_modulus,
            "coeff_bits": list(self.coeff_bits),
            "security_level": self.security_level,
            "profile": self.profile,
            "primes": list(self.primes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HEParams":
        return cls(int(d["poly_degree"]), int(d["plain_modulus"]), tuple(d["coeff_bits"]),
                   int(d.get("security_level", 128)), d.get("profile", "custom"),
                   tuple(int(p) for p in d.get("primes", ())))


def gen_params(profile: str = "default_safe", poly_degree: int = 8192) -> HEParams:
    """Named parameter profiles at N in {4096, 8192, 16384}."""
    if poly_degree not in DEFAULT_SAFE_CHAINS:
        raise ParamError(f"unsupported ring degree {poly_degree}")
    if poly_degree == 8192:
        t = BASELINE_PLAIN_MODULUS
    else:
        t = smallest_batching_prime(20, poly_degree)
    if profile == "default_safe":
        chain = DEFAULT_SAFE_CHAINS[poly_degree]
    elif profile == "paper_original":
        if poly_degree not in PAPER_ORIGINAL_CHAINS:
            raise ParamError("paper_original profile is only defined at N = 8192")
        chain = PAPER_ORIGINAL_CHAINS[poly_degree]
    else:
        raise ParamError(f"unknown profile {profile!r}")
    return HEParams(poly_degree, t, chain, 128, profile)


# ------------------------------------------------------------------ tables

def _bitrev(x: int, bits: int) -> int:
    return int(format(x, f"0{bits}b")[::-1], 2) if bits else 0


def _root_2n(p: int, n: int) -> int:
    g = 2
    while True:
        psi = pow(g, (p - 1) // (2 * n), p)
        if pow(psi, n, p) == p - 1:
            return psi
        g += 1


class NTTTables:
    """Twiddle tables for a list of moduli (one row each)."""

    def __init__(self, moduli, n: int):
        self.p = np.array(moduli, dtype=np.float64)
        L = len(moduli)
        lg = n.bit_length() - 1
        m = n // K.TAIL
        rev = np.array([_bitrev(i, lg) for i in range(n)], dtype=np.int64)
        self.w = np.empty((L, n))
        self.wi = np.empty((L, n))
        self.tw = np.zeros((L, 3, 4, m))
        self.twi = np.zeros((L, 3, 4, m))
        self.ninv = np.empty(L)
        for r, p in enumerate(moduli):
            psi = _root_2n(p, n)
            psi_inv = pow(psi, -1, p)
            pw = _powers(psi, 2 * n, p)
            pwi = _powers(psi_inv, 2 * n, p)
            self.w[r] = pw[rev]
            self.wi[r] = pwi[rev]
            for s in range(3):
                t = K.TAIL >> (s + 1)
                M = n // (2 * t)
                step = K.TAIL // (2 * t)
                idx = M + np.arange(m) * step
                for c in range(step):
                    self.tw[r, s, c] = self.w[r][idx + c]
                    self.twi[r, s, c] = self.wi[r][idx + c]
            self.ninv[r] = pow(n, -1, p)

    def sub(self, rows) -> "NTTTables":
        o = object.__new__(NTTTables)
        rows = list(rows)
        for a in ("p", "w", "wi", "tw", "twi", "ninv"):
            setattr(o, a, np.ascontiguousarray(getattr(self, a)[rows]))
        return o

    def forward(self, x):
        K.ntt(x, self.w, self.tw, self.p)
        return x

    def inverse(self, x):
        K.intt(x, self.wi, self.twi, self.p, self.ninv)
        return x


def _powers(g: int, count: int, p: int) -> np.ndarray:
    out = np.empty(count, dtype=np.float64)
    x = 1
    for i in range(count):
        out[i] = x
        x = x * g % p
    return out


def _f(vals) -> np.ndarray:
    return np.array([float(v) for v in vals], dtype=np.float64)


class ExtendTables:
    """Exact base extension from base `src` to base `dst`."""

    def __init__(self, src, dst):
        Q = math.prod(src)
        self.qs = _f(src)
        self.hat_inv = _f(pow(Q // q, -1, q) for q in src)
        self.inv_f = np.array([1.0 / q for q in src])
        self.ps = _f(dst)
        self.M = np.array([[(Q // q) % p for p in dst] for q in src], dtype=np.float64)
        self.Qmod = _f(Q % p for p in dst)

    def __call__(self, x, out=None):
        if out is None:
            out = np.empty((len(self.ps), x.shape[1]))
        K.base_extend(x, self.qs, self.hat_inv, self.inv_f, self.ps, self.M, self.Qmod, out)
        return out


@dataclass
class LevelTables:
    """Everything needed to work with ciphertexts over the first `level` primes."""

    level: int
    qs: list
    Q: int
    ntt: NTTTables
    delta: np.ndarray          # floor(Q/t) mod q_i
    dec_hat_inv: np.ndarray    # (Q/q_i)^-1 mod q_i
    dec_tq: np.ndarray         # t / q_i
    drop_inv: np.ndarray       # q_last^-1 mod q_i for i < level-1


class MulTables:
    """Tables for full-RNS tensoring at one level."""

    def __init__(self, ctx: "HEContext", level: int):
        qs = list(ctx.params.data_primes[:level])
        Q = math.prod(qs)
        t = ctx.params.plain_modulus
        n = ctx.params.poly_degree
        need = Q.bit_length() + t.bit_length() + n.bit_length() + 16
        aux = []
        skip = set(ctx.params.primes)
        while sum(p.bit_length() for p in aux) < need:
            aux += primes_congruent(MAX_PRIME_BITS, n, 1, skip=skip | set(aux))
        P = math.prod(aux)
        self.kq = len(qs)
        self.aux = aux
        self.ntt = NTTTables(qs + aux, n)
        self.ntt_q = self.ntt.sub(range(len(qs)))
        self.ntt_p = self.ntt.sub(range(len(qs), len(qs) + len(aux)))
        self.q_to_p = ExtendTables(qs, aux)
        self.p_to_q = ExtendTables(aux, qs)
        QP = Q * P
        self.qs = _f(qs)
        self.ps = _f(aux)
        self.mods = _f(qs + aux)
        self.sr_hat_inv = _f(pow(QP // q, -1, q) for q in qs)
        self.sr_theta = np.array([((t * P) % q) / q for q in qs])
        self.sr_omega = np.array([[((t * P) // q) % p for p in aux] for q in qs], dtype=np.float64)
        self.sr_lam = _f(t * pow(Q, -1, p) % p for p in aux)

    def scale_round(self, d, out=None):
        if out is None:
            out = np.empty((len(self.aux), d.shape[1]))
        K.scale_round(d, self.kq, self.qs, self.sr_hat_inv, self.sr_theta, self.ps,
                      self.sr_omega, self.sr_lam, out)
        return out


class HEContext:
    """Precomputation shared by every operation on one parameter set."""

    def __init__(self, params: HEParams):
        self.params = params
        n = params.poly_degree
        self.n = n
        self.t = params.plain_modulus
        self.all_ntt = NTTTables(params.primes, n)  # data primes then special
        self.plain_ntt = NTTTables([self.t], n)
        k = params.max_level
        self.sp = float(params.special_prime)
        self.sp_inv = _f(pow(params.special_prime, -1, q) for q in params.data_primes)
        self._levels: dict[int, LevelTables] = {}
        self._mul: dict[int, MulTables] = {}
        self._ks: dict[int, NTTTables] = {}
        for lv in range(1, k + 1):
            self.level(lv)

    def level(self, lv: int) -> LevelTables:
        if lv not in self._levels:
            qs = list(self.params.data_primes[:lv])
            Q = math.prod(qs)
            t = self.t
            self._levels[lv] = LevelTables(
                lv, qs, Q, self.all_ntt.sub(range(lv)),
                _f((Q // t) % q for q in qs),
                _f(pow(Q // q, -1, q) for q in qs),
                np.array([t / q for q in qs]),
                _f(pow(qs[-1], -1, q) for q in qs[:-1]),
            )
        return self._levels[lv]

    def mul_tables(self, lv: int) -> MulTables:
        if lv not in self._mul:
            self._mul[lv] = MulTables(self, lv)
        return self._mul[lv]

    def ks_ntt(self, lv: int) -> NTTTables:
        """NTT tables for the key-switching base at level lv (data rows + special)."""
        if lv not in self._ks:
            self._ks[lv] = self.all_ntt.sub(list(range(lv)) + [self.params.max_level])
        return self._ks[lv]

    # plaintext slot transforms (mod t)
    def slots_to_poly(self, slots) -> np.ndarray:
        x = np.asarray(slots, dtype=np.float64).reshape(1, -1).copy()
        self.plain_ntt.inverse(x)
        return x[0]

    def poly_to_slots(self, poly) -> np.ndarray:
        x = np.asarray(poly, dtype=np.float64).reshape(1, -1).copy()
        self.plain_ntt.forward(x)
        return x[0]


@functools.lru_cache(maxsize=16)
def context(params: HEParams) -> HEContext:
    return HEContext(params)
