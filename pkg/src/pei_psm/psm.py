"""Encrypted membership evaluation, two-layer masking, aggregation and demasking."""
from __future__ import annotations

import enum
import functools
import math
import os
import threading
from dataclasses import dataclass, field

import numpy as np

from . import he
from .he import _kernels as K
from .encoding import PEI, CWCParams, PBHParams, encode_cwc, pbh_map, pei_to_int
from .registry import EncodedList, ListKind


class Outcome(enum.Enum):
    MATCH = "Match"
    NO_MATCH = "NoMatch"
    PROTOCOL_DEVIATION = "ProtocolDeviation"


class Decision(enum.Enum):
    NOT_LISTED = "NotListed"
    LISTED_BLACKLIST = "Listed(Blacklist)"
    LISTED_GREYLIST = "Listed(Greylist)"
    NON_EVALUABLE = "NonEvaluable"

    @property
    def listed_kind(self) -> ListKind | None:
        return {Decision.LISTED_BLACKLIST: ListKind.BLACKLIST,
                Decision.LISTED_GREYLIST: ListKind.GREYLIST}.get(self)

    @property
    def exit_code(self) -> int:
        return {Decision.NOT_LISTED: 0, Decision.NON_EVALUABLE: 3}.get(self, 2)


# ------------------------------------------------------------------- query

@dataclass
class QueryCiphertexts:
    bits: list  # l Ciphers
    _stacked: np.ndarray | None = field(default=None, repr=False)

    @property
    def params(self) -> he.HEParams:
        return self.bits[0].params

    def stacked(self) -> np.ndarray:
        if self._stacked is None:
            self._stacked = he.stack_ntt(self.bits)
        return self._stacked


def one_hot_plain(params: he.HEParams, slot: int) -> he.Plaintext:
    v = np.zeros(params.poly_degree, dtype=np.int64)
    v[slot] = 1
    return he.Plaintext(params, v)


def build_query(p: PEI | str | int, keys: he.KeyMaterial, pp: PBHParams, cp: CWCParams) -> QueryCiphertexts:
    """Encrypt bit j of the codeword in the identifier's slot, one ciphertext per bit."""
    x = pei_to_int(p) if not isinstance(p, int) else p
    params = keys.params
    if pp.N != params.poly_degree:
        raise ValueError("PBH slot count must equal the ring degree")
    slot, res = pbh_map(x, pp)
    cw = encode_cwc(res, cp)
    one = one_hot_plain(params, slot)
    zero = he.Plaintext(params, poly=np.zeros(params.poly_degree))
    return QueryCiphertexts([he.encrypt_symmetric(keys.sk, one if b else zero) for b in cw])


# ------------------------------------------------------------ server lists

class PreparedList:
    """HE-ready bit-planes: per row an (l, L, N) array of NTT-form plaintexts.

    Rows are immutable once published; refresh() returns a new object that
    shares unchanged rows, so in-flight evaluations keep a consistent view.
    """

    def __init__(self, params: he.HEParams, rows, active, versions, kind=None):
        self.params = params
        self.rows = rows
        self.active = active
        self.versions = versions
        self.kind = kind

    @property
    def n_rows(self) -> int:
        return len(self.rows)


def _plane_tables(params, l):
    ctx = he.context(params)
    key = ("planes", l)
    cache = ctx.__dict__.setdefault("_psm_cache", {})
    if key not in cache:
        L = params.max_level
        cache[key] = (ctx.plain_ntt.sub([0] * l), [ctx.level(L).ntt.sub([r] * l) for r in range(L)])
    return cache[key]


def encode_row(params: he.HEParams, bits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(l, N) 0/1 planes -> ((l, L, N) NTT plaintexts, (l,) active mask)."""
    l, n = bits.shape
    L = params.max_level
    t = float(params.plain_modulus)
    tt, per_limb = _plane_tables(params, l)
    active = bits.any(axis=1)
    poly = bits.astype(np.float64)
    tt.inverse(poly)
    neg = poly > t // 2
    out = np.empty((l, L, n))
    for r in range(L):
        q = per_limb[r].p[0]
        x = np.where(neg, poly - t + q, poly)
        per_limb[r].forward(x)
        out[:, r, :] = x
    return out, active


def prepare_list(el: EncodedList, params: he.HEParams, previous: PreparedList | None = None,
                 kind=None) -> PreparedList:
    el.refresh()
    rows, active = [], []
    for r in range(el.rows):
        reuse = (previous is not None and r < previous.n_rows and previous.versions[r] == el.row_versions[r]
                 and previous.params == params)
        if reuse:
            rows.append(previous.rows[r])
            active.append(previous.active[r])
        else:
            a, m = encode_row(params, el.planes[r])
            rows.append(a)
            active.append(m)
    return PreparedList(params, rows, active, el.row_versions.copy(), kind)


# ----------------------------------------------------------- equality poly

def _falling_coeffs(h: int) -> list[int]:
    """Coefficients (low to high) of prod_{k<h} (x - k)."""
    c = [1]
    for k in range(h):
        nxt = [0] * (len(c) + 1)
        for i, a in enumerate(c):
            nxt[i + 1] += a
            nxt[i] -= k * a
        c = nxt
    return c


def _poly_mul(a, b):
    out = [0] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i + j] += x * y
    return out


def indicator_plan(h: int):
    """(fold, coeffs): with fold the polynomial is in u = x^2 - (h-1) x."""
    if h >= 2 and h % 2 == 0:
        c = [1]
        for k in range(h // 2):
            c = _poly_mul(c, [k * (h - 1 - k), 1])
        return True, c
    return False, _falling_coeffs(h)


class _Evaluator:
    """Evaluates a polynomial in one ciphertext at depth ceil(log2 deg).

    Values are triples (cipher or None, constant, [deferred products]); only
    the outermost product is deferred so callers can accumulate it.
    """

    def __init__(self, params, rk, x):
        self.params = params
        self.rk = rk
        self.t = params.plain_modulus
        x.ext_data()
        self.pow = {1: x}

    def power(self, k: int):
        if k not in self.pow:
            half = self.power(k // 2)
            p = he.mul_ct(half, half, self.rk)
            p.ext_data()
            self.pow[k] = p
        return self.pow[k]

    def const_plain(self, c: int) -> he.Plaintext:
        poly = np.zeros(self.params.poly_degree)
        poly[0] = c % self.t
        return he.Plaintext(self.params, poly=poly)

    def scaled(self, k: int, c: int):
        c %= self.t
        if not c:
            return None
        x = self.power(k)
        return x if c == 1 else he.mul_scalar(x, c)

    @staticmethod
    def add(a, b):
        if a is None:
            return b
        return a if b is None else he.add_ct(a, b)

    def materialize(self, v):
        lin, c0, pairs = v
        for a, b in pairs:
            lin = self.add(lin, he.mul_ct(a, b, self.rk))
        if c0 % self.t:
            if lin is None:
                return None
            lin = he.add_pt(lin, self.const_plain(c0))
        return lin

    def eval(self, coeffs, top: bool):
        coeffs = [c % self.t for c in coeffs]
        while len(coeffs) > 1 and coeffs[-1] == 0:
            coeffs.pop()
        d = len(coeffs) - 1
        if d <= 1:
            return (self.scaled(1, coeffs[1]) if d else None, coeffs[0], [])
        if d == 2:
            if top:
                return (self.scaled(1, coeffs[1]), coeffs[0], [(self.scaled(1, coeffs[2]), self.power(1))])
            return (self.add(self.scaled(1, coeffs[1]), self.scaled(2, coeffs[2])), coeffs[0], [])
        g = 1
        while 2 * g < d:
            g *= 2
        lin, c0, _ = self.eval(coeffs[:g], False)
        hv = self.eval(coeffs[g:], False)
        xg = self.power(g)
        if hv[0] is None:  # high part is a constant
            lin = self.add(lin, self.scaled(g, hv[1]))
            return (lin, c0, [])
        hi = self.materialize(hv)
        v = (lin, c0, [(xg, hi)])
        return v if top else (self.materialize(v), 0, [])


def equality_parts(ip: he.Cipher, h: int, rk: he.RelinKeys):
    """prod_{k<h} (IP - k) as (linear cipher or None, constant, deferred products)."""
    fold, coeffs = indicator_plan(h)
    x = ip
    if fold:
        sq = he.mul_ct(ip, ip, rk)
        x = he.sub_ct(sq, he.mul_scalar(ip, h - 1)) if h > 1 else sq
    return _Evaluator(ip.params, rk, x).eval(coeffs, True)


@functools.lru_cache(maxsize=8)
def _small_inverses(t: int, count: int) -> np.ndarray:
    inv = np.array([pow(c, -1, t) for c in range(1, count + 1)], dtype=np.int64)
    inv.flags.writeable = False
    return inv


def split_scalar(T: int, t: int, search: int = 1 << 13) -> tuple[int, int]:
    """Factor T = c1 * c2 (mod t) with c1 + |c2| small, as centered residues.

    Noise from scaling is additive across the two factors of a product, so two
    factors near sqrt(t) cost far fewer bits than one scalar near t.  Such a
    pair exists by counting; we scan c1 directly.
    """
    T %= t
    if T == 0:
        return 0, 0
    inv = _small_inverses(t, min(search, t - 1))
    c1 = np.arange(1, len(inv) + 1, dtype=np.int64)
    c2 = (inv * T) % t  # t < 2**25 keeps this exact in int64
    c2 = np.where(c2 > t // 2, c2 - t, c2)
    k = int(np.argmin(c1 + np.abs(c2)))
    return int(c1[k]), int(c2[k]) % t


def combine(params, parts_lin, parts_const, pairs, scale: int, rk) -> he.Cipher | None:
    """scale * (lin + const + sum of pairs), splitting `scale` across each pair."""
    t = params.plain_modulus
    L = params.max_level
    out = None
    if pairs:
        c1, c2 = split_scalar(scale, t)
        acc = he.TensorAccumulator(params, L)
        for a, b in pairs:
            acc.add_product(he.mul_scalar(a, c1), he.mul_scalar(b, c2))
        out = acc.finish(rk)
    if parts_lin is not None:
        out = _Evaluator.add(out, he.mul_scalar(parts_lin, scale))
    if parts_const * scale % t:
        poly = np.zeros(params.poly_degree)
        poly[0] = parts_const * scale % t
        if out is None:
            out = he.Cipher(params, np.zeros((2, L, params.poly_degree)), False)
        out = he.add_pt(out, he.Plaintext(params, poly=poly))
    return out


def eval_equality_row(q: QueryCiphertexts, row_planes, cp: CWCParams, rk: he.RelinKeys) -> he.Cipher:
    """0/1 per slot: 1 iff the query codeword equals this row's codeword there.

    row_planes: (l, N) 0/1 array of the row's bit-planes.
    """
    params = q.params
    planes, active = encode_row(params, np.asarray(row_planes, dtype=np.uint8))
    ip = he.inner_product_stacked(params, q.stacked(), planes, active)
    lin, c0, pairs = equality_parts(ip, cp.h, rk)
    inv = pow(math.factorial(cp.h), -1, params.plain_modulus)
    out = combine(params, lin, c0, pairs, inv, rk)
    if out is None:
        out = he.Cipher(params, np.zeros((2, ip.level, params.poly_degree)), False)
    return out


# ------------------------------------------------------------------ masks

@dataclass
class MaskingState:
    t: int
    r1: int
    r2: np.ndarray
    full_range: bool = False

    @property
    def R2(self) -> int:
        return int(self.r2.sum() % self.t)

    @property
    def t_eff(self) -> int:
        return t_eff(self.t)


def t_eff(t: int) -> int:
    return t // 2 - 1


def _uniform_below(bound: int, count: int, rng=None) -> np.ndarray:
    """Unbiased integers in [0, bound) by rejection; CSPRNG unless rng given."""
    if rng is not None:
        return rng.integers(0, bound, count, dtype=np.int64)
    bits = max(1, (bound - 1).bit_length())
    mask = np.uint64((1 << bits) - 1)
    out = np.empty(0, dtype=np.uint64)
    while out.size < count:
        need = count - out.size
        w = np.frombuffer(os.urandom(8 * (need + need // 4 + 8)), dtype=np.uint64) & mask
        out = np.concatenate([out, w[w < np.uint64(bound)]])
    return out[:count].astype(np.int64)


def sample_masks(t: int, N: int, rng=None, full_range: bool = False) -> MaskingState:
    """r1 in [1, t//2 - 1] and r2_i in [0, t//2 - 1] (bounded), or full range mod t."""
    if full_range:
        r1 = 1 + int(_uniform_below(t - 1, 1, rng)[0])
        r2 = _uniform_below(t, N, rng)
    else:
        half = t // 2
        r1 = 1 + int(_uniform_below(half - 1, 1, rng)[0])
        r2 = _uniform_below(half, N, rng)
    return MaskingState(t, r1, r2, full_range)


# --------------------------------------------------------------- evaluate

@dataclass
class MaskedResult:
    ct_res: he.Cipher


def psi_sum(q: QueryCiphertexts, lst, ms: MaskingState, rk: he.RelinKeys, cp: CWCParams,
            response_level: int = 1) -> MaskedResult:
    """r1 * sum_rows indicator + r2, switched down to `response_level` primes."""
    params = q.params
    if ms.t != params.plain_modulus:
        raise ValueError("masking state built for a different plaintext modulus")
    if isinstance(lst, EncodedList):
        lst = prepare_list(lst, params)
    if lst.params != params:
        raise he.HEError("list prepared under different HE parameters")
    L = params.max_level
    C = q.stacked()
    lin_total, const_total, pairs = None, 0, []
    for planes, active in zip(lst.rows, lst.active):
        ip = he.inner_product_stacked(params, C, planes, active)
        lin, c0, pr = equality_parts(ip, cp.h, rk)
        lin_total = _Evaluator.add(lin_total, lin)
        const_total += c0
        pairs += pr
    scale = ms.r1 * pow(math.factorial(cp.h), -1, params.plain_modulus) % params.plain_modulus
    total = combine(params, lin_total, const_total, pairs, scale, rk)
    if total is None:  # empty list: a trivial encryption of zero
        total = he.Cipher(params, np.zeros((2, L, params.poly_degree)), False)
    res = he.add_pt(total, he.Plaintext(params, ms.r2))
    return MaskedResult(he.mod_switch_to(res, max(1, min(response_level, L))))


# ------------------------------------------------------------------ client

def client_aggregate(y, t: int) -> int:
    """pt_sum = sum_i y_i mod t in 64-bit arithmetic."""
    y = np.asarray(y, dtype=np.uint64)
    return int(y.sum(dtype=np.uint64) % np.uint64(t))


def slot_sum_bytes(s: int) -> bytes:
    return int(s).to_bytes(8, "little")


def demask(pt_sum: int, ms: MaskingState) -> Outcome:
    d = (int(pt_sum) - ms.R2) % ms.t
    if d == ms.r1 % ms.t:
        return Outcome.MATCH
    if d == 0:
        return Outcome.NO_MATCH
    return Outcome.PROTOCOL_DEVIATION


def decide(b: Outcome, g: Outcome) -> Decision:
    if Outcome.PROTOCOL_DEVIATION in (b, g):
        return Decision.NON_EVALUABLE
    if b is Outcome.MATCH:
        return Decision.LISTED_BLACKLIST
    if g is Outcome.MATCH:
        return Decision.LISTED_GREYLIST
    return Decision.NOT_LISTED


def forgery_success_bound(t: int, attempts: int) -> float:
    if attempts < 0:
        raise ValueError("attempts must be non-negative")
    return min(1.0, attempts / t_eff(t))
