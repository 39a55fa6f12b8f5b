"""BFV over a full-RNS representation.

Multiplication follows the integer-free scale-and-round approach with an
auxiliary base P; relinearisation uses one key per data prime plus a
special prime.  Ciphertexts are immutable values that lazily cache their
alternate (coefficient / NTT / extended) forms.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher as _AES, algorithms, modes

from . import _kernels as K
from .params import HEContext, HEParams, context

SEED_BYTES = 32
CBD_ETA = 21  # centred binomial, sigma ~ 3.24


class HEError(Exception):
    """Misuse of the HE layer (mismatched parameters, wrong sizes, ...)."""


# --------------------------------------------------------------- randomness

class SeededStream:
    """AES-256-CTR keystream used to expand public seeds into uniform polynomials."""

    def __init__(self, seed: bytes):
        if len(seed) != SEED_BYTES:
            raise HEError("seed must be 32 bytes")
        self._enc = _AES(algorithms.AES(seed), modes.CTR(b"\0" * 16)).encryptor()

    def words(self, count: int) -> np.ndarray:
        return np.frombuffer(self._enc.update(b"\0" * (8 * count)), dtype=np.uint64)


def _uniform_rows(stream, moduli, n) -> np.ndarray:
    out = np.empty((len(moduli), n))
    for r, q in enumerate(moduli):
        q = int(q)
        mask = np.uint64((1 << q.bit_length()) - 1)
        got = []
        have = 0
        while have < n:
            w = stream.words(n - have + 16) & mask
            w = w[w < np.uint64(q)]
            got.append(w)
            have += len(w)
        out[r] = np.concatenate(got)[:n].astype(np.float64)
    return out


def _cbd(n: int) -> np.ndarray:
    raw = np.frombuffer(os.urandom(n * 6), dtype=np.uint8).reshape(n, 6)
    bits = np.unpackbits(raw, axis=1)[:, : 2 * CBD_ETA].astype(np.int64)
    return (bits[:, :CBD_ETA].sum(1) - bits[:, CBD_ETA:].sum(1)).astype(np.float64)


def _ternary(n: int) -> np.ndarray:
    out = np.empty(0, dtype=np.int64)
    while len(out) < n:
        b = np.frombuffer(os.urandom(2 * n), dtype=np.uint8)
        b = b[b < 255].astype(np.int64) % 3 - 1
        out = np.concatenate([out, b])
    return out[:n].astype(np.float64)


def _lift(ctx_ntt, v) -> np.ndarray:
    x = np.empty((len(ctx_ntt.p), len(v)))
    K.lift_signed(np.asarray(v, dtype=np.float64), ctx_ntt.p, x)
    return x


# --------------------------------------------------------------------- keys

@dataclass
class PublicKey:
    params: HEParams
    b: np.ndarray          # (k, N) NTT over data primes
    seed: bytes            # expands to a

    def a(self, ctx) -> np.ndarray:
        return _uniform_rows(SeededStream(self.seed), ctx.params.data_primes, ctx.n)


@dataclass
class RelinKeys:
    params: HEParams
    b: np.ndarray          # (k, k+1, N) NTT over data primes + special
    seeds: list

    def __post_init__(self):
        self._full = None

    def stacked(self, ctx) -> np.ndarray:
        """(k, 2, k+1, N) array consumed by the key-switching kernel."""
        if self._full is None:
            k = self.b.shape[0]
            full = np.empty((k, 2) + self.b.shape[1:])
            for i in range(k):
                full[i, 0] = self.b[i]
                full[i, 1] = _uniform_rows(SeededStream(self.seeds[i]), ctx.params.primes, ctx.n)
            self._full = full
        return self._full


@dataclass
class SecretKey:
    params: HEParams
    s: np.ndarray          # (N,) ternary coefficients
    s_ntt: np.ndarray      # (k+1, N)


@dataclass
class KeyMaterial:
    params: HEParams
    sk: SecretKey
    pk: PublicKey
    rk: RelinKeys


def _check(params, *objs):
    for o in objs:
        if o.params != params:
            raise HEError("object built for different HE parameters")


def keygen(params: HEParams) -> KeyMaterial:
    ctx = context(params)
    n = ctx.n
    k = params.max_level
    s = _ternary(n)
    s_ntt = ctx.all_ntt.forward(_lift(ctx.all_ntt, s))
    sk = SecretKey(params, s, s_ntt)
    dp = ctx.level(k).ntt
    seed = os.urandom(SEED_BYTES)
    a = _uniform_rows(SeededStream(seed), params.data_primes, n)
    b = dp.forward(_lift(dp, _cbd(n)))
    t = np.empty_like(b)
    K.pmul(a, s_ntt[:k], t, dp.p)
    K.psub(b, t, b, dp.p)
    pk = PublicKey(params, b, seed)
    # relinearisation keys for s^2
    s2 = np.empty_like(s_ntt)
    K.pmul(s_ntt, s_ntt, s2, ctx.all_ntt.p)
    sp = params.special_prime
    bs, seeds = [], []
    for i in range(k):
        sd = os.urandom(SEED_BYTES)
        a = _uniform_rows(SeededStream(sd), params.primes, n)
        e = ctx.all_ntt.forward(_lift(ctx.all_ntt, _cbd(n)))
        K.pmul(a, s_ntt, t2 := np.empty_like(a), ctx.all_ntt.p)
        K.psub(e, t2, e, ctx.all_ntt.p)
        q = params.data_primes[i]
        row = np.empty((1, n))
        K.pscale(s2[i:i + 1], np.array([float(sp % q)]), row, np.array([float(q)]))
        K.padd(e[i:i + 1], row, e[i:i + 1], np.array([float(q)]))
        bs.append(e)
        seeds.append(sd)
    rk = RelinKeys(params, np.stack(bs), seeds)
    return KeyMaterial(params, sk, pk, rk)


# --------------------------------------------------------------- plaintexts

class Plaintext:
    """Batched plaintext: slot vector mod t and its polynomial encoding."""

    def __init__(self, params: HEParams, slots=None, poly=None):
        self.params = params
        ctx = context(params)
        if poly is None:
            s = np.asarray(slots, dtype=np.int64) % params.plain_modulus
            if s.shape != (ctx.n,):
                raise HEError(f"plaintext needs exactly {ctx.n} slots")
            poly = ctx.slots_to_poly(s.astype(np.float64))
        self.poly = np.asarray(poly, dtype=np.float64)
        self._ntt = {}

    @property
    def is_zero(self) -> bool:
        return not self.poly.any()

    def slots(self) -> np.ndarray:
        return context(self.params).poly_to_slots(self.poly).astype(np.int64)

    def centered(self) -> np.ndarray:
        t = self.params.plain_modulus
        return np.where(self.poly > t // 2, self.poly - t, self.poly)

    def scaled_ext(self, level: int) -> np.ndarray:
        """floor(Q/t) * m over the Q|P base of `level`, NTT form."""
        key = ("ext", level)
        if key not in self._ntt:
            ctx = context(self.params)
            mt = ctx.mul_tables(level)
            Q = ctx.level(level).Q
            delta = Q // ctx.t
            m = np.empty((len(mt.mods), ctx.n))
            K.lift_signed(self.poly, mt.mods, m)
            K.pscale(m, np.array([float(delta % int(q)) for q in mt.mods]), m, mt.mods)
            corr = np.empty_like(m)
            K.lift_signed(_rounding_term(Q, ctx.t, self.poly), mt.mods, corr)
            K.padd(m, corr, m, mt.mods)
            if self.poly[1:].any():
                mt.ntt.forward(m)
            else:  # constant polynomial: every evaluation equals the constant
                m[:] = m[:, :1]
            self._ntt[key] = m
        return self._ntt[key]

    def ntt_at(self, level: int) -> np.ndarray:
        """Centred lift into the first `level` primes, NTT form."""
        if level not in self._ntt:
            tb = context(self.params).level(level).ntt
            self._ntt[level] = tb.forward(_lift(tb, self.centered()))
        return self._ntt[level]


def encode(params: HEParams, slots) -> Plaintext:
    return Plaintext(params, slots)


def decode(pt: Plaintext) -> np.ndarray:
    return pt.slots()


# -------------------------------------------------------------- ciphertexts

class Cipher:
    """A BFV ciphertext of `size` components over `level` data primes."""

    __slots__ = ("params", "_coeff", "_ntt", "_ext", "depth", "seed", "native_ntt")

    def __init__(self, params, data, is_ntt, depth=0, seed=None):
        self.params = params
        self._coeff = None if is_ntt else data
        self._ntt = data if is_ntt else None
        self.native_ntt = bool(is_ntt)  # form it was built in; caches may add the other
        self._ext = None
        self.depth = depth
        self.seed = seed  # set when component 1 is regenerable from a seed

    @property
    def size(self) -> int:
        d = self._ntt if self._ntt is not None else self._coeff
        return d.shape[0]

    @property
    def level(self) -> int:
        d = self._ntt if self._ntt is not None else self._coeff
        return d.shape[1]

    @property
    def is_ntt(self) -> bool:
        return self._ntt is not None

    def ntt_data(self) -> np.ndarray:
        if self._ntt is None:
            tb = context(self.params).level(self.level).ntt
            x = self._coeff.copy()
            for c in range(x.shape[0]):
                tb.forward(x[c])
            self._ntt = x
        return self._ntt

    def coeff_data(self) -> np.ndarray:
        if self._coeff is None:
            tb = context(self.params).level(self.level).ntt
            x = self._ntt.copy()
            for c in range(x.shape[0]):
                tb.inverse(x[c])
            self._coeff = x
        return self._coeff

    def ext_data(self) -> np.ndarray:
        """Components over Q|P in NTT form (for tensoring)."""
        if self._ext is None:
            mt = context(self.params).mul_tables(self.level)
            x = self.coeff_data()
            L = self.level
            out = np.empty((x.shape[0], L + len(mt.aux), x.shape[2]))
            for c in range(x.shape[0]):
                mt.q_to_p(x[c], out[c, L:])
                mt.ntt_p.forward(out[c, L:])
                if self._ntt is not None:
                    out[c, :L] = self._ntt[c]
                else:
                    out[c, :L] = x[c]
                    mt.ntt_q.forward(out[c, :L])
            self._ext = out
        return self._ext

    def byte_size(self) -> int:
        from .serialize import serialize_cipher
        return len(serialize_cipher(self))


def _new_like(a: Cipher, data, is_ntt, depth=None) -> Cipher:
    return Cipher(a.params, data, is_ntt, a.depth if depth is None else depth)


# ------------------------------------------------------------- encryption

def _rounding_term(Q: int, t: int, poly: np.ndarray) -> np.ndarray:
    """round((Q mod t) * m / t) for m in [0, t); exact in int64 (t < 2**25)."""
    r = Q % t
    m = poly.astype(np.int64)
    return ((r * m + t // 2) // t).astype(np.float64)


def _scaled_message(ctx: HEContext, pt: Plaintext, level: int) -> np.ndarray:
    """round(Q m / t) over the first `level` primes (coefficient form)."""
    lv = ctx.level(level)
    m = np.empty((level, ctx.n))
    K.lift_signed(pt.poly, lv.ntt.p, m)
    K.pscale(m, lv.delta, m, lv.ntt.p)
    corr = np.empty_like(m)
    K.lift_signed(_rounding_term(lv.Q, ctx.t, pt.poly), lv.ntt.p, corr)
    K.padd(m, corr, m, lv.ntt.p)
    return m


def encrypt(pk: PublicKey, pt: Plaintext) -> Cipher:
    """Public-key encryption; result in NTT form at the top level."""
    _check(pk.params, pt)
    ctx = context(pk.params)
    k = pk.params.max_level
    tb = ctx.level(k).ntt
    u = tb.forward(_lift(tb, _ternary(ctx.n)))
    a = pk.a(ctx)
    c0 = np.empty_like(u)
    c1 = np.empty_like(u)
    K.pmul(pk.b, u, c0, tb.p)
    K.pmul(a, u, c1, tb.p)
    e0 = _lift(tb, _cbd(ctx.n))
    K.padd(e0, _scaled_message(ctx, pt, k), e0, tb.p)
    K.padd(c0, tb.forward(e0), c0, tb.p)
    K.padd(c1, tb.forward(_lift(tb, _cbd(ctx.n))), c1, tb.p)
    return Cipher(pk.params, np.stack([c0, c1]), True)


def encrypt_symmetric(sk: SecretKey, pt: Plaintext, seed: bytes | None = None) -> Cipher:
    """Secret-key encryption whose second component expands from a seed."""
    _check(sk.params, pt)
    ctx = context(sk.params)
    k = sk.params.max_level
    tb = ctx.level(k).ntt
    seed = os.urandom(SEED_BYTES) if seed is None else seed
    a = _uniform_rows(SeededStream(seed), sk.params.data_primes, ctx.n)
    e = _lift(tb, _cbd(ctx.n))
    K.padd(e, _scaled_message(ctx, pt, k), e, tb.p)
    c0 = tb.forward(e)
    as_ = np.empty_like(a)
    K.pmul(a, sk.s_ntt[:k], as_, tb.p)
    K.psub(c0, as_, c0, tb.p)
    return Cipher(sk.params, np.stack([c0, a]), True, seed=seed)


def _phase(sk: SecretKey, ct: Cipher) -> np.ndarray:
    """[c0 + c1 s + c2 s^2 ...]_Q in coefficient form."""
    _check(sk.params, ct)
    ctx = context(sk.params)
    L = ct.level
    tb = ctx.level(L).ntt
    s = np.ascontiguousarray(sk.s_ntt[:L])
    d = ct.ntt_data()
    acc = d[ct.size - 1].copy()
    for c in range(ct.size - 2, -1, -1):  # Horner in s
        K.pmul(acc, s, acc, tb.p)
        K.padd(acc, d[c], acc, tb.p)
    return tb.inverse(acc)


def decrypt(sk: SecretKey, ct: Cipher) -> np.ndarray:
    """Decrypt to the slot vector (int64, values in [0, t))."""
    _check(sk.params, ct)
    ctx = context(sk.params)
    lv = ctx.level(ct.level)
    x = _phase(sk, ct)
    poly = K.decrypt_scale(x, lv.ntt.p, lv.dec_hat_inv, lv.dec_tq, float(ctx.t))
    return ctx.poly_to_slots(poly.astype(np.float64)).astype(np.int64)


def noise_budget(sk: SecretKey, ct: Cipher) -> int:
    """Invariant noise budget in bits, floored at zero."""
    _check(sk.params, ct)
    ctx = context(sk.params)
    lv = ctx.level(ct.level)
    x = _phase(sk, ct)
    Q = lv.Q
    acc = np.zeros(ctx.n, dtype=object)
    for i, q in enumerate(lv.qs):
        y = (x[i].astype(np.int64).astype(object) * int(lv.dec_hat_inv[i])) % q
        acc = acc + y * (Q // q)
    v = (acc * ctx.t) % Q
    v = np.where(v > Q // 2, Q - v, v)
    norm = int(v.max())
    return max(0, Q.bit_length() - norm.bit_length() - 1)


# --------------------------------------------------------------- arithmetic

def _same(a: Cipher, b: Cipher):
    if a.params != b.params:
        raise HEError("ciphertexts use different parameters")
    if a.level != b.level:
        raise HEError("ciphertexts are at different levels")


def _ext_binop(a: Cipher, b: Cipher, out: Cipher, fn):
    if a._ext is None or b._ext is None or a.size != b.size:
        return out
    mods = context(a.params).mul_tables(a.level).mods
    e = np.empty_like(a._ext)
    for c in range(a.size):
        fn(a._ext[c], b._ext[c], e[c], mods)
    out._ext = e
    return out


def _binop(a: Cipher, b: Cipher, fn) -> Cipher:
    _same(a, b)
    tb = context(a.params).level(a.level).ntt
    use_ntt = a.is_ntt and b.is_ntt
    da = a.ntt_data() if use_ntt else a.coeff_data()
    db = b.ntt_data() if use_ntt else b.coeff_data()
    n = max(a.size, b.size)
    out = np.empty((n,) + da.shape[1:])
    for c in range(n):
        if c < a.size and c < b.size:
            fn(da[c], db[c], out[c], tb.p)
        elif c < a.size:
            out[c] = da[c]
        else:
            fn(np.zeros_like(db[c]), db[c], out[c], tb.p)
    return _ext_binop(a, b, Cipher(a.params, out, use_ntt, max(a.depth, b.depth)), fn)


def add_ct(a: Cipher, b: Cipher) -> Cipher:
    return _binop(a, b, K.padd)


def sub_ct(a: Cipher, b: Cipher) -> Cipher:
    return _binop(a, b, K.psub)


def add_pt(a: Cipher, pt: Plaintext) -> Cipher:
    _check(a.params, pt)
    ctx = context(a.params)
    tb = ctx.level(a.level).ntt
    m = _scaled_message(ctx, pt, a.level)
    if a.is_ntt:
        tb.forward(m)
        d = a.ntt_data().copy()
    else:
        d = a.coeff_data().copy()
    K.padd(d[0], m, d[0], tb.p)
    out = _new_like(a, d, a.is_ntt)
    if a._ext is not None:
        e = a._ext.copy()
        mt = ctx.mul_tables(a.level)
        K.padd(e[0], pt.scaled_ext(a.level), e[0], mt.mods)
        out._ext = e
    return out


def mul_pt(a: Cipher, pt: Plaintext) -> Cipher:
    _check(a.params, pt)
    tb = context(a.params).level(a.level).ntt
    m = pt.ntt_at(a.level)
    d = a.ntt_data()
    out = np.empty_like(d)
    for c in range(a.size):
        K.pmul(d[c], m, out[c], tb.p)
    return _new_like(a, out, True)


def mul_scalar(a: Cipher, c: int) -> Cipher:
    """Multiply by an integer constant (interpreted mod t, centred)."""
    ctx = context(a.params)
    t = ctx.t
    c %= t
    if c > t // 2:
        c -= t
    lv = ctx.level(a.level)
    cv = np.array([float(c % q) for q in lv.qs])
    forms = {}
    for name in ("_ntt", "_coeff"):
        d = getattr(a, name)
        if d is not None:
            out = np.empty_like(d)
            for j in range(a.size):
                K.pscale(d[j], cv, out[j], lv.ntt.p)
            forms[name] = out
    use_ntt = "_ntt" in forms
    res = _new_like(a, forms["_ntt"] if use_ntt else forms["_coeff"], use_ntt)
    if use_ntt and "_coeff" in forms:
        res._coeff = forms["_coeff"]
    res.native_ntt = a.native_ntt
    # a scaled lift is no longer centred; past a few bits that inflates the
    # wrap-around term of a later product, so recompute it instead
    if a._ext is not None and abs(c) <= 1:
        mt = ctx.mul_tables(a.level)
        ce = np.array([float(c % int(q)) for q in mt.mods])
        e = np.empty_like(a._ext)
        for j in range(a.size):
            K.pscale(a._ext[j], ce, e[j], mt.mods)
        res._ext = e
    return res


def stack_ntt(cts) -> np.ndarray:
    """(J, 2, L, N) array of NTT-form components, input to inner_product_stacked."""
    return np.stack([c.ntt_data() for c in cts])


def inner_product_stacked(params, stacked, planes, active, depth=0) -> Cipher:
    """sum_j stacked[j] * planes[j] for NTT-form plaintext rows `planes` (J, L, N)."""
    L = stacked.shape[2]
    tb = context(params).level(L).ntt
    out = np.empty((2, L, stacked.shape[3]))
    K.mac_planes(stacked, planes, active, out, tb.p)
    return Cipher(params, out, True, depth)


def inner_product_plain(cts, pts) -> Cipher:
    """sum_j cts[j] * pts[j]; zero plaintexts are skipped."""
    cts = list(cts)
    for c in cts:
        _check(c.params, *pts)
    L = cts[0].level
    n = context(cts[0].params).n
    active = np.array([not p.is_zero for p in pts])
    planes = np.stack([p.ntt_at(L) if act else np.zeros((L, n)) for p, act in zip(pts, active)])
    return inner_product_stacked(cts[0].params, stack_ntt(cts), planes, active,
                                 max(c.depth for c in cts))


class TensorAccumulator:
    """Accumulates ciphertext products before one shared rescale."""

    def __init__(self, params: HEParams, level: int):
        self.params = params
        self.level = level
        self.ctx = context(params)
        self.mt = self.ctx.mul_tables(level)
        self.acc = None
        self.depth = 0
        self.count = 0

    def add_product(self, a: Cipher, b: Cipher):
        _same(a, b)
        if a.level != self.level or a.size != 2 or b.size != 2:
            raise HEError("tensoring needs two-component ciphertexts at the accumulator level")
        ea = a.ext_data()
        eb = ea if b is a else b.ext_data()
        p = self.mt.mods
        if self.acc is None:
            self.acc = np.zeros((3,) + ea.shape[1:])
        acc = self.acc
        K.pmul_acc(acc[0], ea[0], eb[0], p)
        K.pmul_acc(acc[2], ea[1], eb[1], p)
        if b is a:
            tmp = np.empty_like(ea[0])
            K.pmul(ea[0], ea[1], tmp, p)
            K.padd(tmp, tmp, tmp, p)
            K.padd(acc[1], tmp, acc[1], p)
        else:
            K.pmul_acc(acc[1], ea[0], eb[1], p)
            K.pmul_acc(acc[1], ea[1], eb[0], p)
        self.depth = max(self.depth, a.depth + 1, b.depth + 1)
        self.count += 1

    def finish(self, rk: RelinKeys | None = None) -> Cipher:
        if self.acc is None:
            raise HEError("empty accumulator")
        mt = self.mt
        L = self.level
        n = self.ctx.n
        out = np.empty((3, L, n))
        for c in range(3):
            d = self.acc[c]
            mt.ntt.inverse(d)
            z = mt.scale_round(d)
            mt.p_to_q(z, out[c])
        self.acc = None
        ct = Cipher(self.params, out, False, self.depth)
        return relinearize(ct, rk) if rk is not None else ct


def mul_ct(a: Cipher, b: Cipher, rk: RelinKeys | None = None) -> Cipher:
    """Ciphertext product; relinearised when keys are given."""
    acc = TensorAccumulator(a.params, a.level)
    acc.add_product(a, b)
    return acc.finish(rk)


def relinearize(ct: Cipher, rk: RelinKeys) -> Cipher:
    _check(ct.params, rk)
    if ct.size == 2:
        return ct
    if ct.size != 3:
        raise HEError("relinearisation supports three-component ciphertexts")
    ctx = context(ct.params)
    L = ct.level
    k = ct.params.max_level
    full = rk.stacked(ctx)
    keys = full if L == k else np.ascontiguousarray(full[:L][:, :, list(range(L)) + [k]])
    tb = ctx.ks_ntt(L)
    d = ct.coeff_data()
    acc = np.empty((2, L + 1, ctx.n))
    K.keyswitch(np.ascontiguousarray(d[2]), keys, tb.p, tb.w, tb.tw, acc)
    out = d[:2].copy()
    lv = ctx.level(L)
    for c in range(2):
        tb.inverse(acc[c])
        K.mod_down(acc[c], lv.ntt.p, ctx.sp, ctx.sp_inv[:L], out[c])
    return Cipher(ct.params, out, False, ct.depth)


def mod_switch_next(ct: Cipher) -> Cipher:
    """Drop the last data prime (rescaling the ciphertext)."""
    L = ct.level
    if L <= 1:
        raise HEError("already at the lowest level")
    ctx = context(ct.params)
    lv = ctx.level(L)
    d = ct.coeff_data()
    out = np.empty((ct.size, L - 1, ctx.n))
    for c in range(ct.size):
        K.drop_last(d[c], lv.ntt.p, lv.drop_inv, out[c])
    return Cipher(ct.params, out, False, ct.depth)


def mod_switch_to(ct: Cipher, level: int) -> Cipher:
    while ct.level > level:
        ct = mod_switch_next(ct)
    return ct
