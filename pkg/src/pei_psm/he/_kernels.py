"""Numba kernels for residue-number-system polynomial arithmetic.

Residues are stored as float64 holding exact integers below 2**50.  Modular
multiplication uses a fused multiply-add to recover the low half of the
product exactly, which keeps everything in vectorisable double arithmetic.
"""
import numba as nb
import numpy as np
from llvmlite import ir
from numba import types
from numba.extending import intrinsic

TAIL = 8  # last log2(TAIL) butterfly stages run on a transposed layout


@intrinsic
def _fma(typingctx, a, b, c):
    sig = types.float64(types.float64, types.float64, types.float64)

    def codegen(context, builder, signature, args):
        d = ir.DoubleType()
        fn = builder.module.declare_intrinsic("llvm.fma", [d], ir.FunctionType(d, [d, d, d]))
        return builder.call(fn, args)

    return sig, codegen


@nb.njit(inline="always")
def mm(a, b, p, pinv):
    h = a * b
    lo = _fma(a, b, -h)
    q = np.floor(h * pinv)
    r = _fma(-q, p, h) + lo
    r = r + p if r < 0.0 else r
    return r - p if r >= p else r


@nb.njit(inline="always")
def red(x, p):
    # exact reduction of an integer-valued double with |x| < 2**53
    r = x - p * np.floor(x / p)
    r = r + p if r < 0.0 else r
    return r - p if r >= p else r


@nb.njit(inline="always")
def _ct_s(lo, hi, w, p, pinv):
    for k in range(lo.shape[0]):
        x = lo[k]
        v = mm(hi[k], w, p, pinv)
        s = x + v
        d = x - v
        lo[k] = s - p if s >= p else s
        hi[k] = d + p if d < 0.0 else d


@nb.njit(inline="always")
def _ct_v(lo, hi, w, p, pinv):
    for k in range(lo.shape[0]):
        x = lo[k]
        v = mm(hi[k], w[k], p, pinv)
        s = x + v
        d = x - v
        lo[k] = s - p if s >= p else s
        hi[k] = d + p if d < 0.0 else d


@nb.njit(inline="always")
def _gs_s(lo, hi, w, p, pinv):
    for k in range(lo.shape[0]):
        x = lo[k]
        y = hi[k]
        s = x + y
        d = x - y
        d = d + p if d < 0.0 else d
        lo[k] = s - p if s >= p else s
        hi[k] = mm(d, w, p, pinv)


@nb.njit(inline="always")
def _gs_v(lo, hi, w, p, pinv):
    for k in range(lo.shape[0]):
        x = lo[k]
        y = hi[k]
        s = x + y
        d = x - y
        d = d + p if d < 0.0 else d
        lo[k] = s - p if s >= p else s
        hi[k] = mm(d, w[k], p, pinv)


@nb.njit(cache=True, nogil=True)
def ntt1(a, w, tw, p, tmp):
    """Forward negacyclic NTT of one residue row, in place.

    Output order is the bit-reversed order with the final TAIL-sized blocks
    transposed; all users only need a fixed, pointwise-consistent order.
    """
    n = a.shape[0]
    pinv = 1.0 / p
    t = n
    m = 1
    while t > TAIL:
        t >>= 1
        for i in range(m):
            j1 = 2 * i * t
            _ct_s(a[j1:j1 + t], a[j1 + t:j1 + 2 * t], w[m + i], p, pinv)
        m <<= 1
    blk = a.reshape((m, TAIL))
    T = tmp.reshape((TAIL, m))
    for k in range(TAIL):
        for i in range(m):
            T[k, i] = blk[i, k]
    for k in range(4):
        _ct_v(T[k], T[k + 4], tw[0, 0], p, pinv)
    for k in (0, 1, 4, 5):
        _ct_v(T[k], T[k + 2], tw[1, k // 4], p, pinv)
    for k in (0, 2, 4, 6):
        _ct_v(T[k], T[k + 1], tw[2, k // 2], p, pinv)
    a[:] = tmp


@nb.njit(cache=True, nogil=True)
def intt1(a, w, tw, p, ninv, tmp):
    n = a.shape[0]
    pinv = 1.0 / p
    m = n // TAIL
    T = a.reshape((TAIL, m))
    for k in (0, 2, 4, 6):
        _gs_v(T[k], T[k + 1], tw[2, k // 2], p, pinv)
    for k in (0, 1, 4, 5):
        _gs_v(T[k], T[k + 2], tw[1, k // 4], p, pinv)
    for k in range(4):
        _gs_v(T[k], T[k + 4], tw[0, 0], p, pinv)
    blk = tmp.reshape((m, TAIL))
    for i in range(m):
        for k in range(TAIL):
            blk[i, k] = T[k, i]
    a[:] = tmp
    t = TAIL
    while t < n // 2:
        h = n // (2 * t)
        for i in range(h):
            j1 = 2 * i * t
            _gs_s(a[j1:j1 + t], a[j1 + t:j1 + 2 * t], w[h + i], p, pinv)
        t <<= 1
    if t == n // 2:
        # last stage with the 1/n factor folded in
        wn = mm(w[1], ninv, p, pinv)
        for k in range(t):
            x = a[k]
            y = a[k + t]
            s = x + y
            s = s - p if s >= p else s
            d = x - y
            d = d + p if d < 0.0 else d
            a[k] = mm(s, ninv, p, pinv)
            a[k + t] = mm(d, wn, p, pinv)
    else:
        for k in range(n):
            a[k] = mm(a[k], ninv, p, pinv)


@nb.njit(cache=True, nogil=True)
def ntt(x, w, tw, p):
    """Forward NTT of every row of x (rows, N); row r uses modulus p[r]."""
    tmp = np.empty(x.shape[1])
    for r in range(x.shape[0]):
        ntt1(x[r], w[r], tw[r], p[r], tmp)


@nb.njit(cache=True, nogil=True)
def intt(x, w, tw, p, ninv):
    tmp = np.empty(x.shape[1])
    for r in range(x.shape[0]):
        intt1(x[r], w[r], tw[r], p[r], ninv[r], tmp)


# ---------------------------------------------------------------- pointwise

@nb.njit(cache=True, nogil=True)
def pmul(a, b, out, p):
    for r in range(a.shape[0]):
        q = p[r]
        qi = 1.0 / q
        for k in range(a.shape[1]):
            out[r, k] = mm(a[r, k], b[r, k], q, qi)


@nb.njit(cache=True, nogil=True)
def pmul_acc(acc, a, b, p):
    for r in range(a.shape[0]):
        q = p[r]
        qi = 1.0 / q
        for k in range(a.shape[1]):
            s = acc[r, k] + mm(a[r, k], b[r, k], q, qi)
            acc[r, k] = s - q if s >= q else s


@nb.njit(cache=True, nogil=True)
def padd(a, b, out, p):
    for r in range(a.shape[0]):
        q = p[r]
        for k in range(a.shape[1]):
            s = a[r, k] + b[r, k]
            out[r, k] = s - q if s >= q else s


@nb.njit(cache=True, nogil=True)
def psub(a, b, out, p):
    for r in range(a.shape[0]):
        q = p[r]
        for k in range(a.shape[1]):
            d = a[r, k] - b[r, k]
            out[r, k] = d + q if d < 0.0 else d


@nb.njit(cache=True, nogil=True)
def pscale(a, c, out, p):
    """out = a * c[r] per row, c[r] already reduced mod p[r]."""
    for r in range(a.shape[0]):
        q = p[r]
        qi = 1.0 / q
        cr = c[r]
        for k in range(a.shape[1]):
            out[r, k] = mm(a[r, k], cr, q, qi)


@nb.njit(cache=True, nogil=True)
def pscale_add(acc, a, c, p):
    """acc += a * c[r] per row."""
    for r in range(a.shape[0]):
        q = p[r]
        qi = 1.0 / q
        cr = c[r]
        for k in range(a.shape[1]):
            s = acc[r, k] + mm(a[r, k], cr, q, qi)
            acc[r, k] = s - q if s >= q else s


@nb.njit(cache=True, nogil=True)
def mac_planes(cts, planes, active, out, p):
    """out[c] = sum_j cts[j, c] * planes[j] over j with active[j].

    cts: (J, 2, L, N), planes: (J, L, N), out: (2, L, N).
    """
    L = out.shape[1]
    n = out.shape[2]
    out[:] = 0.0
    for j in range(cts.shape[0]):
        if not active[j]:
            continue
        for r in range(L):
            q = p[r]
            qi = 1.0 / q
            for c in range(2):
                for k in range(n):
                    s = out[c, r, k] + mm(cts[j, c, r, k], planes[j, r, k], q, qi)
                    out[c, r, k] = s - q if s >= q else s


@nb.njit(cache=True, nogil=True)
def lift_signed(v, p, out):
    """Reduce a vector of signed integers (|v| < 2**53) into every row."""
    for r in range(out.shape[0]):
        q = p[r]
        for k in range(v.shape[0]):
            out[r, k] = red(v[k], q)


# ------------------------------------------------------------ base changes

@nb.njit(cache=True, nogil=True)
def base_extend(x, qs, hat_inv, inv_f, ps, M, Qmod, out):
    """Exact centered lift of x (base qs) into base ps.

    x: (kin, N).  M[i, j] = (Q/q_i) mod p_j, Qmod[j] = Q mod p_j,
    hat_inv[i] = (Q/q_i)^-1 mod q_i, inv_f[i] = 1/q_i.
    """
    kin = x.shape[0]
    n = x.shape[1]
    ys = np.empty((kin, n))
    v = np.zeros(n)
    for i in range(kin):
        q = qs[i]
        qi = 1.0 / q
        hi = hat_inv[i]
        f = inv_f[i]
        for k in range(n):
            y = mm(x[i, k], hi, q, qi)
            ys[i, k] = y
            v[k] += y * f
    for k in range(n):
        v[k] = np.floor(v[k] + 0.5)
    for j in range(ps.shape[0]):
        pj = ps[j]
        pji = 1.0 / pj
        o = out[j]
        o[:] = 0.0
        for i in range(kin):
            mij = M[i, j]
            if qs[i] < pj:
                for k in range(n):
                    s = o[k] + mm(ys[i, k], mij, pj, pji)
                    o[k] = s - pj if s >= pj else s
            else:
                for k in range(n):
                    s = o[k] + mm(red(ys[i, k], pj), mij, pj, pji)
                    o[k] = s - pj if s >= pj else s
        qm = Qmod[j]
        for k in range(n):
            d = o[k] - mm(red(v[k], pj), qm, pj, pji)
            o[k] = d + pj if d < 0.0 else d


@nb.njit(cache=True, nogil=True)
def scale_round(d, kq, qs, hat_inv, theta, ps, omega, lam, out):
    """round(t * x / Q) for x given in base Q|P, written in base P.

    d: (kq + kp, N) residues of x over Q then P.
    hat_inv[i] = (QP/q_i)^-1 mod q_i, theta[i] = frac(t P / q_i),
    omega[i, j] = floor(t P / q_i) mod p_j, lam[j] = t Q^-1 mod p_j.
    """
    n = d.shape[1]
    ys = np.empty((kq, n))
    fr = np.zeros(n)
    for i in range(kq):
        q = qs[i]
        qi = 1.0 / q
        hi = hat_inv[i]
        th = theta[i]
        for k in range(n):
            y = mm(d[i, k], hi, q, qi)
            ys[i, k] = y
            fr[k] += y * th
    for k in range(n):
        fr[k] = np.floor(fr[k] + 0.5)
    for j in range(ps.shape[0]):
        pj = ps[j]
        pji = 1.0 / pj
        o = out[j]
        lj = lam[j]
        for k in range(n):
            o[k] = mm(d[kq + j, k], lj, pj, pji)
        for i in range(kq):
            w = omega[i, j]
            if qs[i] < pj:
                for k in range(n):
                    s = o[k] + mm(ys[i, k], w, pj, pji)
                    o[k] = s - pj if s >= pj else s
            else:
                for k in range(n):
                    s = o[k] + mm(red(ys[i, k], pj), w, pj, pji)
                    o[k] = s - pj if s >= pj else s
        for k in range(n):
            s = o[k] + red(fr[k], pj)
            o[k] = s - pj if s >= pj else s


@nb.njit(cache=True, nogil=True)
def drop_last(x, qs, inv_last, out):
    """out = round(x / q_last) over the remaining rows (x: (L, N), out: (L-1, N)).

    inv_last[r] = q_last^-1 mod qs[r].
    """
    L = x.shape[0]
    n = x.shape[1]
    ql = qs[L - 1]
    half = np.floor(ql / 2.0)
    for r in range(L - 1):
        q = qs[r]
        qi = 1.0 / q
        il = inv_last[r]
        for k in range(n):
            c = x[L - 1, k]
            c = c - ql if c > half else c
            d = x[r, k] - red(c, q)
            d = d + q if d < 0.0 else d
            out[r, k] = mm(d, il, q, qi)


@nb.njit(cache=True, nogil=True)
def decrypt_scale(x, qs, hat_inv, tq, t):
    """round(t * x / Q) mod t for x in base qs (coefficient form).

    tq[i] = t / q_i as a double.
    """
    n = x.shape[1]
    out = np.zeros(n)
    for i in range(x.shape[0]):
        q = qs[i]
        qi = 1.0 / q
        hi = hat_inv[i]
        f = tq[i]
        for k in range(n):
            out[k] += mm(x[i, k], hi, q, qi) * f
    res = np.empty(n, dtype=np.int64)
    for k in range(n):
        v = np.floor(out[k] + 0.5)
        res[k] = np.int64(red(v, t))
    return res


# ---------------------------------------------------------- key switching

@nb.njit(cache=True, nogil=True)
def keyswitch(d2, keys, mods, w, tw, acc):
    """acc (2, L+1, N) = sum_i NTT(lift(d2[i])) * keys[i], NTT domain.

    d2: (L, N) coefficient form over the first L moduli of mods (mods has L+1
    rows, last one special).  keys: (>=L, 2, L+1, N) indexed by data limb.
    """
    L = d2.shape[0]
    n = d2.shape[1]
    tmp = np.empty(n)
    buf = np.empty(n)
    acc[:] = 0.0
    nm = L + 1
    for i in range(L):
        for r in range(nm):
            q = mods[r]
            qi = 1.0 / q
            for k in range(n):
                buf[k] = red(d2[i, k], q)
            ntt1(buf, w[r], tw[r], q, tmp)
            for c in range(2):
                kk = keys[i, c, r]
                a = acc[c, r]
                for k in range(n):
                    s = a[k] + mm(buf[k], kk[k], q, qi)
                    a[k] = s - q if s >= q else s


@nb.njit(cache=True, nogil=True)
def mod_down(x, qs, sp, sp_inv, out):
    """out[r] += (x[r] - [x_sp]) * sp^-1 for the data rows; x: (L+1, N)."""
    L = x.shape[0] - 1
    n = x.shape[1]
    half = np.floor(sp / 2.0)
    for r in range(L):
        q = qs[r]
        qi = 1.0 / q
        si = sp_inv[r]
        for k in range(n):
            c = x[L, k]
            c = c - sp if c > half else c
            d = x[r, k] - red(c, q)
            d = d + q if d < 0.0 else d
            s = out[r, k] + mm(d, si, q, qi)
            out[r, k] = s - q if s >= q else s


# ----------------------------------------------------------- serialization

@nb.njit(cache=True)
def pack_bits(vals, bits, out):
    """Pack non-negative integers (< 2**bits, bits <= 56) little-endian."""
    acc = np.uint64(0)
    nb_ = 0
    pos = 0
    mask8 = np.uint64(255)
    for k in range(vals.shape[0]):
        v = np.uint64(vals[k])
        acc |= v << np.uint64(nb_)
        nb_ += bits
        while nb_ >= 8:
            out[pos] = np.uint8(acc & mask8)
            pos += 1
            acc >>= np.uint64(8)
            nb_ -= 8
    if nb_ > 0:
        out[pos] = np.uint8(acc & mask8)
        pos += 1
    return pos


@nb.njit(cache=True)
def unpack_bits(buf, bits, n, out):
    acc = np.uint64(0)
    nb_ = 0
    pos = 0
    mask = (np.uint64(1) << np.uint64(bits)) - np.uint64(1)
    for k in range(n):
        while nb_ < bits:
            acc |= np.uint64(buf[pos]) << np.uint64(nb_)
            pos += 1
            nb_ += 8
        out[k] = np.float64(acc & mask)
        acc >>= np.uint64(bits)
        nb_ -= bits
    return pos
