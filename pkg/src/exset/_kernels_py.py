"""Pure numpy implementation of the orthant-probability kernels.

Mirrors ``exset._kernels`` function for function; used when the compiled
extension is unavailable or ``EXSET_PURE_PYTHON=1`` is set.
"""
import numpy as np
from scipy.special import ndtr, ndtri

_GL = {n: np.polynomial.legendre.leggauss(n) for n in (6, 12, 20)}


def _gl_rule(absr):
    # nodes mapped to (0, 2) as in Genz's bvnu
    x6, w6 = _GL[6]
    x12, w12 = _GL[12]
    x20, w20 = _GL[20]
    out_x = np.where(absr[:, None] < 0.3, np.pad(x6, (0, 14)), 0.0)
    out_w = np.where(absr[:, None] < 0.3, np.pad(w6, (0, 14)), 0.0)
    mid = (absr >= 0.3) & (absr < 0.75)
    out_x[mid] = np.pad(x12, (0, 8))
    out_w[mid] = np.pad(w12, (0, 8))
    hi = absr >= 0.75
    out_x[hi] = x20
    out_w[hi] = w20
    return 1.0 + out_x, out_w


def _bvnu(dh, dk, r):
    """Vectorised upper orthant P(X > dh, Y > dk); finite inputs, r != 0."""
    xs_, ws = _gl_rule(np.abs(r))
    out = np.zeros_like(dh)
    low = np.abs(r) < 0.925
    if low.any():
        h, k, rr = dh[low], dk[low], r[low]
        hk = (h * k)[:, None]
        hs = ((h * h + k * k) / 2.0)[:, None]
        asr = (np.arcsin(rr) / 2.0)[:, None]
        sn = np.sin(asr * xs_[low])
        val = (ws[low] * np.exp((sn * hk - hs) / (1.0 - sn * sn))).sum(axis=1)
        out[low] = val * asr[:, 0] / (2 * np.pi) + ndtr(-h) * ndtr(-k)
    high = ~low
    if high.any():
        h, k, rr = dh[high], dk[high].copy(), r[high]
        neg = rr < 0
        k[neg] = -k[neg]
        hk = h * k
        bvn = np.zeros_like(h)
        inner = np.abs(rr) < 1.0
        if inner.any():
            hi, ki, hki, ri = h[inner], k[inner], hk[inner], rr[inner]
            as_ = 1.0 - ri * ri
            a = np.sqrt(as_)
            bs = (hi - ki) ** 2
            asr = -(bs / as_ + hki) / 2.0
            c = (4.0 - hki) / 8.0
            d = (12.0 - hki) / 80.0
            b1 = np.where(
                asr > -100.0,
                a * np.exp(asr) * (1.0 - c * (bs - as_) * (1.0 - d * bs) / 3.0 + c * d * as_ * as_),
                0.0,
            )
            b = np.sqrt(bs)
            sp = np.sqrt(2 * np.pi) * ndtr(-b / a)
            b1 = np.where(
                hki > -100.0,
                b1 - np.exp(-hki / 2.0) * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0),
                b1,
            )
            a2 = (a / 2.0)[:, None]
            xs = (a2 * xs_[high][inner]) ** 2
            asr2 = -(bs[:, None] / xs + hki[:, None]) / 2.0
            ok = asr2 > -100.0
            rs = np.sqrt(1.0 - xs)
            ep = np.exp(-(hki[:, None] / 2.0) * xs / (1.0 + rs) ** 2) / rs
            spx = 1.0 + c[:, None] * xs * (1.0 + 5.0 * d[:, None] * xs)
            terms = np.where(ok, np.exp(np.where(ok, asr2, 0.0)) * (spx - ep), 0.0)
            bvn[inner] = (a2[:, 0] * (ws[high][inner] * terms).sum(axis=1) - b1) / (2 * np.pi)
        pos = rr > 0
        res = np.empty_like(h)
        res[pos] = bvn[pos] + ndtr(-np.maximum(h[pos], k[pos]))
        n1 = (~pos) & (h >= k)
        res[n1] = -bvn[n1]
        n2 = (~pos) & (h < k)
        lneg = np.where(h < 0, ndtr(k) - ndtr(h), ndtr(-h) - ndtr(-k))
        res[n2] = lneg[n2] - bvn[n2]
        out[high] = res
    return np.clip(out, 0.0, 1.0)


def bvn_lower(h, k, r):
    """Lower orthant P(X <= h, Y <= k) elementwise for standard margins."""
    h = np.asarray(h, dtype=float)
    k = np.asarray(k, dtype=float)
    r = np.asarray(r, dtype=float)
    dh, dk = -h, -k
    out = np.empty_like(dh)
    inf_any = np.isinf(dh) | np.isinf(dk)
    zero = (r == 0.0) & ~inf_any
    out[zero] = ndtr(h[zero]) * ndtr(k[zero])
    if inf_any.any():
        hh, kk = h[inf_any], k[inf_any]
        val = np.where(np.isposinf(hh), ndtr(kk), np.where(np.isposinf(kk), ndtr(hh), 0.0))
        out[inf_any] = val
    rest = ~(zero | inf_any)
    if rest.any():
        out[rest] = _bvnu(dh[rest], dk[rest], r[rest])
    return out


def _prepare(cov, upper):
    """Vectorised reordered Cholesky with truncated-mean prioritisation."""
    n_inst, d, _ = cov.shape
    C = cov.copy()
    b = upper.copy()
    L = np.zeros_like(C)
    y = np.zeros((n_inst, d))
    trace = np.trace(cov, axis1=1, axis2=2)
    tol_deg = 1e-14 * trace
    tol_neg = 1e-10 * trace
    bad = np.zeros(n_inst, dtype=bool)
    rows = np.arange(n_inst)
    for i in range(d):
        Lp = L[:, i:, :i]
        v = np.diagonal(C, axis1=1, axis2=2)[:, i:] - (Lp * Lp).sum(axis=2)
        s = (Lp * y[:, None, :i]).sum(axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.where(
                v > tol_deg[:, None],
                ndtr((b[:, i:] - s) / np.sqrt(np.maximum(v, tol_deg[:, None] + 1e-300))),
                np.where(b[:, i:] - s >= 0.0, 1.0, 0.0),
            )
        best = i + np.argmin(val, axis=1)
        perm = np.tile(np.arange(d), (n_inst, 1))
        perm[rows, i] = best
        perm[rows, best] = i
        b = np.take_along_axis(b, perm, axis=1)
        C = np.take_along_axis(C, perm[:, :, None], axis=1)
        C = np.take_along_axis(C, perm[:, None, :], axis=2)
        L = np.take_along_axis(L, perm[:, :, None], axis=1)
        v = C[:, i, i] - (L[:, i, :i] ** 2).sum(axis=1)
        s = (L[:, i, :i] * y[:, :i]).sum(axis=1)
        bad |= v < -tol_neg
        good = v > tol_deg
        piv = np.where(good, np.sqrt(np.where(good, v, 1.0)), 0.0)
        L[:, i, i] = piv
        if i + 1 < d:
            col = C[:, i + 1:, i] - (L[:, i + 1:, :i] * L[:, i, None, :i]).sum(axis=2)
            with np.errstate(divide="ignore", invalid="ignore"):
                L[:, i + 1:, i] = np.where(good[:, None], col / np.where(good, piv, 1.0)[:, None], 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(good, (b[:, i] - s) / np.where(good, piv, 1.0), np.inf)
            cz = ndtr(z)
            tm = np.where(
                np.isinf(z) | (cz < 1e-300),
                np.where(np.isposinf(z), 0.0, np.where(np.isinf(z), 0.0, z)),
                -np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi) / np.where(cz > 0, cz, 1.0),
            )
        y[:, i] = np.where(good, tm, 0.0)
    return L, b, bad


def orthant_qmc(cov, upper, alpha, shifts, n_points):
    """Batched lattice-rule estimates of ``P(X <= upper[i])``, X ~ N(0, cov[i])."""
    cov = np.ascontiguousarray(cov, dtype=float)
    upper = np.ascontiguousarray(upper, dtype=float)
    n_inst, d, _ = cov.shape
    L, b, bad = _prepare(cov, upper)
    n_shift = shifts.shape[0]
    diag = np.diagonal(L, axis1=1, axis2=2)
    pts = np.arange(n_points, dtype=float)
    ests = np.zeros((n_shift, n_inst))
    for r in range(n_shift):
        prod = np.ones((n_inst, n_points))
        ys = np.zeros((n_inst, d, n_points))
        for i in range(d):
            s = np.einsum("bk,bkn->bn", L[:, i, :i], ys[:, :i, :]) if i > 0 else 0.0
            piv = diag[:, i][:, None]
            with np.errstate(divide="ignore", invalid="ignore"):
                c = np.where(
                    piv > 0,
                    ndtr((b[:, i][:, None] - s) / np.where(piv > 0, piv, 1.0)),
                    (b[:, i][:, None] - s >= -1e-12 * (np.abs(s) + 1.0)).astype(float),
                )
            prod *= c
            if i < d - 1:
                u = pts * alpha[i] + shifts[r, i]
                u = np.abs(2.0 * (u - np.floor(u)) - 1.0)[None, :] * c
                u = np.clip(u, 1e-300, 1.0 - 1e-16)
                ys[:, i, :] = np.where(piv > 0, ndtri(u), 0.0)
        ests[r] = prod.mean(axis=1)
    prob = ests.mean(axis=0)
    err = ests.std(axis=0, ddof=1) / np.sqrt(n_shift) if n_shift > 1 else np.zeros(n_inst)
    prob[bad] = 0.0
    err[bad] = 0.0
    return prob, err, bad.astype(np.int32)
