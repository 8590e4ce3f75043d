# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for Gaussian orthant probabilities.

Two entry points, mirrored one-to-one by ``_kernels_py``:

``bvn_lower``
    Bivariate normal lower-orthant probability (Drezner-Wesolowsky with
    Genz's double precision refinements).
``orthant_qmc``
    Batched randomized-lattice estimate of ``P(X <= b)`` for many small
    covariance matrices, using Genz's separation of variables with
    univariate variable prioritisation.
"""
import numpy as np

from libc.math cimport asin, exp, fabs, sin, sqrt, M_PI, INFINITY, isinf, floor
from libc.stdlib cimport malloc, free
from scipy.special.cython_special cimport ndtr, ndtri

# Gauss-Legendre half rules (6, 12 and 20 points).
cdef double GL_W6[3]
cdef double GL_X6[3]
cdef double GL_W12[6]
cdef double GL_X12[6]
cdef double GL_W20[10]
cdef double GL_X20[10]

GL_W6[:] = [0.1713244923791705, 0.3607615730481384, 0.4679139345726904]
GL_X6[:] = [0.9324695142031522, 0.6612093864662647, 0.2386191860831970]
GL_W12[:] = [0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
             0.2031674267230659, 0.2334925365383547, 0.2491470458134029]
GL_X12[:] = [0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
             0.5873179542866171, 0.3678314989981802, 0.1252334085114692]
GL_W20[:] = [0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
             0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
             0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
             0.1527533871307259]
GL_X20[:] = [0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
             0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
             0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
             0.07652652113349733]

cdef int DMAX = 64
cdef Py_ssize_t BLOCK = 32
cdef double TWO_PI = 2.0 * M_PI


cdef double _bvnu(double dh, double dk, double r) noexcept nogil:
    """Upper orthant P(X > dh, Y > dk) for standard margins, correlation r."""
    cdef double *w
    cdef double *x
    cdef int lg, i, j
    cdef double h, k, hk, bvn, hs, asr, sn, a, as_, bs, c, d, b, sp, xs, rs, ep, xi

    if isinf(dh) and dh > 0:
        return 0.0
    if isinf(dk) and dk > 0:
        return 0.0
    if isinf(dh) and dh < 0:
        if isinf(dk) and dk < 0:
            return 1.0
        return ndtr(-dk)
    if isinf(dk) and dk < 0:
        return ndtr(-dh)
    if r == 0.0:
        return ndtr(-dh) * ndtr(-dk)

    if fabs(r) < 0.3:
        lg = 3
        w = GL_W6
        x = GL_X6
    elif fabs(r) < 0.75:
        lg = 6
        w = GL_W12
        x = GL_X12
    else:
        lg = 10
        w = GL_W20
        x = GL_X20

    h = dh
    k = dk
    hk = h * k
    bvn = 0.0
    if fabs(r) < 0.925:
        hs = (h * h + k * k) / 2.0
        asr = asin(r) / 2.0
        for i in range(lg):
            for j in range(2):
                xi = 1.0 - x[i] if j == 0 else 1.0 + x[i]
                sn = sin(asr * xi)
                bvn += w[i] * exp((sn * hk - hs) / (1.0 - sn * sn))
        bvn = bvn * asr / TWO_PI + ndtr(-h) * ndtr(-k)
    else:
        if r < 0:
            k = -k
            hk = -hk
        if fabs(r) < 1.0:
            as_ = 1.0 - r * r
            a = sqrt(as_)
            bs = (h - k) * (h - k)
            asr = -(bs / as_ + hk) / 2.0
            c = (4.0 - hk) / 8.0
            d = (12.0 - hk) / 80.0
            if asr > -100.0:
                bvn = a * exp(asr) * (1.0 - c * (bs - as_) * (1.0 - d * bs) / 3.0
                                      + c * d * as_ * as_)
            if hk > -100.0:
                b = sqrt(bs)
                sp = sqrt(TWO_PI) * ndtr(-b / a)
                bvn = bvn - exp(-hk / 2.0) * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0)
            a = a / 2.0
            sp = 0.0
            for i in range(lg):
                for j in range(2):
                    xi = 1.0 - x[i] if j == 0 else 1.0 + x[i]
                    xs = (a * xi) * (a * xi)
                    asr = -(bs / xs + hk) / 2.0
                    if asr > -100.0:
                        rs = sqrt(1.0 - xs)
                        ep = exp(-(hk / 2.0) * xs / ((1.0 + rs) * (1.0 + rs))) / rs
                        sp += w[i] * exp(asr) * ((1.0 + c * xs * (1.0 + 5.0 * d * xs)) - ep)
            bvn = (a * sp - bvn) / TWO_PI
        if r > 0:
            bvn = bvn + ndtr(-(h if h > k else k))
        elif h >= k:
            bvn = -bvn
        else:
            if h < 0:
                bvn = ndtr(k) - ndtr(h) - bvn
            else:
                bvn = ndtr(-h) - ndtr(-k) - bvn
    if bvn < 0.0:
        return 0.0
    if bvn > 1.0:
        return 1.0
    return bvn


def bvn_lower(const double[::1] h, const double[::1] k, const double[::1] r):
    """Lower orthant P(X <= h, Y <= k) elementwise for standard margins."""
    cdef Py_ssize_t n = h.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _bvnu(-h[i], -k[i], r[i])
    return out


cdef inline double _trunc_mean(double z) noexcept nogil:
    # E[X | X <= z] for standard normal X
    cdef double cz
    if isinf(z):
        return 0.0 if z > 0 else -1e300
    cz = ndtr(z)
    if cz < 1e-300:
        return z
    return -exp(-0.5 * z * z) / sqrt(TWO_PI) / cz


cdef int _prepare(const double[:, :, ::1] cov, const double[:, ::1] upper,
                  Py_ssize_t inst, int d, double *L, double *b, double *C,
                  double *y) noexcept nogil:
    """Reordered Cholesky with bounds; returns 1 when a pivot is negative."""
    cdef int i, j, k, best
    cdef double trace = 0.0, v, s, val, bestval, tmp, z, tol_deg, tol_neg

    for i in range(d):
        b[i] = upper[inst, i]
        trace += cov[inst, i, i]
        y[i] = 0.0
        for j in range(d):
            C[i * d + j] = cov[inst, i, j]
            L[i * d + j] = 0.0
    tol_deg = 1e-14 * trace
    tol_neg = 1e-10 * trace

    for i in range(d):
        best = i
        bestval = 2.0
        for j in range(i, d):
            v = C[j * d + j]
            s = 0.0
            for k in range(i):
                v -= L[j * d + k] * L[j * d + k]
                s += L[j * d + k] * y[k]
            if v > tol_deg:
                val = ndtr((b[j] - s) / sqrt(v))
            else:
                val = 1.0 if b[j] - s >= 0.0 else 0.0
            if val < bestval:
                bestval = val
                best = j
        if best != i:
            tmp = b[i]; b[i] = b[best]; b[best] = tmp
            for k in range(d):
                tmp = C[i * d + k]; C[i * d + k] = C[best * d + k]; C[best * d + k] = tmp
            for k in range(d):
                tmp = C[k * d + i]; C[k * d + i] = C[k * d + best]; C[k * d + best] = tmp
            for k in range(i):
                tmp = L[i * d + k]; L[i * d + k] = L[best * d + k]; L[best * d + k] = tmp
        v = C[i * d + i]
        s = 0.0
        for k in range(i):
            v -= L[i * d + k] * L[i * d + k]
            s += L[i * d + k] * y[k]
        if v < -tol_neg:
            return 1
        if v > tol_deg:
            L[i * d + i] = sqrt(v)
            for j in range(i + 1, d):
                tmp = C[j * d + i]
                for k in range(i):
                    tmp -= L[j * d + k] * L[i * d + k]
                L[j * d + i] = tmp / L[i * d + i]
            z = (b[i] - s) / L[i * d + i]
            y[i] = _trunc_mean(z)
            if y[i] < -1e299:
                y[i] = 0.0
        else:
            L[i * d + i] = 0.0
            y[i] = 0.0
    return 0


def orthant_qmc(const double[:, :, ::1] cov, const double[:, ::1] upper,
                const double[::1] alpha, const double[:, ::1] shifts,
                Py_ssize_t n_points):
    """Batched lattice-rule estimates of ``P(X <= upper[i])``, X ~ N(0, cov[i]).

    Returns ``(prob, stderr, status)``; ``status[i] == 1`` flags a covariance
    whose reordered Cholesky hit a clearly negative pivot.

    Points are processed in blocks of ``BLOCK`` so that the dependent
    ndtr/ndtri chains of neighbouring points can overlap in the pipeline.
    """
    cdef Py_ssize_t n_inst = cov.shape[0]
    cdef int d = cov.shape[1]
    cdef Py_ssize_t n_shift = shifts.shape[0]
    cdef Py_ssize_t inst, r, pt, start, nb, j
    cdef int i, k, bad
    cdef double s, c_i, u, acc, mean, var, c0, piv, inv
    cdef double *L
    cdef double *b
    cdef double *C
    cdef double *y
    cdef double *prod
    cdef double *cb
    cdef double *yb

    if d > DMAX:
        raise ValueError("dimension above kernel cap")
    prob = np.zeros(n_inst, dtype=np.float64)
    err = np.zeros(n_inst, dtype=np.float64)
    status = np.zeros(n_inst, dtype=np.int32)
    # lattice offsets |2 frac(pt * alpha + shift) - 1| shared by every instance
    pts = np.arange(n_points, dtype=np.float64)
    frac = pts[None, :, None] * np.asarray(alpha)[None, None, :] + np.asarray(shifts)[:, None, :]
    lat_arr = np.ascontiguousarray(np.abs(2.0 * (frac - np.floor(frac)) - 1.0))
    cdef const double[:, :, ::1] lat = lat_arr
    cdef double[::1] p_v = prob
    cdef double[::1] e_v = err
    cdef int[::1] st_v = status
    cdef double *ests = <double *> malloc(n_shift * sizeof(double))
    L = <double *> malloc(d * d * sizeof(double))
    C = <double *> malloc(d * d * sizeof(double))
    b = <double *> malloc(d * sizeof(double))
    y = <double *> malloc(d * sizeof(double))
    prod = <double *> malloc(BLOCK * sizeof(double))
    cb = <double *> malloc(BLOCK * sizeof(double))
    yb = <double *> malloc(d * BLOCK * sizeof(double))
    try:
        with nogil:
            for inst in range(n_inst):
                bad = _prepare(cov, upper, inst, d, L, b, C, y)
                if bad:
                    st_v[inst] = 1
                    continue
                if L[0] > 0:
                    c0 = ndtr(b[0] / L[0])
                else:
                    c0 = 1.0 if b[0] >= 0.0 else 0.0
                for r in range(n_shift):
                    acc = 0.0
                    if c0 > 0.0:
                        start = 0
                        while start < n_points:
                            nb = n_points - start
                            if nb > BLOCK:
                                nb = BLOCK
                            for j in range(nb):
                                prod[j] = c0
                                cb[j] = c0
                            for i in range(d):
                                piv = L[i * d + i]
                                if i > 0:
                                    if piv > 0:
                                        inv = 1.0 / piv
                                        for j in range(nb):
                                            s = 0.0
                                            for k in range(i):
                                                s += L[i * d + k] * yb[k * BLOCK + j]
                                            c_i = ndtr((b[i] - s) * inv)
                                            cb[j] = c_i
                                            prod[j] *= c_i
                                    else:
                                        for j in range(nb):
                                            s = 0.0
                                            for k in range(i):
                                                s += L[i * d + k] * yb[k * BLOCK + j]
                                            c_i = 1.0 if b[i] - s >= -1e-12 * (fabs(s) + 1.0) else 0.0
                                            cb[j] = c_i
                                            prod[j] *= c_i
                                if i < d - 1:
                                    if piv > 0:
                                        for j in range(nb):
                                            u = lat[r, start + j, i] * cb[j]
                                            if u < 1e-300:
                                                u = 1e-300
                                            elif u > 1.0 - 1e-16:
                                                u = 1.0 - 1e-16
                                            yb[i * BLOCK + j] = ndtri(u)
                                    else:
                                        for j in range(nb):
                                            yb[i * BLOCK + j] = 0.0
                            for j in range(nb):
                                acc += prod[j]
                            start += nb
                    ests[r] = acc / n_points
                mean = 0.0
                for r in range(n_shift):
                    mean += ests[r]
                mean /= n_shift
                var = 0.0
                if n_shift > 1:
                    for r in range(n_shift):
                        var += (ests[r] - mean) * (ests[r] - mean)
                    var /= (n_shift - 1) * n_shift
                p_v[inst] = mean
                e_v[inst] = sqrt(var)
    finally:
        free(ests)
        free(L)
        free(C)
        free(b)
        free(y)
        free(prod)
        free(cb)
        free(yb)
    return prob, err, status
