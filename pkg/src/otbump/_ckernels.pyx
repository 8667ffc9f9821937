# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Mirrors ``_pykernels`` function by function."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, erfc, log, fabs, sqrt

cnp.import_array()

cdef double INV_SQRT2 = 0.7071067811865476


cdef inline Py_ssize_t _bisect_left(const double[::1] a, double x) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = a.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if a[mid] < x:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef inline Py_ssize_t _bisect_right(const double[::1] a, double x) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = a.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if x < a[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


cdef inline double _nearest(const double[::1] a, double x) noexcept nogil:
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i = _bisect_left(a, x)
    if i <= 0:
        return a[0]
    if i >= n:
        return a[n - 1]
    if x - a[i - 1] <= a[i] - x:
        return a[i - 1]
    return a[i]


def kernel_ccdf(const double[::1] m_train, const double[::1] z_train,
                const double[::1] zq, const double[::1] mq,
                double h_z, double h_m, double cutoff):
    """Conditional CDF sums; ``m_train`` must be sorted ascending."""
    cdef Py_ssize_t nq = zq.shape[0]
    cdef Py_ssize_t q, i, lo, hi
    cdef double m, z, u, w, num, den, reach = cutoff * h_m
    cdef double inv_hm = 1.0 / h_m, inv_hz = 1.0 / h_z
    out = np.empty(nq, dtype=np.float64)
    flags = np.zeros(nq, dtype=np.uint8)
    cdef double[::1] out_v = out
    cdef unsigned char[::1] flag_v = flags
    with nogil:
        for q in range(nq):
            m = mq[q]
            z = zq[q]
            lo = _bisect_left(m_train, m - reach)
            hi = _bisect_right(m_train, m + reach)
            if lo >= hi:
                m = _nearest(m_train, m)
                flag_v[q] = 1
                lo = _bisect_left(m_train, m - reach)
                hi = _bisect_right(m_train, m + reach)
            num = 0.0
            den = 0.0
            for i in range(lo, hi):
                u = (m - m_train[i]) * inv_hm
                w = exp(-0.5 * u * u)
                den += w
                u = (z - z_train[i]) * inv_hz
                # Phi(u) equals 0 or 1 to within 1e-17 beyond |u| = 8.5
                if u > 8.5:
                    num += w
                elif u >= -8.5:
                    num += w * 0.5 * erfc(-u * INV_SQRT2)
            out_v[q] = num / den
    return out, flags


def kernel_nw(const double[::1] x_train, const double[::1] y_train,
              const double[::1] xq, double h, double cutoff):
    """Nadaraya-Watson sums; ``x_train`` must be sorted ascending."""
    cdef Py_ssize_t nq = xq.shape[0]
    cdef Py_ssize_t q, i, lo, hi
    cdef double x, u, w, num, den, reach = cutoff * h
    cdef double inv_h = 1.0 / h
    out = np.empty(nq, dtype=np.float64)
    flags = np.zeros(nq, dtype=np.uint8)
    cdef double[::1] out_v = out
    cdef unsigned char[::1] flag_v = flags
    with nogil:
        for q in range(nq):
            x = xq[q]
            lo = _bisect_left(x_train, x - reach)
            hi = _bisect_right(x_train, x + reach)
            if lo >= hi:
                x = _nearest(x_train, x)
                flag_v[q] = 1
                lo = _bisect_left(x_train, x - reach)
                hi = _bisect_right(x_train, x + reach)
            num = 0.0
            den = 0.0
            for i in range(lo, hi):
                u = (x - x_train[i]) * inv_h
                w = exp(-0.5 * u * u)
                den += w
                num += w * y_train[i]
            out_v[q] = num / den
    return out, flags


def dagostini(const double[:, ::1] phi, const double[::1] p,
              const double[::1] phi_c, const double[::1] gamma0,
              long max_iter, double tol, double floor, bint track):
    """Normalized D'Agostini iteration on basis masses ``phi`` (K+1 x L)."""
    cdef Py_ssize_t k1 = phi.shape[0], nl = phi.shape[1]
    cdef Py_ssize_t k, l, it = 0
    cdef double s, step, d, bc, pc = 0.0, ll
    cdef bint converged = False, zero_mass = False
    gamma = np.array(gamma0, dtype=np.float64, copy=True)
    cdef double[::1] g = gamma
    cdef double[::1] b = np.empty(nl, dtype=np.float64)
    cdef double[::1] r = np.empty(nl, dtype=np.float64)
    cdef double[::1] gt = np.empty(k1, dtype=np.float64)
    trace = np.empty(max_iter + 1 if track else 0, dtype=np.float64)
    cdef double[::1] tr = trace
    step = np.inf

    for l in range(nl):
        pc += p[l]

    with nogil:
        while True:
            # predicted bin masses B_gamma(C_l)
            for l in range(nl):
                s = 0.0
                for k in range(k1):
                    s += g[k] * phi[k, l]
                b[l] = s
            if track:
                ll = 0.0
                bc = 0.0
                for k in range(k1):
                    bc += g[k] * phi_c[k]
                for l in range(nl):
                    if p[l] > 0.0:
                        ll += p[l] * log(b[l] if b[l] > floor else floor)
                tr[it] = ll - pc * log(bc)
            if converged or it >= max_iter:
                break
            for l in range(nl):
                if b[l] < floor:
                    r[l] = 0.0
                    if p[l] > 0.0:
                        zero_mass = True
                else:
                    r[l] = p[l] / b[l]
            s = 0.0
            for k in range(k1):
                d = 0.0
                for l in range(nl):
                    d += phi[k, l] * r[l]
                gt[k] = g[k] * d / phi_c[k]
                s += gt[k]
            step = 0.0
            for k in range(k1):
                d = gt[k] * k1 / s
                if fabs(d - g[k]) > step:
                    step = fabs(d - g[k])
                g[k] = d
            it += 1
            if step <= tol:
                converged = True
    if track:
        trace = trace[:it + 1]
    return gamma, it, step, converged, zero_mass, trace
