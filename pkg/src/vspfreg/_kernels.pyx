# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled partial-volume kernels.

Same contract as ``_kernels_py``; see that module for argument layout.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, floor, fabs, M_PI

cnp.import_array()


cdef inline double _wsinc(double d) noexcept nogil:
    cdef double pd
    if fabs(d) >= 2.0:
        return 0.0
    pd = M_PI * d
    if fabs(d) < 1e-12:
        return 0.5 * (1.0 + cos(0.5 * pd))
    return sin(pd) / pd * 0.5 * (1.0 + cos(0.5 * pd))


cdef inline double _wsinc_deriv(double d) noexcept nogil:
    cdef double pd, s, ds, h, dh
    if fabs(d) >= 2.0:
        return 0.0
    pd = M_PI * d
    if fabs(d) < 1e-6:
        s = 1.0
        ds = -(M_PI * M_PI / 3.0) * d
    else:
        s = sin(pd) / pd
        ds = (pd * cos(pd) - sin(pd)) / (M_PI * d * d)
    h = 0.5 * (1.0 + cos(0.5 * pd))
    dh = -0.25 * M_PI * sin(0.5 * pd)
    return ds * h + s * dh


cdef inline long _taps(double u, double* w, double* dw) noexcept nogil:
    """Normalized 4-tap weights and their u-derivatives; returns first tap index."""
    cdef long fl = <long>floor(u)
    cdef double S = 0.0, dS = 0.0, d
    cdef int j
    for j in range(4):
        d = u - (fl - 1 + j)
        w[j] = _wsinc(d)
        dw[j] = _wsinc_deriv(d)
        S += w[j]
        dS += dw[j]
    for j in range(4):
        dw[j] = (dw[j] * S - w[j] * dS) / (S * S)
        w[j] = w[j] / S
    return fl - 1


def pv_histogram(const double[:, ::1] coords,
                 const int[::1] ref_lo,
                 const double[::1] ref_frac,
                 const int[:, :, ::1] mov_bins,
                 int bins):
    cdef Py_ssize_t n = coords.shape[0]
    cdef long nz = mov_bins.shape[0], ny = mov_bins.shape[1], nx = mov_bins.shape[2]
    table_arr = np.zeros((bins, bins), dtype=np.float64)
    cdef double[:, ::1] table = table_arr
    cdef double wx[4]
    cdef double wy[4]
    cdef double wz[4]
    cdef double dwx[4]
    cdef double dwy[4]
    cdef double dwz[4]
    cdef long x0, y0, z0, xi, yi, zi
    cdef int a, b, i, j, k
    cdef double f, wzy, w
    cdef Py_ssize_t s
    with nogil:
        for s in range(n):
            x0 = _taps(coords[s, 0], wx, dwx)
            y0 = _taps(coords[s, 1], wy, dwy)
            z0 = _taps(coords[s, 2], wz, dwz)
            a = ref_lo[s]
            f = ref_frac[s]
            for k in range(4):
                zi = z0 + k
                if zi < 0 or zi >= nz:
                    continue
                for j in range(4):
                    yi = y0 + j
                    if yi < 0 or yi >= ny:
                        continue
                    wzy = wz[k] * wy[j]
                    for i in range(4):
                        xi = x0 + i
                        if xi < 0 or xi >= nx:
                            continue
                        w = wzy * wx[i]
                        b = mov_bins[zi, yi, xi]
                        table[a, b] += (1.0 - f) * w
                        table[a + 1, b] += f * w
    return table_arr


def pv_gradient(const double[:, ::1] coords,
                const int[::1] ref_lo,
                const double[::1] ref_frac,
                const int[:, :, ::1] mov_bins,
                const double[:, ::1] F):
    cdef Py_ssize_t n = coords.shape[0]
    cdef long nz = mov_bins.shape[0], ny = mov_bins.shape[1], nx = mov_bins.shape[2]
    out_arr = np.zeros((n, 3), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double wx[4]
    cdef double wy[4]
    cdef double wz[4]
    cdef double dwx[4]
    cdef double dwy[4]
    cdef double dwz[4]
    cdef long x0, y0, z0, xi, yi, zi
    cdef int a, b, i, j, k
    cdef double f, c, gx, gy, gz
    cdef Py_ssize_t s
    with nogil:
        for s in range(n):
            x0 = _taps(coords[s, 0], wx, dwx)
            y0 = _taps(coords[s, 1], wy, dwy)
            z0 = _taps(coords[s, 2], wz, dwz)
            a = ref_lo[s]
            f = ref_frac[s]
            gx = 0.0
            gy = 0.0
            gz = 0.0
            for k in range(4):
                zi = z0 + k
                if zi < 0 or zi >= nz:
                    continue
                for j in range(4):
                    yi = y0 + j
                    if yi < 0 or yi >= ny:
                        continue
                    for i in range(4):
                        xi = x0 + i
                        if xi < 0 or xi >= nx:
                            continue
                        b = mov_bins[zi, yi, xi]
                        c = (1.0 - f) * F[a, b] + f * F[a + 1, b]
                        gx += c * dwx[i] * wy[j] * wz[k]
                        gy += c * wx[i] * dwy[j] * wz[k]
                        gz += c * wx[i] * wy[j] * dwz[k]
            out[s, 0] = gx
            out[s, 1] = gy
            out[s, 2] = gz
    return out_arr
