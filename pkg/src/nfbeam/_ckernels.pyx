# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled gain-sweep kernels. Same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, sin, cos

cnp.import_array()


def codeword_table(const double[:, ::1] antennas, const double[:, ::1] points, double wavenumber):
    """Unit-norm codewords ``exp(-j k ||p - p_m||) / sqrt(M)``, shape (K, M)."""
    cdef Py_ssize_t K = points.shape[0], M = antennas.shape[0]
    cdef Py_ssize_t k, m
    cdef double dx, dy, dz, d, scale = 1.0 / sqrt(<double>M)
    out = np.empty((K, M), dtype=np.complex128)
    cdef double complex[:, ::1] o = out
    for k in range(K):
        for m in range(M):
            dx = points[k, 0] - antennas[m, 0]
            dy = points[k, 1] - antennas[m, 1]
            dz = points[k, 2] - antennas[m, 2]
            d = sqrt(dx * dx + dy * dy + dz * dz)
            o[k, m] = scale * cos(wavenumber * d) - 1j * scale * sin(wavenumber * d)
    return out


cdef inline double _row_gain(const double complex[:, ::1] table, Py_ssize_t k,
                             const double complex[::1] h) nogil:
    cdef Py_ssize_t m, M = table.shape[1]
    cdef double re = 0.0, im = 0.0, wr, wi, hr, hi
    for m in range(M):
        wr = table[k, m].real
        wi = table[k, m].imag
        hr = h[m].real
        hi = h[m].imag
        # conj(w) * h
        re += wr * hr + wi * hi
        im += wr * hi - wi * hr
    return re * re + im * im


def gain_sweep(const double complex[:, ::1] table, const double complex[::1] h):
    """``|w_k^H h|^2`` for every row of ``table``."""
    cdef Py_ssize_t K = table.shape[0], k
    out = np.empty(K, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for k in range(K):
            o[k] = _row_gain(table, k, h)
    return out


def subset_gains(const double complex[:, ::1] table, const cnp.int64_t[::1] rows, const double complex[::1] h):
    """Gains of the listed rows only (0-based), without copying the subset."""
    cdef Py_ssize_t n = rows.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _row_gain(table, rows[i], h)
    return out


def first_argmax(const double[::1] values, double rtol):
    """Smallest index whose value is within ``rtol`` (relative) of the maximum."""
    cdef Py_ssize_t n = values.shape[0], i
    cdef double vmax = values[0], thr
    for i in range(1, n):
        if values[i] > vmax:
            vmax = values[i]
    thr = vmax - rtol * (vmax if vmax > 0 else -vmax)
    for i in range(n):
        if values[i] >= thr:
            return i
    return 0
