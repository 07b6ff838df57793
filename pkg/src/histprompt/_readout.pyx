# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled memory readout kernel.

Keys are streamed in tiles of ``tile`` rows. For each tile the score block is
one dgemm, the running softmax (max, denominator) is rescaled in place, and
the value aggregation is a second dgemm. All arithmetic is float64; the
result is rounded to float32 once.
"""
import numpy as np

from libc.math cimport exp, INFINITY
from scipy.linalg.cython_blas cimport dgemm


def readout(const float[:, ::1] keys, const float[:, ::1] values,
            const float[:, ::1] queries, bint dot=False, int tile=512):
    cdef Py_ssize_t N = keys.shape[0], D = keys.shape[1]
    cdef Py_ssize_t C = values.shape[1], M = queries.shape[0]
    if values.shape[0] != N or queries.shape[1] != D:
        raise ValueError("keys, values and queries are misaligned")
    if N == 0 or M == 0:
        raise ValueError("empty bank or query set")
    if tile < 1:
        raise ValueError("tile must be positive")

    cdef double[:, ::1] q64 = np.asarray(queries, dtype=np.float64)
    cdef double[:, ::1] kt = np.empty((tile, D))
    cdef double[:, ::1] vt = np.empty((tile, C))
    s_arr = np.empty((tile, M))
    cdef double[:, ::1] s = s_arr
    cdef double[:, ::1] acc = np.zeros((M, C))
    cdef double[::1] mx = np.full(M, -INFINITY)
    cdef double[::1] den = np.zeros(M)
    cdef double[::1] tmax = np.empty(M)
    cdef double[::1] knorm = np.empty(tile)

    cdef Py_ssize_t start, n, i, j, c
    cdef double v, scale, newmax, two = 2.0 if not dot else 1.0
    cdef char ta = b'T', tn = b'N'
    cdef int im, in_, idd, ic
    cdef double one = 1.0, zero = 0.0

    with nogil:
        start = 0
        while start < N:
            n = tile if start + tile <= N else N - start
            for i in range(n):
                v = 0.0
                for c in range(D):
                    kt[i, c] = keys[start + i, c]
                    v = v + kt[i, c] * kt[i, c]
                knorm[i] = v
                for c in range(C):
                    vt[i, c] = values[start + i, c]

            # s (n x M, row-major) = kt @ q64^T, i.e. column-major s^T = q64 . kt^T
            im = <int>M
            in_ = <int>n
            idd = <int>D
            dgemm(&ta, &tn, &im, &in_, &idd, &two, &q64[0, 0], &idd, &kt[0, 0], &idd,
                  &zero, &s[0, 0], &im)

            for j in range(M):
                tmax[j] = -INFINITY
            for i in range(n):
                for j in range(M):
                    if not dot:
                        # the -|q|^2 term is constant per column and cancels
                        s[i, j] = s[i, j] - knorm[i]
                    if s[i, j] > tmax[j]:
                        tmax[j] = s[i, j]

            for j in range(M):
                newmax = tmax[j] if tmax[j] > mx[j] else mx[j]
                if newmax != mx[j]:
                    scale = exp(mx[j] - newmax)
                    den[j] = den[j] * scale
                    for c in range(C):
                        acc[j, c] = acc[j, c] * scale
                    mx[j] = newmax
            for i in range(n):
                for j in range(M):
                    s[i, j] = s[i, j] - mx[j]

            # the exponential is the bulk of the work when D and C are small;
            # numpy's SIMD ufunc beats a scalar libm loop by a wide margin
            with gil:
                np.exp(s_arr[:n], out=s_arr[:n])

            for i in range(n):
                for j in range(M):
                    den[j] = den[j] + s[i, j]

            # acc^T (C x M, column-major) += vt^T (C x n) . s (n x M)
            ic = <int>C
            dgemm(&tn, &ta, &ic, &im, &in_, &one, &vt[0, 0], &ic, &s[0, 0], &im,
                  &one, &acc[0, 0], &ic)
            start = start + n

    out = np.empty((M, C), dtype=np.float32)
    cdef float[:, ::1] o = out
    with nogil:
        for j in range(M):
            for c in range(C):
                o[j, c] = <float>(acc[j, c] / den[j])
    return out
