# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the compression operators.

Every routine here has a numpy twin in ``_kernels_py`` that performs the
same floating-point operations in the same order, so both backends give
bitwise-identical results for identical inputs.
"""
import numpy as np
from libc.math cimport floor, fabs


cdef inline bint _worse(double va, Py_ssize_t ia, double vb, Py_ssize_t ib) noexcept nogil:
    # a ranks below b: smaller magnitude, or equal magnitude and larger index
    return va < vb or (va == vb and ia > ib)


cdef void _sift_down(double[::1] hv, Py_ssize_t[::1] hi, Py_ssize_t pos, Py_ssize_t size) noexcept nogil:
    cdef Py_ssize_t child, other
    cdef double tv
    cdef Py_ssize_t ti
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        other = child + 1
        if other < size and _worse(hv[other], hi[other], hv[child], hi[child]):
            child = other
        if _worse(hv[child], hi[child], hv[pos], hi[pos]):
            tv = hv[pos]; hv[pos] = hv[child]; hv[child] = tv
            ti = hi[pos]; hi[pos] = hi[child]; hi[child] = ti
            pos = child
        else:
            break


def top_k_indices(const double[::1] x, Py_ssize_t k):
    """Sorted indices of the k largest |x_i|; ties go to the lower index."""
    cdef Py_ssize_t d = x.shape[0]
    cdef Py_ssize_t i, j, parent
    cdef double v, tv
    cdef Py_ssize_t ti
    heap_v = np.empty(k, dtype=np.float64)
    heap_i = np.empty(k, dtype=np.intp)
    cdef double[::1] hv = heap_v
    cdef Py_ssize_t[::1] hi = heap_i
    with nogil:
        # min-heap keyed by rank: the root is the weakest retained entry
        for i in range(k):
            hv[i] = fabs(x[i])
            hi[i] = i
            j = i
            while j > 0:
                parent = (j - 1) // 2
                if _worse(hv[j], hi[j], hv[parent], hi[parent]):
                    tv = hv[j]; hv[j] = hv[parent]; hv[parent] = tv
                    ti = hi[j]; hi[j] = hi[parent]; hi[parent] = ti
                    j = parent
                else:
                    break
        for i in range(k, d):
            v = fabs(x[i])
            # later index loses ties, so strictly larger magnitude is required
            if v > hv[0]:
                hv[0] = v
                hi[0] = i
                _sift_down(hv, hi, 0, k)
    out = np.sort(heap_i).astype(np.int64)
    return out


def qsgd_round(const double[::1] x, double norm, long s, const double[::1] u):
    cdef Py_ssize_t d = x.shape[0]
    cdef Py_ssize_t i
    cdef double y, lvl, frac, val
    out = np.empty(d, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(d):
            y = fabs(x[i]) / norm * s
            if y > s:
                y = s
            lvl = floor(y)
            frac = y - lvl
            if u[i] < frac:
                lvl = lvl + 1.0
            val = lvl / s * norm
            if x[i] < 0:
                val = -val
            o[i] = val
    return out


def levels_round(const double[::1] x, double lo, double hi, double step, long s,
                 const double[::1] u):
    cdef Py_ssize_t d = x.shape[0]
    cdef Py_ssize_t i
    cdef double y, lvl, frac
    out = np.empty(d, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(d):
            y = (x[i] - lo) / step
            if y < 0:
                y = 0
            if y > s:
                y = s
            lvl = floor(y)
            frac = y - lvl
            if u[i] < frac:
                lvl = lvl + 1.0
            if lvl >= s:
                o[i] = hi
            else:
                o[i] = lo + lvl * step
    return out


def fwht(double[::1] x, double scale):
    """In-place Walsh-Hadamard butterflies followed by multiplication by ``scale``."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t h = 1
    cdef Py_ssize_t i, j
    cdef double a, b
    with nogil:
        while h < n:
            i = 0
            while i < n:
                for j in range(i, i + h):
                    a = x[j]
                    b = x[j + h]
                    x[j] = a + b
                    x[j + h] = a - b
                i += 2 * h
            h *= 2
        for i in range(n):
            x[i] = x[i] * scale
