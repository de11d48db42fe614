# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled framing and overlap-add kernels."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef Py_ssize_t _num_frames(Py_ssize_t length, Py_ssize_t window, Py_ssize_t hop):
    if length <= window:
        return 1
    return (length - window + hop - 1) // hop + 1


def frame(x, Py_ssize_t window, Py_ssize_t hop):
    cdef const double[:, ::1] src = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = src.shape[0], length = src.shape[1]
    cdef Py_ssize_t nf = _num_frames(length, window, hop)
    out = np.zeros((n, nf, window))
    cdef double[:, :, ::1] dst = out
    cdef Py_ssize_t i, f, w, t, stop
    with nogil:
        for i in range(n):
            for f in range(nf):
                t = f * hop
                stop = window
                if t + stop > length:
                    stop = length - t
                for w in range(stop):
                    dst[i, f, w] = src[i, t + w]
    return out


def overlap_add(frames, Py_ssize_t hop, Py_ssize_t length):
    cdef const double[:, :, ::1] src = np.ascontiguousarray(frames, dtype=np.float64)
    cdef Py_ssize_t n = src.shape[0], nf = src.shape[1], window = src.shape[2]
    out = np.zeros((n, length))
    cdef double[:, ::1] dst = out
    cdef Py_ssize_t i, f, w, t, stop
    with nogil:
        for i in range(n):
            for f in range(nf):
                t = f * hop
                if t >= length:
                    break
                stop = window
                if t + stop > length:
                    stop = length - t
                for w in range(stop):
                    dst[i, t + w] += src[i, f, w]
    return out
