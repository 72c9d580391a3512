# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused soft nearest-neighbor forward/backward kernels.

Mirrors ``nncsl.kernels._fallback``. The four matrix products go to BLAS
through ``np.dot`` into preallocated buffers; normalisation, the shifted
softmax and the softmax and normalisation backward passes are fused loops,
which saves the temporaries numpy would allocate for each elementwise step.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

cdef double NORM_FLOOR = 1e-12


cdef void _normalize(double[:, ::1] x, double[:, ::1] unit, double[::1] norms) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc = acc + x[i, j] * x[i, j]
        acc = sqrt(acc)
        if acc < NORM_FLOOR:
            acc = NORM_FLOOR
        norms[i] = acc
        for j in range(d):
            unit[i, j] = x[i, j] / acc


cdef void _normalize_backward(double[:, ::1] grad_unit, double[:, ::1] unit,
                              double[::1] norms, double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef Py_ssize_t n = unit.shape[0], d = unit.shape[1]
    cdef double radial
    for i in range(n):
        if norms[i] <= NORM_FLOOR:
            for j in range(d):
                out[i, j] = 0.0
            continue
        radial = 0.0
        for j in range(d):
            radial = radial + grad_unit[i, j] * unit[i, j]
        for j in range(d):
            out[i, j] = (grad_unit[i, j] - unit[i, j] * radial) / norms[i]


def snn_forward(h, s, y, double temperature):
    cdef double[:, ::1] hv = np.ascontiguousarray(h, dtype=np.float64)
    cdef double[:, ::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = hv.shape[0], k = sv.shape[0], d = hv.shape[1]
    if k == 0:
        raise ValueError("soft nearest-neighbor kernel needs at least one support row")

    h_unit = np.empty((n, d))
    s_unit = np.empty((k, d))
    h_norms = np.empty(n)
    s_norms = np.empty(k)
    weights = np.empty((n, k))
    cdef double[:, ::1] hu = h_unit, su = s_unit, w = weights
    cdef double[::1] hn = h_norms, sn = s_norms
    cdef Py_ssize_t i, j
    cdef double inv_t = 1.0 / temperature, top, total

    with nogil:
        _normalize(hv, hu, hn)
        _normalize(sv, su, sn)
    np.dot(h_unit, s_unit.T, out=weights)
    with nogil:
        for i in range(n):
            top = w[i, 0]
            for j in range(1, k):
                if w[i, j] > top:
                    top = w[i, j]
            total = 0.0
            for j in range(k):
                w[i, j] = exp((w[i, j] - top) * inv_t)
                total = total + w[i, j]
            total = 1.0 / total
            for j in range(k):
                w[i, j] = w[i, j] * total
    probs = np.dot(weights, y)
    return probs, weights, h_unit, s_unit, h_norms, s_norms


def snn_backward(grad_probs, y, weights, h_unit, s_unit, h_norms, s_norms, double temperature):
    grad_probs = np.ascontiguousarray(grad_probs, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    h_unit = np.ascontiguousarray(h_unit, dtype=np.float64)
    s_unit = np.ascontiguousarray(s_unit, dtype=np.float64)
    cdef double[::1] hn = np.ascontiguousarray(h_norms, dtype=np.float64)
    cdef double[::1] sn = np.ascontiguousarray(s_norms, dtype=np.float64)
    cdef double[:, ::1] w = weights
    cdef Py_ssize_t n = w.shape[0], k = w.shape[1]

    grad_y = np.dot(weights.T, grad_probs)
    grad_sim = np.dot(grad_probs, y.T)  # becomes d loss / d similarity in place
    cdef double[:, ::1] gs = grad_sim
    cdef Py_ssize_t i, j
    cdef double inner, inv_t = 1.0 / temperature

    with nogil:
        for i in range(n):
            inner = 0.0
            for j in range(k):
                inner = inner + gs[i, j] * w[i, j]
            for j in range(k):
                gs[i, j] = w[i, j] * (gs[i, j] - inner) * inv_t
    grad_hu = np.dot(grad_sim, s_unit)
    grad_su = np.dot(grad_sim.T, h_unit)
    grad_h = np.empty_like(grad_hu)
    grad_s = np.empty_like(grad_su)
    cdef double[:, ::1] ghu = grad_hu, gsu = grad_su, gh = grad_h, gss = grad_s
    cdef double[:, ::1] hu = h_unit, su = s_unit
    with nogil:
        _normalize_backward(ghu, hu, hn, gh)
        _normalize_backward(gsu, su, sn, gss)
    return grad_h, grad_s, grad_y
