# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the splitting iteration and the projected scan.

Must agree with perfmdp._kernels.pure up to floating-point associativity;
the equivalence test in the suite enforces 1e-12 relative agreement.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def admm_chunk(double[:, ::1] W, double[::1] f0, double[::1] z, double[::1] u, int steps):
    cdef Py_ssize_t n = z.shape[0]
    cdef cnp.ndarray[double, ndim=1] d_arr = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] t_arr = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] zp_arr = np.empty(n)
    cdef double[::1] d = d_arr
    cdef double[::1] t = t_arr
    cdef double[::1] zp = zp_arr
    cdef Py_ssize_t i, j, k
    cdef double acc, ti, split_inf, dz_inf, v

    for k in range(steps):
        for i in range(n):
            t[i] = z[i] - u[i]
        for i in range(n):
            acc = f0[i]
            for j in range(n):
                acc += W[i, j] * t[j]
            d[i] = acc
        for i in range(n):
            ti = d[i] + u[i]
            zp[i] = z[i]
            z[i] = ti if ti > 0.0 else 0.0
            u[i] = ti - z[i]
    split_inf = 0.0
    dz_inf = 0.0
    for i in range(n):
        v = d[i] - z[i]
        if v < 0.0:
            v = -v
        if v > split_inf:
            split_inf = v
        v = z[i] - zp[i]
        if v < 0.0:
            v = -v
        if v > dz_inf:
            dz_inf = v
    return d_arr, split_inf, dz_inf


def projected_scan(double[::1] omega0, double[:, ::1] G, double eta, double radius):
    cdef Py_ssize_t D = omega0.shape[0]
    cdef Py_ssize_t K = G.shape[0]
    cdef cnp.ndarray[double, ndim=1] omega_arr = np.array(omega0, dtype=float, copy=True)
    cdef cnp.ndarray[double, ndim=1] avg_arr = np.zeros(D)
    cdef double[::1] omega = omega_arr
    cdef double[::1] avg = avg_arr
    cdef Py_ssize_t i, k
    cdef double nrm, scale

    for k in range(K):
        nrm = 0.0
        for i in range(D):
            omega[i] -= eta * G[k, i]
            nrm += omega[i] * omega[i]
        nrm = sqrt(nrm)
        if nrm > radius:
            scale = radius / nrm
            for i in range(D):
                omega[i] *= scale
        for i in range(D):
            avg[i] += omega[i]
    for i in range(D):
        avg[i] /= K
    return avg_arr, omega_arr
