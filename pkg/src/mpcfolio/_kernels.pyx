# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled forward-backward recursion for small-state Gaussian HMMs.

Mirrors ``_kernels_py.forward_backward`` exactly; see that module for the
contract.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def forward_backward(double[:, ::1] log_b, double[:, ::1] trans, double[::1] init):
    cdef Py_ssize_t T = log_b.shape[0]
    cdef Py_ssize_t K = log_b.shape[1]
    cdef Py_ssize_t t, i, j
    cdef double m, s, loglik = 0.0

    filt_arr = np.empty((T, K), dtype=np.float64)
    smooth_arr = np.empty((T, K), dtype=np.float64)
    xi_arr = np.zeros((K, K), dtype=np.float64)
    b_arr = np.empty((T, K), dtype=np.float64)
    scale_arr = np.empty(T, dtype=np.float64)
    pred_arr = np.empty(K, dtype=np.float64)
    beta_arr = np.empty(K, dtype=np.float64)
    tmp_arr = np.empty(K, dtype=np.float64)

    cdef double[:, ::1] filt = filt_arr
    cdef double[:, ::1] smooth = smooth_arr
    cdef double[:, ::1] xi = xi_arr
    cdef double[:, ::1] b = b_arr
    cdef double[::1] scale = scale_arr
    cdef double[::1] pred = pred_arr
    cdef double[::1] beta = beta_arr
    cdef double[::1] tmp = tmp_arr

    for t in range(T):
        m = log_b[t, 0]
        for i in range(1, K):
            if log_b[t, i] > m:
                m = log_b[t, i]
        for i in range(K):
            b[t, i] = exp(log_b[t, i] - m)
        loglik += m

    # forward, normalised each step
    for t in range(T):
        if t == 0:
            for i in range(K):
                pred[i] = init[i]
        else:
            for j in range(K):
                s = 0.0
                for i in range(K):
                    s += filt[t - 1, i] * trans[i, j]
                pred[j] = s
        s = 0.0
        for i in range(K):
            filt[t, i] = pred[i] * b[t, i]
            s += filt[t, i]
        scale[t] = s
        loglik += log(s)
        for i in range(K):
            filt[t, i] /= s

    # backward with the same scaling
    for i in range(K):
        beta[i] = 1.0
        smooth[T - 1, i] = filt[T - 1, i]
    for t in range(T - 2, -1, -1):
        for j in range(K):
            tmp[j] = b[t + 1, j] * beta[j] / scale[t + 1]
        for i in range(K):
            for j in range(K):
                xi[i, j] += filt[t, i] * trans[i, j] * tmp[j]
        for i in range(K):
            s = 0.0
            for j in range(K):
                s += trans[i, j] * tmp[j]
            beta[i] = s
        s = 0.0
        for i in range(K):
            smooth[t, i] = filt[t, i] * beta[i]
            s += smooth[t, i]
        for i in range(K):
            smooth[t, i] /= s

    return filt_arr, smooth_arr, xi_arr, loglik
