# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels; same signatures as ``fedal._kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, tanh

cnp.import_array()

cdef double GELU_C = 0.7978845608028654


def layernorm_forward(const double[:, ::1] x, const double[::1] gamma,
                      const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double mu, var, r, v
    y_arr = np.empty((n, d))
    xhat_arr = np.empty((n, d))
    rstd_arr = np.empty(n)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            v = x[i, j] - mu
            var += v * v
        var /= d
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            v = (x[i, j] - mu) * r
            xhat[i, j] = v
            y[i, j] = v * gamma[j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layernorm_backward(const double[:, ::1] g, const double[:, ::1] xhat,
                       const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    cdef double s1, s2, gx
    dx_arr = np.empty((n, d))
    dgamma_arr = np.zeros(d)
    dbeta_arr = np.zeros(d)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
            gx = g[i, j] * gamma[j]
            s1 += gx
            s2 += gx * xhat[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            dx[i, j] = (g[i, j] * gamma[j] - s1 - xhat[i, j] * s2) * rstd[i]
    return dx_arr, dgamma_arr, dbeta_arr


def softmax_forward(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double m, s
    y_arr = np.empty((n, d))
    cdef double[:, ::1] y = y_arr
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            y[i, j] = exp(x[i, j] - m)
            s += y[i, j]
        for j in range(d):
            y[i, j] /= s
    return y_arr


def softmax_backward(const double[:, ::1] g, const double[:, ::1] y):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    cdef double s
    dx_arr = np.empty((n, d))
    cdef double[:, ::1] dx = dx_arr
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += g[i, j] * y[i, j]
        for j in range(d):
            dx[i, j] = y[i, j] * (g[i, j] - s)
    return dx_arr


def gelu_forward(x_in):
    x_arr = np.ascontiguousarray(x_in).reshape(-1)
    cdef const double[::1] x = x_arr
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v
    y_arr = np.empty(n)
    cdef double[::1] y = y_arr
    for i in range(n):
        v = x[i]
        y[i] = 0.5 * v * (1.0 + tanh(GELU_C * (v + 0.044715 * v * v * v)))
    return y_arr.reshape(np.shape(x_in))


def gelu_backward(g_in, x_in):
    x_arr = np.ascontiguousarray(x_in).reshape(-1)
    g_arr = np.ascontiguousarray(g_in).reshape(-1)
    cdef const double[::1] x = x_arr
    cdef const double[::1] g = g_arr
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, t
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    for i in range(n):
        v = x[i]
        t = tanh(GELU_C * (v + 0.044715 * v * v * v))
        out[i] = g[i] * (0.5 * (1.0 + t)
                         + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * v * v))
    return out_arr.reshape(np.shape(x_in))


def moving_average(const double[:, :, ::1] x, int tau):
    cdef Py_ssize_t b = x.shape[0], n = x.shape[1], d = x.shape[2]
    cdef Py_ssize_t left = (tau - 1) // 2, i, t, k, j, src
    cdef double[::1] acc
    out_arr = np.empty((b, n, d))
    cdef double[:, :, ::1] out = out_arr
    acc_arr = np.empty(d)
    acc = acc_arr
    for i in range(b):
        for t in range(n):
            for j in range(d):
                acc[j] = 0.0
            for k in range(tau):
                src = t - left + k
                if src < 0:
                    src = 0
                elif src >= n:
                    src = n - 1
                for j in range(d):
                    acc[j] += x[i, src, j]
            for j in range(d):
                out[i, t, j] = acc[j] / tau
    return out_arr


def moving_average_backward(const double[:, :, ::1] g, int tau):
    cdef Py_ssize_t b = g.shape[0], n = g.shape[1], d = g.shape[2]
    cdef Py_ssize_t left = (tau - 1) // 2, i, t, k, j, dst
    out_arr = np.zeros((b, n, d))
    cdef double[:, :, ::1] out = out_arr
    for i in range(b):
        for t in range(n):
            for k in range(tau):
                dst = t - left + k
                if dst < 0:
                    dst = 0
                elif dst >= n:
                    dst = n - 1
                for j in range(d):
                    out[i, dst, j] += g[i, t, j] / tau
    return out_arr
