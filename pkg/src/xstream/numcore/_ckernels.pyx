# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for the dense hot loops.

Same contracts as ``pykernels``: softmax/layernorm act on 2D row matrices,
attention and rope on (heads, tokens, dim) stacks, masks are uint8 with
1 = allowed. Accumulation happens in double regardless of input dtype.
"""

import numpy as np

cimport cython
from libc.math cimport exp, sqrt, tanh, INFINITY

ctypedef fused real:
    float
    double

BACKEND_NAME = "compiled"


cdef inline object _empty(tuple shape, bint is_double):
    return np.empty(shape, dtype=np.float64 if is_double else np.float32)


def softmax_fwd(real[:, ::1] x):
    cdef Py_ssize_t r, c, R = x.shape[0], C = x.shape[1]
    cdef double m, s
    out_arr = _empty((R, C), real is double)
    cdef real[:, ::1] out = out_arr
    with nogil:
        for r in range(R):
            m = -INFINITY
            for c in range(C):
                if x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(C):
                s += exp(<double> x[r, c] - m)
            for c in range(C):
                out[r, c] = <real> (exp(<double> x[r, c] - m) / s)
    return out_arr


def softmax_bwd(real[:, ::1] y, real[:, ::1] gy):
    cdef Py_ssize_t r, c, R = y.shape[0], C = y.shape[1]
    cdef double dot
    out_arr = _empty((R, C), real is double)
    cdef real[:, ::1] out = out_arr
    with nogil:
        for r in range(R):
            dot = 0.0
            for c in range(C):
                dot += <double> gy[r, c] * y[r, c]
            for c in range(C):
                out[r, c] = <real> (y[r, c] * (gy[r, c] - dot))
    return out_arr


def layernorm_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t r, c, R = x.shape[0], C = x.shape[1]
    cdef double mu, var, rs, d
    y_arr = _empty((R, C), real is double)
    mean_arr = _empty((R,), real is double)
    rstd_arr = _empty((R,), real is double)
    cdef real[:, ::1] y = y_arr
    cdef real[::1] mean = mean_arr
    cdef real[::1] rstd = rstd_arr
    with nogil:
        for r in range(R):
            mu = 0.0
            for c in range(C):
                mu += x[r, c]
            mu /= C
            var = 0.0
            for c in range(C):
                d = x[r, c] - mu
                var += d * d
            var /= C
            rs = 1.0 / sqrt(var + eps)
            mean[r] = <real> mu
            rstd[r] = <real> rs
            for c in range(C):
                y[r, c] = <real> (((x[r, c] - mu) * rs) * gain[c] + bias[c])
    return y_arr, mean_arr, rstd_arr


def layernorm_bwd(real[:, ::1] x, real[::1] gain, real[::1] mean,
                  real[::1] rstd, real[:, ::1] gy):
    cdef Py_ssize_t r, c, R = x.shape[0], C = x.shape[1]
    cdef double mu, rs, xhat, gxh, m1, m2
    gx_arr = _empty((R, C), real is double)
    ggain_arr = np.zeros(C, dtype=np.float64)
    gbias_arr = np.zeros(C, dtype=np.float64)
    cdef real[:, ::1] gx = gx_arr
    cdef double[::1] ggain = ggain_arr
    cdef double[::1] gbias = gbias_arr
    with nogil:
        for r in range(R):
            mu = mean[r]
            rs = rstd[r]
            m1 = 0.0
            m2 = 0.0
            for c in range(C):
                xhat = (x[r, c] - mu) * rs
                gxh = <double> gy[r, c] * gain[c]
                m1 += gxh
                m2 += gxh * xhat
                ggain[c] += <double> gy[r, c] * xhat
                gbias[c] += gy[r, c]
            m1 /= C
            m2 /= C
            for c in range(C):
                xhat = (x[r, c] - mu) * rs
                gxh = <double> gy[r, c] * gain[c]
                gx[r, c] = <real> (rs * (gxh - m1 - xhat * m2))
    dtype = np.float64 if real is double else np.float32
    return gx_arr, ggain_arr.astype(dtype), gbias_arr.astype(dtype)


def gelu_fwd(real[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double c0 = sqrt(2.0 / np.pi), v, t
    out_arr = _empty((n,), real is double)
    cdef real[::1] out = out_arr
    with nogil:
        for i in range(n):
            v = x[i]
            t = tanh(c0 * (v + 0.044715 * v * v * v))
            out[i] = <real> (0.5 * v * (1.0 + t))
    return out_arr


def gelu_bwd(real[::1] x, real[::1] gy):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double c0 = sqrt(2.0 / np.pi), v, t, dinner
    out_arr = _empty((n,), real is double)
    cdef real[::1] out = out_arr
    with nogil:
        for i in range(n):
            v = x[i]
            t = tanh(c0 * (v + 0.044715 * v * v * v))
            dinner = c0 * (1.0 + 3.0 * 0.044715 * v * v)
            out[i] = <real> (gy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner))
    return out_arr


def rope_fwd(real[:, :, ::1] x, real[:, ::1] cos, real[:, ::1] sin):
    cdef Py_ssize_t h, t, i, H = x.shape[0], T = x.shape[1], P = x.shape[2] // 2
    cdef double xe, xo
    out_arr = _empty((H, T, 2 * P), real is double)
    cdef real[:, :, ::1] out = out_arr
    with nogil:
        for h in range(H):
            for t in range(T):
                for i in range(P):
                    xe = x[h, t, 2 * i]
                    xo = x[h, t, 2 * i + 1]
                    out[h, t, 2 * i] = <real> (xe * cos[t, i] - xo * sin[t, i])
                    out[h, t, 2 * i + 1] = <real> (xe * sin[t, i] + xo * cos[t, i])
    return out_arr


def rope_bwd(real[:, :, ::1] gy, real[:, ::1] cos, real[:, ::1] sin):
    return rope_fwd(gy, cos, np.negative(sin))


def attention_fwd(real[:, :, ::1] q, real[:, :, ::1] k, real[:, :, ::1] v,
                  const unsigned char[:, ::1] mask, double scale):
    cdef Py_ssize_t h, i, j, d
    cdef Py_ssize_t H = q.shape[0], Tq = q.shape[1], Tk = k.shape[1], D = q.shape[2]
    cdef double s, m, acc
    out_arr = _empty((H, Tq, D), real is double)
    probs_arr = _empty((H, Tq, Tk), real is double)
    cdef real[:, :, ::1] out = out_arr
    cdef real[:, :, ::1] probs = probs_arr
    with nogil:
        for h in range(H):
            for i in range(Tq):
                m = -INFINITY
                for j in range(Tk):
                    if mask[i, j]:
                        s = 0.0
                        for d in range(D):
                            s += <double> q[h, i, d] * k[h, j, d]
                        s *= scale
                        probs[h, i, j] = <real> s
                        if s > m:
                            m = s
                acc = 0.0
                for j in range(Tk):
                    if mask[i, j]:
                        s = exp(<double> probs[h, i, j] - m)
                        probs[h, i, j] = <real> s
                        acc += s
                    else:
                        probs[h, i, j] = 0.0
                for j in range(Tk):
                    if mask[i, j]:
                        probs[h, i, j] = <real> (probs[h, i, j] / acc)
                for d in range(D):
                    acc = 0.0
                    for j in range(Tk):
                        acc += <double> probs[h, i, j] * v[h, j, d]
                    out[h, i, d] = <real> acc
    return out_arr, probs_arr


def attention_bwd(real[:, :, ::1] q, real[:, :, ::1] k, real[:, :, ::1] v,
                  real[:, :, ::1] probs, real[:, :, ::1] gout, double scale):
    cdef Py_ssize_t h, i, j, d
    cdef Py_ssize_t H = q.shape[0], Tq = q.shape[1], Tk = k.shape[1], D = q.shape[2]
    cdef double dot, gp, gs
    gq_arr = _empty((H, Tq, D), real is double)
    gk_arr = np.zeros((H, Tk, D), dtype=np.float64 if real is double else np.float32)
    gv_arr = np.zeros((H, Tk, D), dtype=np.float64 if real is double else np.float32)
    cdef real[:, :, ::1] gq = gq_arr
    cdef real[:, :, ::1] gk = gk_arr
    cdef real[:, :, ::1] gv = gv_arr
    with nogil:
        for h in range(H):
            for i in range(Tq):
                dot = 0.0
                for j in range(Tk):
                    if probs[h, i, j] != 0.0:
                        gp = 0.0
                        for d in range(D):
                            gp += <double> gout[h, i, d] * v[h, j, d]
                        dot += gp * probs[h, i, j]
                for d in range(D):
                    gq[h, i, d] = 0.0
                for j in range(Tk):
                    if probs[h, i, j] == 0.0:
                        continue
                    gp = 0.0
                    for d in range(D):
                        gp += <double> gout[h, i, d] * v[h, j, d]
                        gv[h, j, d] += <real> (probs[h, i, j] * gout[h, i, d])
                    gs = probs[h, i, j] * (gp - dot) * scale
                    for d in range(D):
                        gq[h, i, d] += <real> (gs * k[h, j, d])
                        gk[h, j, d] += <real> (gs * q[h, i, d])
    return gq_arr, gk_arr, gv_arr
