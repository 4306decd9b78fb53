# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Every reduction accumulates in ascending index order."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double aik
    out = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] c = out
    # i-k-j order: each c[i, j] still receives its terms in ascending k
    with nogil:
        for i in range(m):
            for p in range(k):
                aik = a[i, p]
                if aik == 0.0:
                    continue
                for j in range(n):
                    c[i, j] += aik * b[p, j]
    return out


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w, int stride):
    cdef Py_ssize_t nb = x.shape[0], cin = x.shape[1], hin = x.shape[2], win = x.shape[3]
    cdef Py_ssize_t nf = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (hin - kh) // stride + 1
    cdef Py_ssize_t wo = (win - kw) // stride + 1
    cdef Py_ssize_t n, f, c, i, j, oh, ow
    cdef double wv
    out = np.zeros((nb, nf, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    # output position innermost; each y[n, f, oh, ow] still sums over (c, i, j) in order
    with nogil:
        for n in range(nb):
            for f in range(nf):
                for oh in range(ho):
                    for c in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                wv = w[f, c, i, j]
                                for ow in range(wo):
                                    y[n, f, oh, ow] += wv * x[n, c, oh * stride + i, ow * stride + j]
    return out


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] dout, int stride):
    cdef Py_ssize_t nb = x.shape[0], cin = x.shape[1], hin = x.shape[2], win = x.shape[3]
    cdef Py_ssize_t nf = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = dout.shape[2], wo = dout.shape[3]
    cdef Py_ssize_t n, f, c, i, j, oh, ow
    cdef double acc, wv
    dx_arr = np.zeros((nb, cin, hin, win), dtype=np.float64)
    dw_arr = np.zeros((nf, cin, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, :, :, ::1] dw = dw_arr
    with nogil:
        # dw[f, c, i, j] accumulates over (n, oh, ow) in ascending order
        for n in range(nb):
            for f in range(nf):
                for c in range(cin):
                    for i in range(kh):
                        for j in range(kw):
                            acc = dw[f, c, i, j]
                            for oh in range(ho):
                                for ow in range(wo):
                                    acc = acc + dout[n, f, oh, ow] * x[n, c, oh * stride + i, ow * stride + j]
                            dw[f, c, i, j] = acc
        # dx accumulates over (f, oh, ow) in ascending order; j runs backwards so
        # that ow ascends for a fixed input column
        for n in range(nb):
            for c in range(cin):
                for f in range(nf):
                    for oh in range(ho):
                        for i in range(kh):
                            for j in range(kw - 1, -1, -1):
                                wv = w[f, c, i, j]
                                for ow in range(wo):
                                    dx[n, c, oh * stride + i, ow * stride + j] += dout[n, f, oh, ow] * wv
    return dx_arr, dw_arr


def fake_quant(const double[::1] x, double scale, double qmin, double qmax):
    """Return (dequantized values, pass-through mask) for a flat array.

    Rounding is half away from zero, so round(v) < qmin exactly when
    v <= qmin - 0.5 and round(v) > qmax exactly when v >= qmax + 0.5.
    """
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, k, frac
    cdef double lo = qmin - 0.5, hi = qmax + 0.5
    q_arr = np.empty(n, dtype=np.float64)
    m_arr = np.empty(n, dtype=np.uint8)
    cdef double[::1] q = q_arr
    cdef unsigned char[::1] m = m_arr
    with nogil:
        for i in range(n):
            v = x[i] / scale
            if v <= lo:
                q[i] = qmin * scale
                m[i] = 0
            elif v >= hi:
                q[i] = qmax * scale
                m[i] = 0
            elif v != v:
                q[i] = v
                m[i] = 1
            else:
                # |v| is below 2^31 here, so the integer cast truncates exactly
                k = <double>(<long long>v)
                frac = v - k
                if frac >= 0.5:
                    k = k + 1.0
                elif frac <= -0.5:
                    k = k - 1.0
                q[i] = k * scale
                m[i] = 1
    return q_arr, m_arr.view(np.bool_)
