# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused C kernels for local training and conflict analysis.

Contracts match kernels_numpy exactly (same signatures, same conventions);
summations run in a fixed index order, so results are bit-stable from run
to run. Backend-to-backend differences stay within float rounding.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh

cnp.import_array()

BACKEND = "compiled"

RELU = 0
TANH = 1

ZERO_NORM_TOL = 1e-12

cdef double _ZERO_TOL = 1e-12
cdef int _RELU = 0


cdef void _affine(const double[:, ::1] a, const double[:, ::1] w,
                  const double[::1] b, double[:, ::1] out) noexcept nogil:
    # out = a @ w + b, accumulated in ascending k order
    cdef Py_ssize_t i, j, k
    cdef Py_ssize_t n = a.shape[0], d = a.shape[1], h = w.shape[1]
    cdef double av
    for i in range(n):
        for j in range(h):
            out[i, j] = b[j]
        for k in range(d):
            av = a[i, k]
            for j in range(h):
                out[i, j] += av * w[k, j]


cdef void _act_inplace(double[:, ::1] z, int act) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            if act == _RELU:
                if z[i, j] < 0.0:
                    z[i, j] = 0.0
            else:
                z[i, j] = tanh(z[i, j])


cdef double _softmax_delta(const double[:, ::1] logits, const cnp.int64_t[::1] y,
                           double[:, ::1] delta) noexcept nogil:
    # delta = (softmax(logits) - onehot(y)) / n; returns mean cross-entropy
    cdef Py_ssize_t i, j
    cdef Py_ssize_t n = logits.shape[0], c = logits.shape[1]
    cdef double m, s, loss = 0.0
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(c):
            delta[i, j] = exp(logits[i, j] - m)
            s += delta[i, j]
        loss += m + log(s) - logits[i, y[i]]
        for j in range(c):
            delta[i, j] /= s
        delta[i, y[i]] -= 1.0
        for j in range(c):
            delta[i, j] /= n
    return loss / n


cdef void _atb(const double[:, ::1] a, const double[:, ::1] d,
               double[:, ::1] out) noexcept nogil:
    # out = a.T @ d, accumulated in ascending batch order
    cdef Py_ssize_t i, j, k
    cdef Py_ssize_t n = a.shape[0], p = a.shape[1], h = d.shape[1]
    cdef double av
    for k in range(p):
        for j in range(h):
            out[k, j] = 0.0
    for i in range(n):
        for k in range(p):
            av = a[i, k]
            for j in range(h):
                out[k, j] += av * d[i, j]


cdef void _colsum(const double[:, ::1] d, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, j
    for j in range(d.shape[1]):
        out[j] = 0.0
    for i in range(d.shape[0]):
        for j in range(d.shape[1]):
            out[j] += d[i, j]


cdef void _abt(const double[:, ::1] d, const double[:, ::1] w,
               double[:, ::1] out) noexcept nogil:
    # out = d @ w.T
    cdef Py_ssize_t i, j, k
    cdef Py_ssize_t n = d.shape[0], h = d.shape[1], p = w.shape[0]
    cdef double s
    for i in range(n):
        for k in range(p):
            s = 0.0
            for j in range(h):
                s += d[i, j] * w[k, j]
            out[i, k] = s


cdef void _mask_backward(double[:, ::1] da, const double[:, ::1] z,
                         int act) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double t
    for i in range(da.shape[0]):
        for j in range(da.shape[1]):
            if act == _RELU:
                if z[i, j] <= 0.0:
                    da[i, j] = 0.0
            else:
                t = tanh(z[i, j])
                da[i, j] *= 1.0 - t * t


def forward_logits(x, weights, biases, int act):
    """Logits of an MLP: affine maps with `act` between them, linear output."""
    cdef Py_ssize_t n = len(weights), j
    a = np.ascontiguousarray(x, dtype=np.float64)
    for j in range(n):
        w = weights[j]
        b = biases[j]
        out = np.empty((a.shape[0], w.shape[1]), dtype=np.float64)
        _affine(a, w, b, out)
        if j < n - 1:
            _act_inplace(out, act)
        a = out
    return a


def loss_from_logits(logits, y):
    """Mean softmax cross-entropy, log-sum-exp stabilized."""
    cdef const double[:, ::1] lg = np.ascontiguousarray(logits, dtype=np.float64)
    cdef const cnp.int64_t[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef Py_ssize_t i, j
    cdef Py_ssize_t n = lg.shape[0], c = lg.shape[1]
    cdef double m, s, loss = 0.0
    for i in range(n):
        m = lg[i, 0]
        for j in range(1, c):
            if lg[i, j] > m:
                m = lg[i, j]
        s = 0.0
        for j in range(c):
            s += exp(lg[i, j] - m)
        loss += m + log(s) - lg[i, yv[i]]
    return loss / n


def grads(x, y, weights, biases, int act):
    """Mean cross-entropy and its exact gradients for every affine map.

    Returns (loss, [dW...], [db...]) with dW[j] shaped like weights[j].
    """
    cdef Py_ssize_t n = len(weights), j
    cdef double loss
    xs = np.ascontiguousarray(x, dtype=np.float64)
    yv = np.ascontiguousarray(y, dtype=np.int64)
    acts = [xs]
    zs = []
    a = xs
    for j in range(n):
        w = weights[j]
        z = np.empty((a.shape[0], w.shape[1]), dtype=np.float64)
        _affine(a, w, biases[j], z)
        zs.append(z)
        if j < n - 1:
            h = z.copy()
            _act_inplace(h, act)
            acts.append(h)
            a = h
    logits = zs[n - 1]
    delta = np.empty_like(logits)
    loss = _softmax_delta(logits, yv, delta)
    gw = [None] * n
    gb = [None] * n
    for j in range(n - 1, -1, -1):
        w = weights[j]
        gwj = np.empty((w.shape[0], w.shape[1]), dtype=np.float64)
        gbj = np.empty(w.shape[1], dtype=np.float64)
        _atb(acts[j], delta, gwj)
        _colsum(delta, gbj)
        gw[j] = gwj
        gb[j] = gbj
        if j > 0:
            da = np.empty((delta.shape[0], w.shape[0]), dtype=np.float64)
            _abt(delta, w, da)
            _mask_backward(da, zs[j - 1], act)
            delta = da
    return loss, gw, gb


def cosine_matrix(rows):
    """Pairwise cosines of the rows of a (U, D) matrix.

    Rows with norm below ZERO_NORM_TOL get cosine 0 against everything,
    themselves included. Values are clipped to [-1, 1].
    """
    cdef const double[:, ::1] m = np.ascontiguousarray(rows, dtype=np.float64)
    cdef Py_ssize_t u = m.shape[0], d = m.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double s
    mn_arr = np.zeros((u, d), dtype=np.float64)
    out_arr = np.zeros((u, u), dtype=np.float64)
    cdef double[:, ::1] mn = mn_arr
    cdef double[:, ::1] out = out_arr
    cdef double[::1] norms = np.empty(u, dtype=np.float64)
    with nogil:
        for i in range(u):
            s = 0.0
            for k in range(d):
                s += m[i, k] * m[i, k]
            norms[i] = sqrt(s)
            if norms[i] >= _ZERO_TOL:
                for k in range(d):
                    mn[i, k] = m[i, k] / norms[i]
        for i in range(u):
            for j in range(u):
                s = 0.0
                for k in range(d):
                    s += mn[i, k] * mn[j, k]
                if s > 1.0:
                    s = 1.0
                elif s < -1.0:
                    s = -1.0
                out[i, j] = s
    return out_arr
