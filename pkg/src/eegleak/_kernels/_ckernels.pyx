# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for 1-D convolution and threshold sweeps.

Every function here has a numpy twin in ``fallback.py`` with identical
semantics; ``eegleak._kernels`` picks one at import time.
"""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _mm(char ta, char tb, int m, int n, int k, const double *A, int lda,
              const double *B, int ldb, double beta, double *C, int ldc) noexcept nogil:
    # row-major C[m, n] = op(A) @ op(B) + beta * C, via column-major dgemm on the transposes
    cdef double one = 1.0
    dgemm(&tb, &ta, &n, &m, &k, &one, <double *>B, &ldb, <double *>A, &lda, &beta, C, &ldc)


cdef void _im2col(const double *xn, Py_ssize_t C, Py_ssize_t L, Py_ssize_t K,
                  Py_ssize_t stride, Py_ssize_t Lout, double *cols) noexcept nogil:
    # cols[c*K + k, l] = x[c, l*stride + k]
    cdef Py_ssize_t c, k, l
    cdef const double *src
    cdef double *dst
    for c in range(C):
        for k in range(K):
            src = xn + c * L + k
            dst = cols + (c * K + k) * Lout
            for l in range(Lout):
                dst[l] = src[l * stride]


def conv1d_forward(const double[:, :, ::1] x, const double[:, :, ::1] w,
                   const double[::1] b, Py_ssize_t stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t O = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Lout = (L - K) // stride + 1
    cdef Py_ssize_t n, o, l
    out = np.empty((B, O, max(Lout, 0)), dtype=np.float64)
    if Lout <= 0 or B == 0:
        return out
    cdef double[:, :, ::1] y = out
    cdef double[:, ::1] cols = np.empty((C * K, Lout), dtype=np.float64)
    cdef double *yn
    with nogil:
        for n in range(B):
            _im2col(&x[n, 0, 0], C, L, K, stride, Lout, &cols[0, 0])
            yn = &y[n, 0, 0]
            for o in range(O):
                for l in range(Lout):
                    yn[o * Lout + l] = b[o]
            _mm(b'N', b'N', <int>O, <int>Lout, <int>(C * K), &w[0, 0, 0], <int>(C * K),
                &cols[0, 0], <int>Lout, 1.0, yn, <int>Lout)
    return out


def conv1d_backward(const double[:, :, ::1] x, const double[:, :, ::1] w,
                    const double[:, :, ::1] dy, Py_ssize_t stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t O = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Lout = dy.shape[2]
    cdef Py_ssize_t n, o, c, k, l
    cdef double acc
    cdef const double *src
    cdef double *dst
    dx_arr = np.zeros((B, C, L), dtype=np.float64)
    dw_arr = np.zeros((O, C, K), dtype=np.float64)
    db_arr = np.zeros(O, dtype=np.float64)
    if Lout <= 0 or B == 0:
        return dx_arr, dw_arr, db_arr
    cdef double[:, :, ::1] dx = dx_arr
    cdef double[:, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef double[:, ::1] cols = np.empty((C * K, Lout), dtype=np.float64)
    cdef double[:, ::1] dcols = np.empty((C * K, Lout), dtype=np.float64)
    with nogil:
        for n in range(B):
            for o in range(O):
                acc = 0.0
                for l in range(Lout):
                    acc += dy[n, o, l]
                db[o] += acc
            _im2col(&x[n, 0, 0], C, L, K, stride, Lout, &cols[0, 0])
            # dW[O, CK] += dY[O, Lout] @ cols[CK, Lout]^T
            _mm(b'N', b'T', <int>O, <int>(C * K), <int>Lout, &dy[n, 0, 0], <int>Lout,
                &cols[0, 0], <int>Lout, 1.0, &dw[0, 0, 0], <int>(C * K))
            # dcols[CK, Lout] = W[O, CK]^T @ dY[O, Lout]
            _mm(b'T', b'N', <int>(C * K), <int>Lout, <int>O, &w[0, 0, 0], <int>(C * K),
                &dy[n, 0, 0], <int>Lout, 0.0, &dcols[0, 0], <int>Lout)
            for c in range(C):
                for k in range(K):
                    src = &dcols[c * K + k, 0]
                    dst = &dx[n, c, k]
                    for l in range(Lout):
                        dst[l * stride] += src[l]
    return dx_arr, dw_arr, db_arr


def roc_auc_sorted(const double[::1] s, const long[::1] y):
    """AUC from scores sorted ascending with matching 0/1 labels.

    Ties contribute one half per (positive, negative) pair.
    """
    cdef Py_ssize_t n = s.shape[0], i = 0, j
    cdef double npos = 0.0, nneg = 0.0, num = 0.0
    cdef double gpos, gneg
    while i < n:
        j = i
        gpos = 0.0
        gneg = 0.0
        while j < n and s[j] == s[i]:
            if y[j] == 1:
                gpos += 1.0
            else:
                gneg += 1.0
            j += 1
        num += gpos * nneg + 0.5 * gpos * gneg
        npos += gpos
        nneg += gneg
        i = j
    return num / (npos * nneg)


def sens_at_spec_sorted(const double[::1] s, const long[::1] y, double spec_min):
    """Max sensitivity over ``score >= t`` rules with specificity >= spec_min.

    ``s`` must be sorted descending.
    """
    cdef Py_ssize_t n = s.shape[0], i = 0, j
    cdef long npos = 0, nneg = 0, tp = 0, fp = 0
    cdef double best = 0.0, sens
    for i in range(n):
        if y[i] == 1:
            npos += 1
        else:
            nneg += 1
    i = 0
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            if y[j] == 1:
                tp += 1
            else:
                fp += 1
            j += 1
        if <double>(nneg - fp) / <double>nneg >= spec_min:
            sens = <double>tp / <double>npos
            if sens > best:
                best = sens
        i = j
    return best
