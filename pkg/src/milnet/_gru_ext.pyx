# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled GRU recurrence scans.

Same contract as ``milnet._gru_py``; the per-step recurrent products go
through BLAS gemm from scipy, the gate arithmetic is plain C loops.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh
from scipy.linalg.cython_blas cimport sgemm, dgemm

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline void _gemm(bint ta, bint tb, int m, int n, int k,
                       real* a, int lda, real* b, int ldb,
                       real beta, real* c, int ldc) noexcept nogil:
    # row-major c[m, n] = op(a) @ op(b) + beta * c, via the column-major
    # identity c^T = op(b)^T op(a)^T
    cdef char cta = b'T' if ta else b'N'
    cdef char ctb = b'T' if tb else b'N'
    cdef real one = 1
    if real is float:
        sgemm(&ctb, &cta, &n, &m, &k, &one, b, &ldb, a, &lda, &beta, c, &ldc)
    else:
        dgemm(&ctb, &cta, &n, &m, &k, &one, b, &ldb, a, &lda, &beta, c, &ldc)


cdef inline real _sig(real x) noexcept nogil:
    if x >= 0:
        return 1 / (1 + exp(-x))
    cdef real e = exp(x)
    return e / (1 + e)


def _forward(real[:, :, ::1] xp, real[:, ::1] U, bint reverse,
             real[:, :, ::1] hs, real[:, :, ::1] zs, real[:, :, ::1] rs,
             real[:, :, ::1] cs, real[:, ::1] hu, real[:, ::1] rh,
             real[:, ::1] hc, real[:, ::1] zero):
    cdef int B = xp.shape[0]
    cdef int T = xp.shape[1]
    cdef int H = xp.shape[2] // 3
    cdef int step, s, b, j, ldh
    cdef real z, r, c, hp
    cdef real* hprev
    with nogil:
        for step in range(T):
            s = T - 1 - step if reverse else step
            if step == 0:
                hprev = &zero[0, 0]
                ldh = H
            else:
                hprev = &hs[0, s + 1 if reverse else s - 1, 0]
                ldh = T * H
            _gemm(0, 0, B, 2 * H, H, hprev, ldh, &U[0, 0], 3 * H,
                  <real>0, &hu[0, 0], 2 * H)
            for b in range(B):
                for j in range(H):
                    hp = hprev[b * ldh + j]
                    z = _sig(xp[b, s, j] + hu[b, j])
                    r = _sig(xp[b, s, H + j] + hu[b, H + j])
                    zs[b, s, j] = z
                    rs[b, s, j] = r
                    rh[b, j] = r * hp
            _gemm(0, 0, B, H, H, &rh[0, 0], H, &U[0, 2 * H], 3 * H,
                  <real>0, &hc[0, 0], H)
            for b in range(B):
                for j in range(H):
                    hp = hprev[b * ldh + j]
                    c = tanh(xp[b, s, 2 * H + j] + hc[b, j])
                    z = zs[b, s, j]
                    cs[b, s, j] = c
                    hs[b, s, j] = z * hp + (1 - z) * c


def _backward(real[:, :, ::1] dhs, real[:, ::1] U, real[:, :, ::1] hs,
              real[:, :, ::1] zs, real[:, :, ::1] rs, real[:, :, ::1] cs,
              bint reverse, real[:, :, ::1] dxp, real[:, ::1] dU,
              real[:, ::1] da, real[:, ::1] rh, real[:, ::1] drh,
              real[:, ::1] dhp, real[:, ::1] dz, real[:, ::1] zero):
    cdef int B = hs.shape[0]
    cdef int T = hs.shape[1]
    cdef int H = hs.shape[2]
    cdef int step, s, b, j, ldh
    cdef real z, r, c, hp, dh, dr
    cdef real* hprev
    with nogil:
        for step in range(T):
            # walk opposite to the forward scan
            s = step if reverse else T - 1 - step
            if step == T - 1:
                hprev = &zero[0, 0]
                ldh = H
            else:
                hprev = &hs[0, s + 1 if reverse else s - 1, 0]
                ldh = T * H
            for b in range(B):
                for j in range(H):
                    hp = hprev[b * ldh + j]
                    z = zs[b, s, j]
                    c = cs[b, s, j]
                    r = rs[b, s, j]
                    dh = dhs[b, s, j] + dhp[b, j]
                    dz[b, j] = dh * (hp - c)
                    da[b, 2 * H + j] = dh * (1 - z) * (1 - c * c)
                    dhp[b, j] = dh * z
                    rh[b, j] = r * hp
            _gemm(0, 1, B, H, H, &da[0, 2 * H], 3 * H, &U[0, 2 * H], 3 * H,
                  <real>0, &drh[0, 0], H)
            _gemm(1, 0, H, H, B, &rh[0, 0], H, &da[0, 2 * H], 3 * H,
                  <real>1, &dU[0, 2 * H], 3 * H)
            for b in range(B):
                for j in range(H):
                    hp = hprev[b * ldh + j]
                    z = zs[b, s, j]
                    r = rs[b, s, j]
                    dr = drh[b, j] * hp
                    dhp[b, j] += drh[b, j] * r
                    da[b, j] = dz[b, j] * z * (1 - z)
                    da[b, H + j] = dr * r * (1 - r)
            _gemm(0, 1, B, H, 2 * H, &da[0, 0], 3 * H, &U[0, 0], 3 * H,
                  <real>1, &dhp[0, 0], H)
            _gemm(1, 0, H, 2 * H, B, hprev, ldh, &da[0, 0], 3 * H,
                  <real>1, &dU[0, 0], 3 * H)
            for b in range(B):
                for j in range(3 * H):
                    dxp[b, s, j] = da[b, j]


def gru_forward_scan(xp, U, reverse=False):
    xp = np.ascontiguousarray(xp)
    U = np.ascontiguousarray(U, dtype=xp.dtype)
    b, t, h3 = xp.shape
    h = h3 // 3
    hs = np.empty((b, t, h), dtype=xp.dtype)
    zs = np.empty_like(hs)
    rs = np.empty_like(hs)
    cs = np.empty_like(hs)
    if t == 0:
        return hs, zs, rs, cs
    hu = np.empty((b, 2 * h), dtype=xp.dtype)
    rh = np.empty((b, h), dtype=xp.dtype)
    hc = np.empty((b, h), dtype=xp.dtype)
    zero = np.zeros((b, h), dtype=xp.dtype)
    _forward(xp, U, bool(reverse), hs, zs, rs, cs, hu, rh, hc, zero)
    return hs, zs, rs, cs


def gru_backward_scan(dhs, U, hs, zs, rs, cs, reverse=False):
    dt = hs.dtype
    dhs = np.ascontiguousarray(dhs, dtype=dt)
    U = np.ascontiguousarray(U, dtype=dt)
    hs = np.ascontiguousarray(hs)
    zs = np.ascontiguousarray(zs)
    rs = np.ascontiguousarray(rs)
    cs = np.ascontiguousarray(cs)
    b, t, h = hs.shape
    dxp = np.empty((b, t, 3 * h), dtype=dt)
    dU = np.zeros((h, 3 * h), dtype=dt)
    if t == 0:
        return dxp, dU
    da = np.empty((b, 3 * h), dtype=dt)
    rh = np.empty((b, h), dtype=dt)
    drh = np.empty((b, h), dtype=dt)
    dhp = np.zeros((b, h), dtype=dt)
    dz = np.empty((b, h), dtype=dt)
    zero = np.zeros((b, h), dtype=dt)
    _backward(dhs, U, hs, zs, rs, cs, bool(reverse), dxp, dU, da, rh, drh,
              dhp, dz, zero)
    return dxp, dU
