# cython: language_level=3
"""Compiled scan kernels; same contract as ``chrnn._scan_py``.

The recurrence is inherently sequential over grid cells, so the loop over
cells runs in C and each cell's batched predecessor products go straight
to BLAS (``scipy.linalg.cython_blas``) without re-entering Python.
"""
import numpy as np

from libc.math cimport exp
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused real:
    float
    double


cdef inline void gemm_nt(int m, int n, int k, real* A, real* W, real* out) noexcept nogil:
    # out[m, n] += A[m, k] @ W[n, k].T   (all row-major)
    cdef char ta = b'T'
    cdef char tb = b'N'
    cdef real one = 1
    if real is float:
        sgemm(&ta, &tb, &n, &m, &k, &one, W, &k, A, &k, &one, out, &n)
    else:
        dgemm(&ta, &tb, &n, &m, &k, &one, W, &k, A, &k, &one, out, &n)


cdef inline void gemm_nn(int m, int n, int k, real* D, real* W, real* out) noexcept nogil:
    # out[m, k] += D[m, n] @ W[n, k]
    cdef char ta = b'N'
    cdef char tb = b'N'
    cdef real one = 1
    if real is float:
        sgemm(&ta, &tb, &k, &m, &n, &one, W, &k, D, &n, &one, out, &k)
    else:
        dgemm(&ta, &tb, &k, &m, &n, &one, W, &k, D, &n, &one, out, &k)


cdef union f32bits:
    float f
    int i


cdef inline float _expf(float x) noexcept nogil:
    # branch-free single-precision exp (Cody-Waite reduction, degree-6
    # polynomial, about 2 ulp) so the gate loops auto-vectorize; libm expf
    # is an opaque call that blocks it. NaN propagates through the clamps.
    cdef float n, r, p
    cdef f32bits e
    if x > 88.0:
        x = 88.0
    if x < -87.0:
        x = -87.0
    n = (x * <float>1.44269504088896341 + <float>12582912.0) - <float>12582912.0
    r = x - n * <float>0.693359375
    r = r + n * <float>2.12194440e-4
    p = <float>1.9875691500e-4
    p = p * r + <float>1.3981999507e-3
    p = p * r + <float>8.3334519073e-3
    p = p * r + <float>4.1665795894e-2
    p = p * r + <float>1.6666665459e-1
    p = p * r + <float>5.0000001201e-1
    p = p * r * r + r + 1
    e.i = (<int>n + 127) << 23
    return p * e.f


cdef inline real _exp(real x) noexcept nogil:
    if real is float:
        return _expf(x)
    else:
        return exp(x)


# exp-based forms; both saturate to the right limits
cdef inline real _sigmoid(real x) noexcept nogil:
    return <real>1 / (<real>1 + _exp(-x))


cdef inline real _tanh(real x) noexcept nogil:
    return <real>1 - <real>2 / (<real>1 + _exp(<real>2 * x))


def srn_forward(real[:, :, :, ::1] pre, real[:, ::1] W_row, real[:, ::1] W_col):
    cdef Py_ssize_t R = pre.shape[0], C = pre.shape[1]
    cdef int B = <int>pre.shape[2], H = <int>pre.shape[3]
    cdef Py_ssize_t r, c, n, cell = B * H
    h_arr = np.empty_like(np.asarray(pre))
    cdef real[:, :, :, ::1] h = h_arr
    cdef real* z
    with nogil:
        for r in range(R):
            for c in range(C):
                z = &h[r, c, 0, 0]
                memcpy(z, &pre[r, c, 0, 0], cell * sizeof(real))
                if r > 0:
                    gemm_nt(B, H, H, &h[r - 1, c, 0, 0], &W_row[0, 0], z)
                if c > 0:
                    gemm_nt(B, H, H, &h[r, c - 1, 0, 0], &W_col[0, 0], z)
                for n in range(cell):
                    # unconditional select store: vectorizes, and NaN propagates like np.maximum
                    z[n] = 0 if z[n] < 0 else z[n]
    return h_arr


def srn_backward(real[:, :, :, ::1] dh, real[:, :, :, ::1] h, real[:, ::1] W_row, real[:, ::1] W_col):
    cdef Py_ssize_t R = h.shape[0], C = h.shape[1]
    cdef int B = <int>h.shape[2], H = <int>h.shape[3]
    cdef Py_ssize_t r, c, n, cell = B * H
    g_arr = np.array(dh, copy=True)
    cdef real[:, :, :, ::1] g = g_arr
    cdef real* gz
    cdef real* hz
    with nogil:
        for r in range(R - 1, -1, -1):
            for c in range(C - 1, -1, -1):
                gz = &g[r, c, 0, 0]
                hz = &h[r, c, 0, 0]
                for n in range(cell):
                    gz[n] = gz[n] if hz[n] > 0 else 0
                if r > 0:
                    gemm_nn(B, H, H, gz, &W_row[0, 0], &g[r - 1, c, 0, 0])
                if c > 0:
                    gemm_nn(B, H, H, gz, &W_col[0, 0], &g[r, c - 1, 0, 0])
    return g_arr


def lstm_forward(real[:, :, :, ::1] pre, real[:, ::1] W_row, real[:, ::1] W_col):
    cdef Py_ssize_t R = pre.shape[0], C = pre.shape[1]
    cdef int B = <int>pre.shape[2], G = <int>pre.shape[3]
    cdef int H = G // 4
    cdef Py_ssize_t r, c, b, k
    dtype = np.asarray(pre).dtype
    h_arr = np.zeros((R, C, B, H), dtype=dtype)
    m_arr = np.zeros((R, C, B, H), dtype=dtype)
    a_arr = np.empty((R, C, B, G), dtype=dtype)
    cdef real[:, :, :, ::1] h = h_arr
    cdef real[:, :, :, ::1] mem = m_arr
    cdef real[:, :, :, ::1] act = a_arr
    cdef real* z
    cdef real* a
    cdef real* mz
    cdef real* hz
    cdef real* src
    cdef Py_ssize_t n, cell = B * H
    with nogil:
        for r in range(R):
            for c in range(C):
                z = &act[r, c, 0, 0]
                memcpy(z, &pre[r, c, 0, 0], B * G * sizeof(real))
                if r > 0:
                    gemm_nt(B, G, H, &h[r - 1, c, 0, 0], &W_row[0, 0], z)
                if c > 0:
                    gemm_nt(B, G, H, &h[r, c - 1, 0, 0], &W_col[0, 0], z)
                # separate straight-line passes so each inner loop vectorizes
                for b in range(B):
                    a = z + b * G
                    for k in range(3 * H):
                        a[k] = _sigmoid(a[k])
                    for k in range(3 * H, G):
                        a[k] = _tanh(a[k])
                mz = &mem[r, c, 0, 0]   # zero-initialized: accumulate predecessor memories
                if r > 0:
                    src = &mem[r - 1, c, 0, 0]
                    for n in range(cell):
                        mz[n] = mz[n] + src[n]
                if c > 0:
                    src = &mem[r, c - 1, 0, 0]
                    for n in range(cell):
                        mz[n] = mz[n] + src[n]
                hz = &h[r, c, 0, 0]
                for b in range(B):
                    a = z + b * G
                    for k in range(H):
                        n = b * H + k
                        mz[n] = a[H + k] * mz[n] + a[k] * a[3 * H + k]
                        hz[n] = a[2 * H + k] * _tanh(mz[n])
    return h_arr, m_arr, a_arr


def lstm_backward(real[:, :, :, ::1] dh, real[:, :, :, ::1] h, real[:, :, :, ::1] mem,
                  real[:, :, :, ::1] gates, real[:, ::1] W_row, real[:, ::1] W_col):
    cdef Py_ssize_t R = h.shape[0], C = h.shape[1]
    cdef int B = <int>h.shape[2], H = <int>h.shape[3]
    cdef int G = 4 * H
    cdef Py_ssize_t r, c, b, k
    dtype = np.asarray(h).dtype
    dh_arr = np.array(dh, copy=True)
    dc_arr = np.zeros((R, C, B, H), dtype=dtype)
    dz_arr = np.empty((R, C, B, G), dtype=dtype)
    cdef real[:, :, :, ::1] dha = dh_arr
    cdef real[:, :, :, ::1] dca = dc_arr
    cdef real[:, :, :, ::1] dz = dz_arr
    cp_arr = np.empty((B, H), dtype=dtype)
    dcp_arr = np.empty((B, H), dtype=dtype)
    cdef real[:, ::1] cpv = cp_arr
    cdef real[:, ::1] dcpv = dcp_arr
    cdef real* cp = &cpv[0, 0]
    cdef real* dcp = &dcpv[0, 0]
    cdef real* a
    cdef real* d
    cdef real* src
    cdef real* mz
    cdef real* dcz
    cdef real* dhz
    cdef Py_ssize_t n, cell = B * H
    cdef real ig, fg, og, gg, tc, dhv, dcv
    with nogil:
        for r in range(R - 1, -1, -1):
            for c in range(C - 1, -1, -1):
                for n in range(cell):
                    cp[n] = 0
                if r > 0:
                    src = &mem[r - 1, c, 0, 0]
                    for n in range(cell):
                        cp[n] = cp[n] + src[n]
                if c > 0:
                    src = &mem[r, c - 1, 0, 0]
                    for n in range(cell):
                        cp[n] = cp[n] + src[n]
                mz = &mem[r, c, 0, 0]
                dcz = &dca[r, c, 0, 0]
                dhz = &dha[r, c, 0, 0]
                for b in range(B):
                    a = &gates[r, c, b, 0]
                    d = &dz[r, c, b, 0]
                    for k in range(H):
                        n = b * H + k
                        ig = a[k]
                        fg = a[H + k]
                        og = a[2 * H + k]
                        gg = a[3 * H + k]
                        tc = _tanh(mz[n])
                        dhv = dhz[n]
                        dcv = dcz[n] + dhv * og * (1 - tc * tc)
                        d[k] = dcv * gg * ig * (1 - ig)
                        d[H + k] = dcv * cp[n] * fg * (1 - fg)
                        d[2 * H + k] = dhv * tc * og * (1 - og)
                        d[3 * H + k] = dcv * ig * (1 - gg * gg)
                        dcp[n] = dcv * fg
                if r > 0:
                    src = &dca[r - 1, c, 0, 0]
                    for n in range(cell):
                        src[n] += dcp[n]
                    gemm_nn(B, G, H, &dz[r, c, 0, 0], &W_row[0, 0], &dha[r - 1, c, 0, 0])
                if c > 0:
                    src = &dca[r, c - 1, 0, 0]
                    for n in range(cell):
                        src[n] += dcp[n]
                    gemm_nn(B, G, H, &dz[r, c, 0, 0], &W_col[0, 0], &dha[r, c - 1, 0, 0])
    return dz_arr
