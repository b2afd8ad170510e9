# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.

Every routine here has a numpy twin in ``_fallback.py`` with the same
signature. Where the twin is bit-identical (SOR, depthwise forward, maxpool)
the floating point operations are performed in the same order.
"""
from libc.math cimport fabs

ctypedef fused real:
    float
    double


def sor_solve(double[:, ::1] phi, const signed char[:, ::1] kind, double omega,
              double tol, long max_sweeps):
    """Red-black SOR on ``phi`` in place.

    ``kind`` is 0 for solid (mirror) cells, 1 for free cells and 2 for fixed
    (Dirichlet) cells. Free cells must not touch the array border.
    Returns ``(sweeps, last_max_update)``.
    """
    cdef Py_ssize_t ny = phi.shape[0]
    cdef Py_ssize_t nx = phi.shape[1]
    cdef Py_ssize_t i, j, j0
    cdef int color
    cdef double c, n, s, e, w, acc, new, delta, maxd = 0.0
    cdef long sweep = 0
    if kind.shape[0] != ny or kind.shape[1] != nx:
        raise ValueError("kind and phi shapes differ")
    with nogil:
        while sweep < max_sweeps:
            maxd = 0.0
            for color in range(2):
                for i in range(1, ny - 1):
                    j0 = 1 + (i + 1 + color) % 2
                    for j in range(j0, nx - 1, 2):
                        if kind[i, j] != 1:
                            continue
                        c = phi[i, j]
                        n = phi[i - 1, j] if kind[i - 1, j] != 0 else c
                        s = phi[i + 1, j] if kind[i + 1, j] != 0 else c
                        e = phi[i, j + 1] if kind[i, j + 1] != 0 else c
                        w = phi[i, j - 1] if kind[i, j - 1] != 0 else c
                        acc = ((n + s) + e) + w
                        new = c + omega * (acc * 0.25 - c)
                        delta = fabs(new - c)
                        if delta > maxd:
                            maxd = delta
                        phi[i, j] = new
            sweep += 1
            if maxd < tol:
                break
    return sweep, maxd


def dwconv_forward(const real[:, :, :, ::1] xp, const real[:, :, ::1] w,
                   const real[::1] b, real[:, :, :, ::1] out):
    """Stride-1 depthwise correlation of padded input ``xp`` into ``out``."""
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t K = w.shape[1]
    cdef Py_ssize_t n, c, ki, kj, h, x
    cdef real wv, bv
    with nogil:
        for n in range(N):
            for c in range(C):
                bv = b[c]
                for h in range(Ho):
                    for x in range(Wo):
                        out[n, c, h, x] = bv
                for ki in range(K):
                    for kj in range(K):
                        wv = w[c, ki, kj]
                        for h in range(Ho):
                            for x in range(Wo):
                                out[n, c, h, x] = out[n, c, h, x] + wv * xp[n, c, h + ki, x + kj]


def dwconv_backward(const real[:, :, :, ::1] xp, const real[:, :, ::1] w,
                    const real[:, :, :, ::1] g, real[:, :, :, ::1] gxp, real[:, :, ::1] gw):
    """Gradients of ``dwconv_forward``; ``gxp`` must be zeroed by the caller."""
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t K = w.shape[1]
    cdef Py_ssize_t n, c, ki, kj, h, x, xe
    cdef real wv
    cdef double a0, a1, a2, a3
    with nogil:
        for c in range(C):
            for ki in range(K):
                for kj in range(K):
                    wv = w[c, ki, kj]
                    # four partial sums break the add latency chain
                    a0 = a1 = a2 = a3 = 0.0
                    xe = Wo - Wo % 4
                    for n in range(N):
                        for h in range(Ho):
                            for x in range(0, xe, 4):
                                a0 = a0 + g[n, c, h, x] * xp[n, c, h + ki, x + kj]
                                a1 = a1 + g[n, c, h, x + 1] * xp[n, c, h + ki, x + 1 + kj]
                                a2 = a2 + g[n, c, h, x + 2] * xp[n, c, h + ki, x + 2 + kj]
                                a3 = a3 + g[n, c, h, x + 3] * xp[n, c, h + ki, x + 3 + kj]
                            for x in range(xe, Wo):
                                a0 = a0 + g[n, c, h, x] * xp[n, c, h + ki, x + kj]
                            for x in range(Wo):
                                gxp[n, c, h + ki, x + kj] = gxp[n, c, h + ki, x + kj] + wv * g[n, c, h, x]
                    gw[c, ki, kj] = <real>((a0 + a1) + (a2 + a3))


def maxpool2_forward(const real[:, :, :, ::1] x, real[:, :, :, ::1] out,
                     signed char[:, :, :, ::1] arg):
    """2x2/2 max pooling; ``arg`` receives the window slot (row-major, first max wins)."""
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t n, c, h, q
    cdef real best, v
    cdef signed char k
    with nogil:
        for n in range(N):
            for c in range(C):
                for h in range(Ho):
                    for q in range(Wo):
                        best = x[n, c, 2 * h, 2 * q]
                        k = 0
                        v = x[n, c, 2 * h, 2 * q + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[n, c, 2 * h + 1, 2 * q]
                        if v > best:
                            best = v
                            k = 2
                        v = x[n, c, 2 * h + 1, 2 * q + 1]
                        if v > best:
                            best = v
                            k = 3
                        out[n, c, h, q] = best
                        arg[n, c, h, q] = k


def maxpool2_backward(const real[:, :, :, ::1] g, const signed char[:, :, :, ::1] arg,
                      real[:, :, :, ::1] gx):
    """Scatter ``g`` to the recorded window slots; ``gx`` is overwritten."""
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t n, c, h, q
    cdef signed char k
    gx[...] = 0
    with nogil:
        for n in range(N):
            for c in range(C):
                for h in range(Ho):
                    for q in range(Wo):
                        k = arg[n, c, h, q]
                        gx[n, c, 2 * h + (k >> 1), 2 * q + (k & 1)] = g[n, c, h, q]
