"""Pure numpy implementations of the compiled kernels (same signatures)."""
import numpy as np


def sor_solve(phi, kind, omega, tol, max_sweeps):
    ny, nx = phi.shape
    if kind.shape != phi.shape:
        raise ValueError("kind and phi shapes differ")
    inner = (slice(1, ny - 1), slice(1, nx - 1))
    solid = kind == 0
    solid_n = solid[:-2, 1:-1]
    solid_s = solid[2:, 1:-1]
    solid_e = solid[1:-1, 2:]
    solid_w = solid[1:-1, :-2]
    ii, jj = np.indices((ny - 2, nx - 2))
    parity = (ii + jj) % 2  # offsets by (1, 1) keep parity unchanged
    free = kind[inner] == 1
    masks = [free & (parity == color) for color in (0, 1)]

    sweep = 0
    maxd = 0.0
    while sweep < max_sweeps:
        maxd = 0.0
        for mask in masks:
            c = phi[inner]
            n = np.where(solid_n, c, phi[:-2, 1:-1])
            s = np.where(solid_s, c, phi[2:, 1:-1])
            e = np.where(solid_e, c, phi[1:-1, 2:])
            w = np.where(solid_w, c, phi[1:-1, :-2])
            acc = ((n + s) + e) + w
            new = c + omega * (acc * 0.25 - c)
            delta = np.abs(new - c)[mask]
            if delta.size:
                maxd = max(maxd, float(delta.max()))
            phi[inner] = np.where(mask, new, c)
        sweep += 1
        if maxd < tol:
            break
    return sweep, maxd


def dwconv_forward(xp, w, b, out):
    N, C, Ho, Wo = out.shape
    K = w.shape[1]
    out[...] = b[None, :, None, None]
    for ki in range(K):
        for kj in range(K):
            out += w[None, :, ki, kj, None, None] * xp[:, :, ki:ki + Ho, kj:kj + Wo]


def dwconv_backward(xp, w, g, gxp, gw):
    N, C, Ho, Wo = g.shape
    K = w.shape[1]
    g64 = g.astype(np.float64)
    for ki in range(K):
        for kj in range(K):
            window = xp[:, :, ki:ki + Ho, kj:kj + Wo]
            gw[:, ki, kj] = np.einsum("nchw,nchw->c", g64, window)
            gxp[:, :, ki:ki + Ho, kj:kj + Wo] += w[None, :, ki, kj, None, None] * g


def maxpool2_forward(x, out, arg):
    N, C, H, W = x.shape
    win = x.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // 2, W // 2, 4)
    idx = np.argmax(win, axis=-1)  # argmax returns the first maximum
    arg[...] = idx
    out[...] = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]


def maxpool2_backward(g, arg, gx):
    N, C, Ho, Wo = g.shape
    slots = np.zeros((N, C, Ho, Wo, 4), dtype=g.dtype)
    np.put_along_axis(slots, arg.astype(np.intp)[..., None], g[..., None], axis=-1)
    gx[...] = slots.reshape(N, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, 2 * Ho, 2 * Wo)
