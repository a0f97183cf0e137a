"""Compiled CPU kernels for the 3x3 depthwise convolution.

Every depthwise kernel accumulates the nine taps in row-major order (dy, dx)
so the dense and gathered variants produce bit-identical sums at shared
positions.
Loops parallelised with ``prange`` own their output rows exclusively; no
cross-iteration reductions happen, so results do not depend on thread count.
"""
import numba
import numpy as np
from numba import njit, prange

# the bundled TBB is too old for numba; avoid the warning and pick a portable pool
numba.config.THREADING_LAYER = "workqueue"

OUT_OF_BOUNDS = -1
INACTIVE = -2


@njit(cache=True)
def _pad_plane(src, buf):
    H, W = src.shape
    for h in range(H):
        for w in range(W):
            buf[h + 1, w + 1] = src[h, w]


@njit(parallel=True, cache=True)
def dw_forward(x, w, out):
    # zero-padded taps contribute exact zeros, so sums match the gathered kernel
    N, C, H, W = x.shape
    for nc in prange(N * C):
        n = nc // C
        c = nc % C
        xp = np.zeros((H + 2, W + 2), dtype=x.dtype)
        _pad_plane(x[n, c], xp)
        k = w[c]
        for h in range(H):
            for ww in range(W):
                acc = out[n, c, h, ww]
                for i in range(3):
                    for j in range(3):
                        acc += k[i, j] * xp[h + i, ww + j]
                out[n, c, h, ww] = acc


@njit(parallel=True, cache=True)
def dw_backward_input(gy, w, dx):
    # dx[h, w] = sum_{i,j} w[i, j] * gy[h - i + 1, w - j + 1]
    N, C, H, W = gy.shape
    for nc in prange(N * C):
        n = nc // C
        c = nc % C
        gp = np.zeros((H + 2, W + 2), dtype=gy.dtype)
        _pad_plane(gy[n, c], gp)
        k = w[c]
        for h in range(H):
            for ww in range(W):
                acc = dx[n, c, h, ww]
                for i in range(3):
                    for j in range(3):
                        acc += k[2 - i, 2 - j] * gp[h + i, ww + j]
                dx[n, c, h, ww] = acc


@njit(parallel=True, cache=True)
def dw_backward_weight(x, gy, dw):
    N, C, H, W = x.shape
    for c in prange(C):
        xp = np.zeros((H + 2, W + 2), dtype=x.dtype)
        rows = np.zeros((9, W), dtype=dw.dtype)
        for n in range(N):
            _pad_plane(x[n, c], xp)
            for h in range(H):
                for i in range(3):
                    for j in range(3):
                        k = 3 * i + j
                        for ww in range(W):
                            rows[k, ww] += gy[n, c, h, ww] * xp[h + i, ww + j]
        for k in range(9):
            acc = dw[c, k // 3, k % 3]
            for ww in range(W):
                acc += rows[k, ww]
            dw[c, k // 3, k % 3] = acc


@njit(parallel=True, cache=True, fastmath=True)
def bn_train_forward(x, gamma, beta, eps, out, xhat, mean, var):
    """Batch statistics over (N, K) for x of shape (N, C, K); float64 accumulators."""
    N, C, K = x.shape
    m = N * K
    for c in prange(C):
        s = 0.0
        for n in range(N):
            row = x[n, c]
            for k in range(K):
                s += row[k]
        mu = s / m
        q = 0.0
        for n in range(N):
            row = x[n, c]
            for k in range(K):
                d = row[k] - mu
                q += d * d
        v = q / m
        mean[c] = mu
        var[c] = v
        inv = 1.0 / np.sqrt(v + eps)
        g = gamma[c]
        b = beta[c]
        for n in range(N):
            row = x[n, c]
            xr = xhat[n, c]
            orow = out[n, c]
            for k in range(K):
                xh = (row[k] - mu) * inv
                xr[k] = xh
                orow[k] = xh * g + b


@njit(parallel=True, cache=True, fastmath=True)
def bn_train_backward(g, xhat, gamma, inv, dx, dgamma, dbeta):
    N, C, K = g.shape
    m = N * K
    for c in prange(C):
        sg = 0.0
        sgx = 0.0
        for n in range(N):
            gr = g[n, c]
            xr = xhat[n, c]
            for k in range(K):
                sg += gr[k]
                sgx += gr[k] * xr[k]
        dbeta[c] = sg
        dgamma[c] = sgx
        scale = gamma[c] * inv[c] / m
        for n in range(N):
            gr = g[n, c]
            xr = xhat[n, c]
            dr = dx[n, c]
            for k in range(K):
                dr[k] = scale * (m * gr[k] - sg - xr[k] * sgx)


@njit(parallel=True, cache=True)
def dw_gathered(t, neighbors, rows, wt, out):
    """t: (P, C) gathered rows; wt: (9, C) taps; out: (Q, C) zero-initialised."""
    Q = rows.shape[0]
    C = t.shape[1]
    for q in prange(Q):
        r = rows[q]
        for k in range(9):
            s = neighbors[r, k]
            if s < 0:
                continue
            for c in range(C):
                out[q, c] += wt[k, c] * t[s, c]


@njit(parallel=True, cache=True)
def gather_rows(x, coords, out):
    P = coords.shape[0]
    C = x.shape[1]
    for p in prange(P):
        n = coords[p, 0]
        h = coords[p, 1]
        w = coords[p, 2]
        for c in range(C):
            out[p, c] = x[n, c, h, w]


@njit(parallel=True, cache=True)
def scatter_rows(t, coords, out, accumulate):
    P = coords.shape[0]
    C = t.shape[1]
    for p in prange(P):
        n = coords[p, 0]
        h = coords[p, 1]
        w = coords[p, 2]
        if accumulate:
            for c in range(C):
                out[n, c, h, w] += t[p, c]
        else:
            for c in range(C):
                out[n, c, h, w] = t[p, c]


@njit(cache=True)
def build_index(mask, inverse, coords, neighbors):
    """Fill row-major coordinates, the inverse map and the 3x3 neighbour table.

    ``inverse`` must arrive filled with INACTIVE.
    """
    N, H, W = mask.shape
    p = 0
    for n in range(N):
        for h in range(H):
            for w in range(W):
                if mask[n, h, w]:
                    inverse[n, h, w] = p
                    coords[p, 0] = n
                    coords[p, 1] = h
                    coords[p, 2] = w
                    p += 1
    for q in range(p):
        n = coords[q, 0]
        h = coords[q, 1]
        w = coords[q, 2]
        k = 0
        for i in range(3):
            hh = h + i - 1
            for j in range(3):
                ww = w + j - 1
                if hh < 0 or hh >= H or ww < 0 or ww >= W:
                    neighbors[q, k] = OUT_OF_BOUNDS
                else:
                    neighbors[q, k] = inverse[n, hh, ww]
                k += 1
