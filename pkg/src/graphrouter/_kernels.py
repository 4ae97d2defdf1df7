"""Loop kernels for edge-gated message passing.

Compiled with numba when it is importable; otherwise plain numpy versions with
the same results (up to summation order) are used. Both walk edges in index
order, so results are deterministic.
"""

from __future__ import annotations

import numpy as np

try:  # pragma: no cover - exercised implicitly
    import numba
except ImportError:  # pragma: no cover
    numba = None


def gated_forward_numpy(Y, src, dst, feat, A, a, inv):
    G = feat @ A + a
    R = G * Y[src]
    np.maximum(R, 0.0, out=R)
    out = np.zeros((inv.size, Y.shape[1]))
    np.add.at(out, dst, R)
    return out * inv[:, None]


def gated_backward_numpy(g, Y, src, dst, feat, A, a, inv):
    G = feat @ A + a
    Ys = Y[src]
    d = (g * inv[:, None])[dst] * (G * Ys > 0)
    dG = d * Ys
    dY = np.zeros_like(Y)
    np.add.at(dY, src, d * G)
    return dY, feat.T @ dG, dG.sum(axis=0)


if numba is not None:

    @numba.njit(cache=True, nogil=True)
    def _gated_forward(Y, src, dst, feat, A, a, inv):  # pragma: no cover - compiled
        H = Y.shape[1]
        out = np.zeros((inv.size, H))
        for e in range(src.size):
            s, t = src[e], dst[e]
            w0, w1 = feat[e, 0], feat[e, 1]
            for k in range(H):
                r = (w0 * A[0, k] + w1 * A[1, k] + a[k]) * Y[s, k]
                if r > 0.0:
                    out[t, k] += r
        for t in range(inv.size):
            for k in range(H):
                out[t, k] *= inv[t]
        return out

    @numba.njit(cache=True, nogil=True)
    def _gated_backward(g, Y, src, dst, feat, A, a, inv):  # pragma: no cover - compiled
        H = Y.shape[1]
        dY = np.zeros_like(Y)
        dA = np.zeros((2, H))
        da = np.zeros(H)
        for e in range(src.size):
            s, t = src[e], dst[e]
            w0, w1 = feat[e, 0], feat[e, 1]
            scale = inv[t]
            for k in range(H):
                gk = w0 * A[0, k] + w1 * A[1, k] + a[k]
                y = Y[s, k]
                if gk * y > 0.0:
                    d = g[t, k] * scale
                    dY[s, k] += d * gk
                    dy = d * y
                    dA[0, k] += dy * w0
                    dA[1, k] += dy * w1
                    da[k] += dy
        return dY, dA, da

    def gated_forward(Y, src, dst, feat, A, a, inv):
        return _gated_forward(Y, src, dst, feat, A, a, inv)

    def gated_backward(g, Y, src, dst, feat, A, a, inv):
        return _gated_backward(np.ascontiguousarray(g), Y, src, dst, feat, A, a, inv)

    COMPILED = True
else:  # pragma: no cover
    gated_forward = gated_forward_numpy
    gated_backward = gated_backward_numpy
    COMPILED = False
