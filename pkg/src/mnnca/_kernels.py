"""Hot inner loops: depthwise circular stencils and lattice gradient noise.

Each kernel has a numba ``@njit`` implementation and a pure-numpy twin. The
active path is chosen once at import from ``MNNCA_NUMBA`` ("0" forces numpy).
Both paths compute every output element independently, so results do not
depend on the thread count.
"""
import os

import numpy as np

# the bundled TBB is too old for numba; pick the portable workqueue layer
# unless the user chose one explicitly
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    import numba
    from numba import njit, prange
    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("MNNCA_NUMBA", "1") != "0"


def set_threads(n):
    """Cap numba worker threads (no-op on the numpy path)."""
    if HAS_NUMBA and n is not None:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# depthwise circular convolution
#   x: (B, C, H, W); w: (C*M, kh, kw); output channel c*M + m reads input c.
#   out[b, o, y, x] = sum_t w[o, ty, tx] * x[b, o // M, y + (ty-ry)*d, x + (tx-rx)*d]
# ---------------------------------------------------------------------------

def _np_dw_forward(x, w, dil):
    B, C, H, W = x.shape
    O, kh, kw = w.shape
    M = O // C
    xr = np.repeat(x, M, axis=1) if M > 1 else x
    out = np.zeros((B, O, H, W), dtype=x.dtype)
    ry, rx = kh // 2, kw // 2
    for ty in range(kh):
        for tx in range(kw):
            oy, ox = (ty - ry) * dil, (tx - rx) * dil
            tap = w[:, ty, tx][None, :, None, None]
            out += tap * np.roll(xr, (-oy, -ox), axis=(2, 3))
    return out


def _np_dw_backward_input(g, w, dil, C):
    B, O, H, W = g.shape
    _, kh, kw = w.shape
    M = O // C
    acc = np.zeros((B, O, H, W), dtype=g.dtype)
    ry, rx = kh // 2, kw // 2
    for ty in range(kh):
        for tx in range(kw):
            oy, ox = (ty - ry) * dil, (tx - rx) * dil
            tap = w[:, ty, tx][None, :, None, None]
            acc += tap * np.roll(g, (oy, ox), axis=(2, 3))
    if M > 1:
        acc = acc.reshape(B, C, M, H, W).sum(axis=2)
    return acc


def _np_dw_backward_weight(g, x, dil, kh, kw):
    B, O, H, W = g.shape
    C = x.shape[1]
    M = O // C
    xr = np.repeat(x, M, axis=1) if M > 1 else x
    gw = np.zeros((O, kh, kw), dtype=g.dtype)
    ry, rx = kh // 2, kw // 2
    for ty in range(kh):
        for tx in range(kw):
            oy, ox = (ty - ry) * dil, (tx - rx) * dil
            gw[:, ty, tx] = (g * np.roll(xr, (-oy, -ox), axis=(2, 3))).sum(axis=(0, 2, 3))
    return gw


if HAS_NUMBA:

    @njit(cache=True)
    def _wrap_pad(plane, p):
        H, W = plane.shape
        out = np.empty((H + 2 * p, W + 2 * p), dtype=plane.dtype)
        if p <= H and p <= W:
            out[p:p + H, p:p + W] = plane
            out[p:p + H, :p] = plane[:, W - p:]
            out[p:p + H, p + W:] = plane[:, :p]
            out[:p, :] = out[H:H + p, :]
            out[p + H:, :] = out[p:2 * p, :]
        else:
            for y in range(H + 2 * p):
                sy = (y - p) % H
                for x in range(W + 2 * p):
                    out[y, x] = plane[sy, (x - p) % W]
        return out

    @njit(cache=True)
    def _accumulate_tap(dst, pad, wt, oy, ox):
        H, W = dst.shape
        for y in range(H):
            row = pad[y + oy, ox:ox + W]
            d = dst[y]
            for xx in range(W):
                d[xx] += wt * row[xx]

    @njit(parallel=True, cache=True)
    def _nb_dw_forward(x, w, dil):
        B, C, H, W = x.shape
        O, kh, kw = w.shape
        M = O // C
        ry = kh // 2
        rx = kw // 2
        p = max(ry, rx) * dil
        out = np.zeros((B, O, H, W), dtype=x.dtype)
        for bo in prange(B * O):
            b = bo // O
            o = bo % O
            pad = _wrap_pad(x[b, o // M], p)
            for ty in range(kh):
                oy = p + (ty - ry) * dil
                for tx in range(kw):
                    wt = w[o, ty, tx]
                    if wt == 0:
                        continue
                    ox = p + (tx - rx) * dil
                    _accumulate_tap(out[b, o], pad, wt, oy, ox)
        return out

    @njit(parallel=True, cache=True)
    def _nb_dw_backward_input(g, w, dil, C):
        B, O, H, W = g.shape
        _, kh, kw = w.shape
        M = O // C
        ry = kh // 2
        rx = kw // 2
        p = max(ry, rx) * dil
        gx = np.zeros((B, C, H, W), dtype=g.dtype)
        for bc in prange(B * C):
            b = bc // C
            c = bc % C
            for m in range(M):
                o = c * M + m
                pad = _wrap_pad(g[b, o], p)
                for ty in range(kh):
                    oy = p - (ty - ry) * dil
                    for tx in range(kw):
                        wt = w[o, ty, tx]
                        if wt == 0:
                            continue
                        ox = p - (tx - rx) * dil
                        _accumulate_tap(gx[b, c], pad, wt, oy, ox)
        return gx

    @njit(parallel=True, cache=True)
    def _nb_dw_backward_weight(g, x, dil, kh, kw):
        B, O, H, W = g.shape
        C = x.shape[1]
        M = O // C
        ry = kh // 2
        rx = kw // 2
        p = max(ry, rx) * dil
        gw = np.zeros((O, kh, kw), dtype=g.dtype)
        for o in prange(O):
            # per-column float64 partial sums: fixed order, and the row loop vectorizes
            acc = np.zeros((kh, kw, W), dtype=np.float64)
            for b in range(B):
                pad = _wrap_pad(x[b, o // M], p)
                for ty in range(kh):
                    oy = p + (ty - ry) * dil
                    for tx in range(kw):
                        ox = p + (tx - rx) * dil
                        a = acc[ty, tx]
                        for y in range(H):
                            grow = g[b, o, y]
                            prow = pad[y + oy, ox:ox + W]
                            for xx in range(W):
                                a[xx] += grow[xx] * prow[xx]
            for ty in range(kh):
                for tx in range(kw):
                    gw[o, ty, tx] = acc[ty, tx].sum()
        return gw


def dw_forward(x, w, dil):
    if USE_NUMBA:
        return _nb_dw_forward(np.ascontiguousarray(x), np.ascontiguousarray(w), int(dil))
    return _np_dw_forward(x, w, dil)


def dw_backward_input(g, w, dil, channels):
    if USE_NUMBA:
        return _nb_dw_backward_input(np.ascontiguousarray(g), np.ascontiguousarray(w),
                                     int(dil), int(channels))
    return _np_dw_backward_input(g, w, dil, channels)


def dw_backward_weight(g, x, dil, kh, kw):
    if USE_NUMBA:
        return _nb_dw_backward_weight(np.ascontiguousarray(g), np.ascontiguousarray(x),
                                      int(dil), int(kh), int(kw))
    return _np_dw_backward_weight(g, x, dil, kh, kw)


# ---------------------------------------------------------------------------
# gradient noise on a pixel grid
#   grads: (Ly+1, Lx+1, 2) unit vectors (gy, gx) at lattice corners.
#   Pixel (i, j) sits at lattice coords (i*Ly/H, j*Lx/W).
# ---------------------------------------------------------------------------

def _np_fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _np_gradient_noise(grads, H, W):
    Ly = grads.shape[0] - 1
    Lx = grads.shape[1] - 1
    fy = np.arange(H, dtype=np.float64) * Ly / H
    fx = np.arange(W, dtype=np.float64) * Lx / W
    iy = np.minimum(np.floor(fy).astype(np.int64), Ly - 1)
    ix = np.minimum(np.floor(fx).astype(np.int64), Lx - 1)
    ty = (fy - iy)[:, None]
    tx = (fx - ix)[None, :]
    Y0 = iy[:, None]
    X0 = ix[None, :]

    def corner(dy, dx):
        g = grads[Y0 + dy, X0 + dx]
        return g[..., 0] * (ty - dy) + g[..., 1] * (tx - dx)

    u = _np_fade(tx)
    v = _np_fade(ty)
    top = corner(0, 0) + u * (corner(0, 1) - corner(0, 0))
    bot = corner(1, 0) + u * (corner(1, 1) - corner(1, 0))
    return top + v * (bot - top)


if HAS_NUMBA:

    @njit(cache=True)
    def _nb_fade(t):
        return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)

    @njit(parallel=True, cache=True)
    def _nb_gradient_noise(grads, H, W):
        Ly = grads.shape[0] - 1
        Lx = grads.shape[1] - 1
        out = np.empty((H, W), dtype=np.float64)
        for i in prange(H):
            fy = i * Ly / H
            iy = min(int(np.floor(fy)), Ly - 1)
            ty = fy - iy
            v = _nb_fade(ty)
            for j in range(W):
                fx = j * Lx / W
                ix = min(int(np.floor(fx)), Lx - 1)
                tx = fx - ix
                u = _nb_fade(tx)
                n00 = grads[iy, ix, 0] * ty + grads[iy, ix, 1] * tx
                n01 = grads[iy, ix + 1, 0] * ty + grads[iy, ix + 1, 1] * (tx - 1.0)
                n10 = grads[iy + 1, ix, 0] * (ty - 1.0) + grads[iy + 1, ix, 1] * tx
                n11 = grads[iy + 1, ix + 1, 0] * (ty - 1.0) + grads[iy + 1, ix + 1, 1] * (tx - 1.0)
                top = n00 + u * (n01 - n00)
                bot = n10 + u * (n11 - n10)
                out[i, j] = top + v * (bot - top)
        return out


def gradient_noise(grads, H, W):
    if USE_NUMBA:
        return _nb_gradient_noise(np.ascontiguousarray(grads, dtype=np.float64), int(H), int(W))
    return _np_gradient_noise(np.asarray(grads, dtype=np.float64), H, W)
