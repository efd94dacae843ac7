"""Pure numpy partial-volume kernels (fallback for the compiled module).

Arguments shared by both functions:

coords : (n, 3) float64
    Continuous voxel indices (x, y, z) of the mapped samples in the moving grid.
ref_lo, ref_frac : (n,) int32 / float64
    Reference intensity split between bins ``ref_lo`` and ``ref_lo + 1``
    with weights ``1 - ref_frac`` and ``ref_frac``.
mov_bins : (nz, ny, nx) int32
    Intensity bin of every moving voxel.

Each sample spreads unit mass over its 4x4x4 moving neighbours with a
separable Hanning-windowed sinc (radius 2), normalized per axis to sum to 1.
Neighbours outside the grid are dropped.
"""

import numpy as np

_CHUNK = 8192


def wsinc(d):
    d = np.asarray(d, dtype=np.float64)
    h = np.where(np.abs(d) < 2.0, 0.5 * (1.0 + np.cos(0.5 * np.pi * d)), 0.0)
    return np.sinc(d) * h


def wsinc_deriv(d):
    d = np.asarray(d, dtype=np.float64)
    pd = np.pi * d
    small = np.abs(d) < 1e-6
    safe = np.where(small, 1.0, d)
    s = np.where(small, 1.0, np.sin(np.pi * safe) / (np.pi * safe))
    ds = np.where(
        small,
        -(np.pi**2 / 3.0) * d,
        (np.pi * safe * np.cos(np.pi * safe) - np.sin(np.pi * safe)) / (np.pi * safe * safe),
    )
    h = 0.5 * (1.0 + np.cos(0.5 * pd))
    dh = -0.25 * np.pi * np.sin(0.5 * pd)
    inside = np.abs(d) < 2.0
    return np.where(inside, ds * h + s * dh, 0.0)


def tap_weights(u):
    """Normalized tap weights, their derivatives and the first tap index.

    ``u`` has shape (n,); returns (w, dw, first) with w, dw of shape (n, 4).
    """
    fl = np.floor(u)
    taps = fl[:, None] + np.arange(-1, 3)[None, :]
    d = u[:, None] - taps
    w = wsinc(d)
    dw = wsinc_deriv(d)
    S = w.sum(axis=1, keepdims=True)
    dS = dw.sum(axis=1, keepdims=True)
    dwn = (dw * S - w * dS) / (S * S)
    return w / S, dwn, (fl - 1).astype(np.int64)


def _neighbourhood(coords, mov_bins):
    nz, ny, nx = mov_bins.shape
    wx, dwx, x0 = tap_weights(coords[:, 0])
    wy, dwy, y0 = tap_weights(coords[:, 1])
    wz, dwz, z0 = tap_weights(coords[:, 2])
    off = np.arange(4)
    xi = x0[:, None] + off
    yi = y0[:, None] + off
    zi = z0[:, None] + off
    # (n, 4z, 4y, 4x) index grids
    Z = zi[:, :, None, None]
    Y = yi[:, None, :, None]
    X = xi[:, None, None, :]
    inside = (Z >= 0) & (Z < nz) & (Y >= 0) & (Y < ny) & (X >= 0) & (X < nx)
    b = mov_bins[np.clip(Z, 0, nz - 1), np.clip(Y, 0, ny - 1), np.clip(X, 0, nx - 1)]
    return (wx, wy, wz), (dwx, dwy, dwz), inside, b


def pv_histogram(coords, ref_lo, ref_frac, mov_bins, bins):
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    table = np.zeros((bins, bins))
    for start in range(0, coords.shape[0], _CHUNK):
        sl = slice(start, start + _CHUNK)
        (wx, wy, wz), _, inside, b = _neighbourhood(coords[sl], mov_bins)
        w = wz[:, :, None, None] * wy[:, None, :, None] * wx[:, None, None, :]
        w = np.where(inside, w, 0.0)
        a = np.broadcast_to(np.asarray(ref_lo[sl])[:, None, None, None], w.shape)
        f = np.asarray(ref_frac[sl])[:, None, None, None]
        np.add.at(table, (a.ravel(), b.ravel()), ((1.0 - f) * w).ravel())
        np.add.at(table, (a.ravel() + 1, b.ravel()), (f * w).ravel())
    return table


def pv_gradient(coords, ref_lo, ref_frac, mov_bins, F):
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    out = np.zeros((coords.shape[0], 3))
    for start in range(0, coords.shape[0], _CHUNK):
        sl = slice(start, start + _CHUNK)
        (wx, wy, wz), (dwx, dwy, dwz), inside, b = _neighbourhood(coords[sl], mov_bins)
        a = np.asarray(ref_lo[sl])[:, None, None, None]
        f = np.asarray(ref_frac[sl])[:, None, None, None]
        c = (1.0 - f) * F[a, b] + f * F[a + 1, b]
        c = np.where(inside, c, 0.0)
        out[sl, 0] = np.einsum("nkji,nk,nj,ni->n", c, wz, wy, dwx)
        out[sl, 1] = np.einsum("nkji,nk,nj,ni->n", c, wz, dwy, wx)
        out[sl, 2] = np.einsum("nkji,nk,nj,ni->n", c, dwz, wy, wx)
    return out
