"""Hot numeric kernels: numba-jitted loops with a pure-numpy fallback.

The backend is chosen once at import time. Numba is used when it imports
cleanly and the environment variable ``VOLSEG_NO_NUMBA`` is unset (or set
to something falsy); otherwise the numpy implementations are used. Both
backends compute the same quantities; ``benchmarks/bench_kernels.py``
compares their speed and agreement.
"""

import os

import numpy as np


def _numba_wanted() -> bool:
    return os.environ.get("VOLSEG_NO_NUMBA", "").lower() not in ("1", "true", "yes")


NUMBA_ENABLED = False
if _numba_wanted():
    try:
        from numba import njit, prange

        NUMBA_ENABLED = True
    except ImportError:
        pass


def backend() -> str:
    """Name of the active kernel backend: 'numba' or 'numpy'."""
    return "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# 3D cross-correlation on an already zero-padded input.
# padded: (Cin, X+kx-1, Y+ky-1, Z+kz-1) float32
# weights: (Cout, Cin, kx, ky, kz) float32
# returns: (Cout, X, Y, Z) float32
# ---------------------------------------------------------------------------

def _conv3d_numpy(padded: np.ndarray, weights: np.ndarray) -> np.ndarray:
    cout, cin, kx, ky, kz = weights.shape
    xs = padded.shape[1] - kx + 1
    ys = padded.shape[2] - ky + 1
    zs = padded.shape[3] - kz + 1
    # float64 throughout; each tap is a BLAS matmul over the channel axis
    padded64 = padded.astype(np.float64)
    weights64 = weights.astype(np.float64)
    acc = np.zeros((cout, xs, ys, zs), dtype=np.float64)
    for dx in range(kx):
        for dy in range(ky):
            for dz in range(kz):
                slab = padded64[:, dx:dx + xs, dy:dy + ys, dz:dz + zs]
                acc += np.tensordot(weights64[:, :, dx, dy, dz], slab, axes=(1, 0))
    return acc.astype(np.float32)


if NUMBA_ENABLED:

    @njit(cache=True, parallel=True)
    def _conv3d_jit(padded, weights, out):  # pragma: no cover - timed via wrapper
        cout, cin, kx, ky, kz = weights.shape
        _, xs, ys, zs = out.shape
        for px in prange(cout * xs):
            co = px // xs
            x = px % xs
            acc = np.zeros((ys, zs), dtype=np.float64)
            for ci in range(cin):
                for dx in range(kx):
                    plane = padded[ci, x + dx]
                    for dy in range(ky):
                        for dz in range(kz):
                            w = np.float64(weights[co, ci, dx, dy, dz])
                            for y in range(ys):
                                src = plane[y + dy]
                                dst = acc[y]
                                for z in range(zs):
                                    dst[z] += w * src[z + dz]
            out[co, x] = acc.astype(np.float32)

    # Above this input-channel count the BLAS path overtakes the loop kernel
    # (measured crossover near 64 on commodity x86; the loop kernel wins big
    # on the wide, shallow stages that dominate U-Net runtime).
    _LOOP_KERNEL_MAX_CIN = 32

    def _conv3d_numba(padded: np.ndarray, weights: np.ndarray) -> np.ndarray:
        if weights.shape[2:] == (1, 1, 1) or weights.shape[1] > _LOOP_KERNEL_MAX_CIN:
            # pointwise convs are one matrix product and channel-heavy stages
            # are compute-bound: both belong to BLAS
            return _conv3d_numpy(padded, weights)
        cout = weights.shape[0]
        xs = padded.shape[1] - weights.shape[2] + 1
        ys = padded.shape[2] - weights.shape[3] + 1
        zs = padded.shape[3] - weights.shape[4] + 1
        out = np.empty((cout, xs, ys, zs), dtype=np.float32)
        _conv3d_jit(np.ascontiguousarray(padded), np.ascontiguousarray(weights), out)
        return out

    conv3d_core = _conv3d_numba
else:
    conv3d_core = _conv3d_numpy


# ---------------------------------------------------------------------------
# Trilinear sampling of a 3D grid at separable per-axis coordinates.
# src: (X, Y, Z) float32; cx/cy/cz: float64 coordinates already clamped to
# the valid domain [0, dim-1]. Returns (len(cx), len(cy), len(cz)) float32.
# ---------------------------------------------------------------------------

def _axis_corners(coord: np.ndarray, dim: int):
    if dim == 1:
        lo = np.zeros(coord.shape, dtype=np.int64)
        frac = np.zeros(coord.shape, dtype=np.float64)
        return lo, lo, frac
    lo = np.floor(coord).astype(np.int64)
    np.clip(lo, 0, dim - 2, out=lo)
    frac = coord - lo
    return lo, lo + 1, frac


def _trilinear_numpy(src: np.ndarray, cx: np.ndarray, cy: np.ndarray, cz: np.ndarray) -> np.ndarray:
    x0, x1, fx = _axis_corners(cx, src.shape[0])
    y0, y1, fy = _axis_corners(cy, src.shape[1])
    z0, z1, fz = _axis_corners(cz, src.shape[2])

    fx = fx[:, None, None]
    fy = fy[None, :, None]
    fz = fz[None, None, :]

    out = np.zeros((len(cx), len(cy), len(cz)), dtype=np.float64)
    src64 = src.astype(np.float64)
    for xi, wx in ((x0, 1.0 - fx), (x1, fx)):
        for yi, wy in ((y0, 1.0 - fy), (y1, fy)):
            for zi, wz in ((z0, 1.0 - fz), (z1, fz)):
                out += (wx * wy * wz) * src64[np.ix_(xi, yi, zi)]
    return out.astype(np.float32)


if NUMBA_ENABLED:

    @njit(cache=True, parallel=True)
    def _trilinear_jit(src, x0, x1, fx, y0, y1, fy, z0, z1, fz, out):  # pragma: no cover
        nx, ny, nz = out.shape
        for i in prange(nx):
            xa = x0[i]
            xb = x1[i]
            tx = fx[i]
            for j in range(ny):
                ya = y0[j]
                yb = y1[j]
                ty = fy[j]
                for k in range(nz):
                    za = z0[k]
                    zb = z1[k]
                    tz = fz[k]
                    c00 = src[xa, ya, za] * (1.0 - tx) + src[xb, ya, za] * tx
                    c10 = src[xa, yb, za] * (1.0 - tx) + src[xb, yb, za] * tx
                    c01 = src[xa, ya, zb] * (1.0 - tx) + src[xb, ya, zb] * tx
                    c11 = src[xa, yb, zb] * (1.0 - tx) + src[xb, yb, zb] * tx
                    c0 = c00 * (1.0 - ty) + c10 * ty
                    c1 = c01 * (1.0 - ty) + c11 * ty
                    out[i, j, k] = c0 * (1.0 - tz) + c1 * tz

    def _trilinear_numba(src: np.ndarray, cx: np.ndarray, cy: np.ndarray, cz: np.ndarray) -> np.ndarray:
        x0, x1, fx = _axis_corners(cx, src.shape[0])
        y0, y1, fy = _axis_corners(cy, src.shape[1])
        z0, z1, fz = _axis_corners(cz, src.shape[2])
        out = np.empty((len(cx), len(cy), len(cz)), dtype=np.float64)
        _trilinear_jit(
            np.ascontiguousarray(src.astype(np.float64)),
            x0, x1, fx, y0, y1, fy, z0, z1, fz, out,
        )
        return out.astype(np.float32)

    trilinear_core = _trilinear_numba
else:
    trilinear_core = _trilinear_numpy
