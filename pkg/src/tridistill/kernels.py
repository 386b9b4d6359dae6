"""Fused numeric kernels for the hot paths of the renderer.

Tri-plane bilinear gathering touches every ray sample three times; done with
generic fancy indexing it dominates a training step, so the gather and its
adjoint (scatter-add) are single fused passes.  Numba compiles them when
available; a pure-numpy fallback with identical semantics is kept both for
environments without numba and as a cross-check in the tests.  Both paths are
deterministic: the scatter accumulates in a fixed point order.

Set TRIDISTILL_NO_NUMBA=1 to force the numpy fallback.
"""

from __future__ import annotations

import os

import numpy as np

_USE_NUMBA = os.environ.get("TRIDISTILL_NO_NUMBA", "") != "1"

if _USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _USE_NUMBA = False


def _gather_numpy(table: np.ndarray, idx: np.ndarray, w: np.ndarray, out: np.ndarray) -> None:
    # table [rows, 3C], idx/w [3, 4, N] (plane, corner, point), out [N, 3C]
    c = table.shape[1] // 3
    out[:] = 0.0
    for b in range(3):
        block = slice(b * c, (b + 1) * c)
        for k in range(4):
            out[:, block] += w[b, k, :, None] * table[idx[b, k], block]


def _scatter_numpy(g: np.ndarray, idx: np.ndarray, w: np.ndarray, out: np.ndarray) -> None:
    # adjoint of _gather_numpy: out [rows, 3C] accumulates w-weighted rows of g
    rows, total = out.shape
    c = total // 3
    out[:] = 0.0
    for b in range(3):
        block = slice(b * c, (b + 1) * c)
        gb = g[:, block]
        for k in range(4):
            weighted = w[b, k, :, None] * gb
            for ch in range(c):
                out[:, b * c + ch] += np.bincount(idx[b, k], weights=weighted[:, ch], minlength=rows)


if _USE_NUMBA:

    @numba.njit(cache=True)
    def _gather_numba(table, idx, w, out):  # pragma: no cover - compiled
        n, total = out.shape
        c = total // 3
        for p in range(n):
            for b in range(3):
                base = b * c
                i0 = idx[b, 0, p]
                i1 = idx[b, 1, p]
                i2 = idx[b, 2, p]
                i3 = idx[b, 3, p]
                w0 = w[b, 0, p]
                w1 = w[b, 1, p]
                w2 = w[b, 2, p]
                w3 = w[b, 3, p]
                for ch in range(c):
                    out[p, base + ch] = (
                        w0 * table[i0, base + ch]
                        + w1 * table[i1, base + ch]
                        + w2 * table[i2, base + ch]
                        + w3 * table[i3, base + ch]
                    )

    @numba.njit(cache=True)
    def _scatter_numba(g, idx, w, out):  # pragma: no cover - compiled
        n, total = g.shape
        c = total // 3
        out[:] = 0.0
        for p in range(n):
            for b in range(3):
                base = b * c
                i0 = idx[b, 0, p]
                i1 = idx[b, 1, p]
                i2 = idx[b, 2, p]
                i3 = idx[b, 3, p]
                w0 = w[b, 0, p]
                w1 = w[b, 1, p]
                w2 = w[b, 2, p]
                w3 = w[b, 3, p]
                for ch in range(c):
                    v = g[p, base + ch]
                    out[i0, base + ch] += w0 * v
                    out[i1, base + ch] += w1 * v
                    out[i2, base + ch] += w2 * v
                    out[i3, base + ch] += w3 * v


def triplane_gather(table: np.ndarray, idx: np.ndarray, w: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """out[p, b*C+ch] = sum_k w[b,k,p] * table[idx[b,k,p], b*C+ch].

    table: [rows, 3C] flattened plane texels (three channel blocks).
    idx:   [3, 4, N] int64 row indices, one corner set per plane block.
    w:     [3, 4, N] bilinear corner weights.
    """
    n = idx.shape[2]
    if out is None:
        out = np.empty((n, table.shape[1]))
    if _USE_NUMBA:
        _gather_numba(table, idx, w, out)
    else:
        _gather_numpy(table, idx, w, out)
    return out


def triplane_scatter(g: np.ndarray, idx: np.ndarray, w: np.ndarray, rows: int, out: np.ndarray | None = None) -> np.ndarray:
    """Adjoint of triplane_gather: accumulate g back onto the texel table."""
    if out is None:
        out = np.empty((rows, g.shape[1]))
    if _USE_NUMBA:
        _scatter_numba(g, idx, w, out)
    else:
        _scatter_numpy(g, idx, w, out)
    return out


def _silu_fwd_numpy(x: np.ndarray, out: np.ndarray) -> None:
    s = 0.5 * np.tanh(0.5 * x) + 0.5
    np.multiply(x, s, out=out)


def _silu_bwd_numpy(x: np.ndarray, g: np.ndarray, out: np.ndarray) -> None:
    s = 0.5 * np.tanh(0.5 * x) + 0.5
    np.multiply(g, s * (1.0 + x * (1.0 - s)), out=out)


def silu_forward(x: np.ndarray, out: np.ndarray) -> np.ndarray:
    """out = x * sigmoid(x); numpy's vectorized tanh beats a scalar loop here."""
    _silu_fwd_numpy(x, out)
    return out


def silu_backward(x: np.ndarray, g: np.ndarray, out: np.ndarray) -> np.ndarray:
    """out = g * d/dx[x * sigmoid(x)]."""
    _silu_bwd_numpy(x, g, out)
    return out


def using_numba() -> bool:
    return _USE_NUMBA
