"""Parameter initialization helpers."""

from __future__ import annotations

import numpy as np


def orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    """Orthogonal [rows, cols] matrix (semi-orthogonal when non-square)."""
    flat = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))  # fix the sign ambiguity so draws are canonical
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols])


def conv_orthogonal(rng: np.random.Generator, kh: int, kw: int, cin: int, cout: int,
                    gain: float = 1.0) -> np.ndarray:
    """Conv kernel [kh, kw, cin, cout] orthogonal over the flattened input axis."""
    return orthogonal(rng, kh * kw * cin, cout, gain).reshape(kh, kw, cin, cout)
