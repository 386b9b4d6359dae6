"""Tri-plane implicit field: plane sampling and the point decoder.

A field is a single [R, R, 3C] array whose channel blocks are the XY, XZ and
YZ feature planes. Plane axes: the XY plane is indexed by (x, y), XZ by
(x, z), YZ by (y, z); the first coordinate selects the row. Point features
are the concatenation XY-block, XZ-block, YZ-block of the three bilinear
samples.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import kernels
from .config import DecoderConfig, TriPlaneConfig
from .initializers import orthogonal

# plane b reads world coordinate pair (PLANE_AXES[b][0], PLANE_AXES[b][1])
PLANE_AXES = ((0, 1), (0, 2), (1, 2))


def as_table(planes: np.ndarray) -> np.ndarray:
    """[R, R, 3C] field -> [R*R, 3C] row-major sampling table."""
    r, r2, c3 = planes.shape
    if r != r2 or c3 % 3:
        raise ValueError(f"expected [R, R, 3C] field, got {planes.shape}")
    return planes.reshape(r * r, c3)


def bilinear_indices(points: np.ndarray, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Texel rows and weights for bilinear plane sampling.

    ``points`` is [N, 3] in world coordinates; components are clamped to
    [-1, 1]. Returns (idx, w), both [3, 4, N]: for each plane, the four
    flattened texel rows (first coordinate is the row of the plane image) and
    their bilinear weights. Texel centers follow the half-texel grid, so the
    mapping is exactly symmetric under coordinate negation.
    """
    pts = np.clip(np.atleast_2d(points), -1.0, 1.0)
    n = pts.shape[0]
    idx = np.empty((3, 4, n), dtype=np.int64)
    w = np.empty((3, 4, n))
    for b, (a0, a1) in enumerate(PLANE_AXES):
        t0 = (pts[:, a0] + 1.0) * 0.5 * resolution - 0.5
        t1 = (pts[:, a1] + 1.0) * 0.5 * resolution - 0.5
        i0 = np.floor(t0)
        j0 = np.floor(t1)
        fi = t0 - i0
        fj = t1 - j0
        i0 = i0.astype(np.int64)
        j0 = j0.astype(np.int64)
        i1 = np.clip(i0 + 1, 0, resolution - 1)
        j1 = np.clip(j0 + 1, 0, resolution - 1)
        i0 = np.clip(i0, 0, resolution - 1)
        j0 = np.clip(j0, 0, resolution - 1)
        idx[b, 0] = i0 * resolution + j0
        idx[b, 1] = i0 * resolution + j1
        idx[b, 2] = i1 * resolution + j0
        idx[b, 3] = i1 * resolution + j1
        w[b, 0] = (1.0 - fi) * (1.0 - fj)
        w[b, 1] = (1.0 - fi) * fj
        w[b, 2] = fi * (1.0 - fj)
        w[b, 3] = fi * fj
    return idx, w


def sample_planes(planes: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinear plane features for world points.

    ``points`` may be a single 3-vector or [N, 3]. Returns the per-plane
    feature vectors as [3, C] (single point) or [N, 3, C].
    """
    single = np.asarray(points).ndim == 1
    pts = np.atleast_2d(points)
    resolution = planes.shape[0]
    channels = planes.shape[2] // 3
    idx, w = bilinear_indices(pts, resolution)
    feats = kernels.triplane_gather(as_table(planes), idx, w)
    out = feats.reshape(pts.shape[0], 3, channels)
    return out[0] if single else out


DECODER_PARAM_KEYS = ("w1", "b1", "w2", "b2", "w3", "b3")


def decoder_shapes(tri: TriPlaneConfig, dec: DecoderConfig) -> dict[str, tuple[int, ...]]:
    din = tri.total_channels
    h = dec.hidden_width
    dout = 1 + dec.color_channels
    return {
        "w1": (din, h), "b1": (h,),
        "w2": (h, h), "b2": (h,),
        "w3": (h, dout), "b3": (dout,),
    }


def init_decoder(tri: TriPlaneConfig, dec: DecoderConfig,
                 rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Orthogonal weights, zero biases; raw-density bias starts at -1 so fresh
    fields are near transparent."""
    shapes = decoder_shapes(tri, dec)
    params = {}
    for key, shape in shapes.items():
        if key.startswith("w"):
            params[key] = orthogonal(rng, *shape)
        else:
            params[key] = np.zeros(shape)
    params["b3"] = params["b3"].copy()
    params["b3"][0] = -1.0
    return params


def decode_graph(features: ad.Node, params: dict[str, ad.Node]) -> tuple[ad.Node, ad.Node]:
    """Decoder MLP as graph nodes: [N, 3C] features -> (raw_sigma [N,1], color [N,C_c]).

    Density is softplus(raw_sigma); callers apply it so rendering can reuse
    the raw value.
    """
    h = ad.silu(ad.linear(features, params["w1"], params["b1"]))
    h = ad.silu(ad.linear(h, params["w2"], params["b2"]))
    out = ad.linear(h, params["w3"], params["b3"])
    dout = out.shape[1]
    return ad.slice_axis(out, 1, 0, 1), ad.slice_axis(out, 1, 1, dout)


def decode_points(features: np.ndarray, params: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Eager decode: [N, 3C] (or single 3C-vector) -> (sigma, color_feat)."""
    single = np.asarray(features).ndim == 1
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    leaf = ad.leaf("features", feats.shape)
    pnodes = {k: ad.leaf("dec_" + k, params[k].shape) for k in DECODER_PARAM_KEYS}
    raw, color = decode_graph(leaf, pnodes)
    bindings = {"features": feats}
    bindings.update({"dec_" + k: params[k] for k in DECODER_PARAM_KEYS})
    raw_v, color_v = ad.evaluate([ad.softplus(raw), color], bindings)
    sigma = raw_v[:, 0]
    return (float(sigma[0]), color_v[0]) if single else (sigma, color_v)


def decode_point(features: np.ndarray, params: dict[str, np.ndarray]) -> tuple[float, np.ndarray]:
    """Single-point decode -> (sigma, color_feat)."""
    return decode_points(features, params)


def field_density(planes: np.ndarray, params: dict[str, np.ndarray],
                  points: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Density at world points [N, 3] (used by mesh extraction)."""
    pts = np.atleast_2d(points)
    out = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], chunk):
        block = pts[start:start + chunk]
        feats = sample_planes(planes, block).reshape(block.shape[0], -1)
        sigma, _ = decode_points(feats, params)
        out[start:start + chunk] = sigma
    return out
