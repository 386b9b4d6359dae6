"""Differentiable volume rendering of tri-plane fields into feature images.

Per ray with densities sigma_i, features c_i and step sizes delta_i:
weight_i = T_i * (1 - exp(-sigma_i * delta_i)) with transmittance
T_i = exp(-sum_{k<i} sigma_k * delta_k); the rendered feature is the
weight-sum of the c_i and the accumulated opacity is the weight total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import camera as cam
from .config import CameraConfig, RenderConfig
from .triplane import DECODER_PARAM_KEYS, as_table, bilinear_indices, decode_graph


def integration_weights(sigmas: np.ndarray, deltas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample weights and transmittance along one ray (leading axes allowed)."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    deltas = np.broadcast_to(np.asarray(deltas, dtype=np.float64), sigmas.shape)
    if np.any(sigmas < 0):
        raise ValueError("negative density")
    if np.any(deltas <= 0):
        raise ValueError("step sizes must be positive")
    optical = sigmas * deltas
    shifted = np.roll(np.cumsum(optical, axis=-1), 1, axis=-1)
    shifted[..., 0] = 0.0
    trans = np.exp(-shifted)
    alpha = 1.0 - np.exp(-optical)
    return trans * alpha, trans


def integrate_ray(sigmas: np.ndarray, colors: np.ndarray,
                  deltas: np.ndarray) -> tuple[np.ndarray, float]:
    """One ray: (feature C_c-vector, opacity)."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
    if sigmas.shape[0] != colors.shape[0]:
        raise ValueError(f"{sigmas.shape[0]} densities vs {colors.shape[0]} feature vectors")
    weights, _ = integration_weights(sigmas, deltas)
    return weights @ colors, float(weights.sum())


def build_integration(sigma: ad.Node, color: ad.Node, delta: float,
                      depths: ad.Node | None = None):
    """Graph integration: sigma [P, n], color [P, n, C] -> (feature [P, C],
    opacity [P], expected depth [P] or None). ``delta`` is the uniform step."""
    p, n = sigma.shape
    optical = sigma * delta
    alpha = 1.0 - ad.exp(-optical)
    trans = ad.exp(-ad.cumsum(optical, 1, exclusive=True))
    weights = trans * alpha
    feature = ad.reduce_sum(ad.reshape(weights, (p, n, 1)) * color, (1,))
    opacity = ad.reduce_sum(weights, (1,))
    depth = None if depths is None else ad.reduce_sum(weights * depths, (1,))
    return feature, opacity, depth


def build_field_render(table: ad.Node, idx: ad.Node, weights: ad.Node,
                       dec_params: dict[str, ad.Node], n_rays: int, n_samples: int,
                       delta: float, color_channels: int,
                       depths: ad.Node | None = None):
    """Full differentiable render: gathered plane features -> decoder -> integration.

    ``table`` is the flattened field [rows, 3C]; ``idx``/``weights`` are the
    [3, 4, n_rays*n_samples] bilinear sampling plan (rows pre-offset by the
    caller when batching several fields in one table).
    """
    feats = ad.triplane_gather(table, idx, weights)
    raw_sigma, color = decode_graph(feats, dec_params)
    sigma = ad.reshape(ad.softplus(raw_sigma), (n_rays, n_samples))
    color = ad.reshape(color, (n_rays, n_samples, color_channels))
    return build_integration(sigma, color, delta, depths)


@dataclass
class FeatureImage:
    features: np.ndarray  # [H, W, C_c]
    opacity: np.ndarray  # [H, W]
    depth: np.ndarray | None  # [H, W]


def render_feature_image(planes: np.ndarray, dec_params: dict[str, np.ndarray],
                         camera: np.ndarray, width: int, height: int,
                         render_cfg: RenderConfig, camera_cfg: CameraConfig,
                         rng: np.random.Generator | None = None,
                         stratified: bool = False) -> FeatureImage:
    """Render one field from one camera (deterministic midpoints by default)."""
    origins, dirs = cam.generate_rays(camera, width, height)
    n_rays = origins.shape[0]
    n = render_cfg.n_samples
    delta = (camera_cfg.far - camera_cfg.near) / n
    if stratified:
        if rng is None:
            raise ValueError("stratified rendering requires an rng")
        depths = cam.stratified_depth_matrix(camera_cfg.near, camera_cfg.far, n, n_rays, rng)
    else:
        depths = np.broadcast_to(
            cam.sample_depths(camera_cfg.near, camera_cfg.far, n)[0], (n_rays, n))
    points = origins[:, None, :] + dirs[:, None, :] * depths[:, :, None]
    idx, w = bilinear_indices(points.reshape(-1, 3), planes.shape[0])

    color_channels = dec_params["w3"].shape[1] - 1
    params = {k: ad.const(dec_params[k]) for k in DECODER_PARAM_KEYS}
    feature, opacity, depth = build_field_render(
        ad.const(as_table(planes)), ad.const_int(idx), ad.const(w), params,
        n_rays, n, delta, color_channels,
        depths=ad.const(depths) if render_cfg.depth_output else None)
    outs = [feature, opacity] + ([depth] if depth is not None else [])
    vals = ad.evaluate(outs)
    return FeatureImage(
        features=vals[0].reshape(height, width, color_channels),
        opacity=vals[1].reshape(height, width),
        depth=vals[2].reshape(height, width) if render_cfg.depth_output else None)


def rotate_field_quarter_turn(planes: np.ndarray) -> np.ndarray:
    """Field g with g(p) = f(R p), R the +90-degree turn about world Y.

    The turned field is again a tri-plane: each new plane is a transposed /
    flipped copy of one of the old ones, with the XY and YZ channel blocks
    swapping roles. The decoder's first-layer rows must be permuted to match
    (see ``rotate_decoder_quarter_turn``).
    """
    c = planes.shape[2] // 3
    xy, xz, yz = planes[:, :, :c], planes[:, :, c:2 * c], planes[:, :, 2 * c:]
    new_xy = np.transpose(yz, (1, 0, 2))[::-1, :, :]
    new_xz = np.transpose(xz, (1, 0, 2))[::-1, :, :]
    new_yz = np.transpose(xy, (1, 0, 2))
    return np.ascontiguousarray(np.concatenate([new_xy, new_xz, new_yz], axis=2))


def rotate_decoder_quarter_turn(dec_params: dict[str, np.ndarray],
                                channels: int) -> dict[str, np.ndarray]:
    """Decoder for the quarter-turned field: first-layer input blocks swap
    so the relabeled planes keep feeding the weights they fed before."""
    c = channels
    w1 = dec_params["w1"]
    out = dict(dec_params)
    out["w1"] = np.concatenate([w1[2 * c:3 * c], w1[c:2 * c], w1[:c]], axis=0)
    return out
