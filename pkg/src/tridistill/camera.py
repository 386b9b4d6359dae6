"""Camera parameterization, pixel rays, and depth sampling.

A camera is a flat 25-vector: a 4x4 camera-to-world matrix (row-major, 16
values) followed by a 3x3 normalized pinhole intrinsic matrix (9 values).
Intrinsics are expressed in unit image coordinates so the same vector serves
any raster resolution.
"""

from __future__ import annotations

import numpy as np

CAMERA_DIM = 25


def make_camera(longitude: float, elevation: float, radius: float, fov: float) -> np.ndarray:
    """Build the flat 25-vector for a camera orbiting the origin.

    ``longitude`` and ``elevation`` are degrees; the camera sits at
    radius * (cos e sin l, sin e, cos e cos l), looks at the origin, and keeps
    world +Y up. ``fov`` is the full field of view in degrees.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if not 0 < fov < 180:
        raise ValueError(f"fov must be in (0, 180) degrees, got {fov}")
    l = np.deg2rad(longitude)
    e = np.deg2rad(elevation)
    center = radius * np.array([np.cos(e) * np.sin(l), np.sin(e), np.cos(e) * np.cos(l)])
    forward = -center / np.linalg.norm(center)
    right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right_norm = np.linalg.norm(right)
    if right_norm < 1e-9:
        raise ValueError(f"elevation {elevation} deg makes the up vector degenerate")
    right = right / right_norm
    up = np.cross(right, forward)

    extrinsic = np.eye(4)
    extrinsic[:3, 0] = right
    extrinsic[:3, 1] = up
    extrinsic[:3, 2] = forward
    extrinsic[:3, 3] = center

    focal = 0.5 / np.tan(np.deg2rad(fov) / 2)
    intrinsic = np.array([[focal, 0.0, 0.5], [0.0, focal, 0.5], [0.0, 0.0, 1.0]])
    return np.concatenate([extrinsic.ravel(), intrinsic.ravel()])


def extrinsic_matrix(camera: np.ndarray) -> np.ndarray:
    return np.asarray(camera)[:16].reshape(4, 4)


def intrinsic_matrix(camera: np.ndarray) -> np.ndarray:
    return np.asarray(camera)[16:25].reshape(3, 3)


def generate_rays(camera: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel rays in row-major pixel order.

    Returns (origins, directions), each [height*width, 3]; directions are
    unit-norm and pass through pixel centers.
    """
    if width < 1 or height < 1:
        raise ValueError(f"image size must be at least 1x1, got {width}x{height}")
    ext = extrinsic_matrix(camera)
    intr = intrinsic_matrix(camera)
    focal_x, focal_y = intr[0, 0], intr[1, 1]
    cx, cy = intr[0, 2], intr[1, 2]

    cols = (np.arange(width) + 0.5) / width
    rows = (np.arange(height) + 0.5) / height
    u, v = np.meshgrid(cols, rows)  # row-major: v varies over rows, from the top
    dirs_cam = np.stack([(u - cx) / focal_x, (cy - v) / focal_y, np.ones_like(u)], axis=-1)
    dirs = dirs_cam.reshape(-1, 3) @ ext[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(ext[:3, 3], dirs.shape).copy()
    return origins, dirs


def project(camera: np.ndarray, points: np.ndarray) -> np.ndarray:
    """World points [N, 3] -> unit image coordinates [N, 2] ((u, v), v from top)."""
    ext = extrinsic_matrix(camera)
    intr = intrinsic_matrix(camera)
    local = (np.atleast_2d(points) - ext[:3, 3]) @ ext[:3, :3]
    u = intr[0, 0] * local[:, 0] / local[:, 2] + intr[0, 2]
    v = intr[1, 2] - intr[1, 1] * local[:, 1] / local[:, 2]
    return np.stack([u, v], axis=1)


def sample_depths(near: float, far: float, n: int, stratified: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Depths along a ray from n uniform bins of [near, far].

    Non-stratified: bin midpoints. Stratified: one uniform draw per bin (needs
    ``rng``). Returns (depths, deltas); deltas are the bin widths.
    """
    if not 0 < near < far:
        raise ValueError(f"need 0 < near < far, got near={near} far={far}")
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    width = (far - near) / n
    edges = near + width * np.arange(n)
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling requires an rng")
        depths = edges + width * rng.uniform(size=n)
    else:
        depths = edges + width * 0.5
    return depths, np.full(n, width)


def stratified_depth_matrix(near: float, far: float, n: int, count: int,
                            rng: np.random.Generator) -> np.ndarray:
    """[count, n] stratified depths: one uniform draw per bin per row."""
    width = (far - near) / n
    edges = near + width * np.arange(n)
    return edges + width * rng.uniform(size=(count, n))
