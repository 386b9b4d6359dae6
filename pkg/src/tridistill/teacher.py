"""Procedural multi-view teacher and the deterministic embedding oracle.

The teacher renders compositional prompts ("a {color} {shape}, {style}") by
sphere-tracing analytic signed-distance fields — an implementation deliberately
disjoint from the student's density integrator, so the two renderers cannot
share bugs. A fixed seeded linear projection of downsampled pixels serves as
the image embedding; text embeddings sum per-attribute vectors distilled from
the image embeddings of a reference render sweep, which keeps image and text
embeddings of matching content aligned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import camera as cam
from .config import CameraConfig, VocabularyConfig

EMBED_SEED = 170_081  # fixed: the oracle is part of the task definition, not learned
POOL = 16  # images are embedded from a POOL x POOL block-mean thumbnail

COLOR_VALUES = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.90, 0.85, 0.15),
}

SHAPES = ("sphere", "box", "torus", "capsule")
STYLES = ("plain", "striped", "checker")


@dataclass(frozen=True)
class PromptSpec:
    shape: str
    color: str
    style: str

    @property
    def text(self) -> str:
        return f"a {self.color} {self.shape}, {self.style}"


def parse_prompt(text: str) -> PromptSpec:
    """Inverse of PromptSpec.text; rejects anything outside the grammar."""
    try:
        head, style = text.split(", ")
        article, color, shape = head.split(" ")
    except ValueError:
        raise ValueError(f"prompt {text!r} does not match 'a <color> <shape>, <style>'")
    if article != "a":
        raise ValueError(f"prompt {text!r} must start with 'a '")
    if color not in COLOR_VALUES:
        raise ValueError(f"unknown color {color!r}")
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}")
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}")
    return PromptSpec(shape=shape, color=color, style=style)


def vocabulary(cfg: VocabularyConfig) -> list[PromptSpec]:
    """All prompts of the configured grammar, in deterministic order."""
    return [PromptSpec(shape=s, color=c, style=st)
            for s in cfg.shapes for c in cfg.colors for st in cfg.styles]


# ---------------------------------------------------------------------------
# embedding oracle


@lru_cache(maxsize=4)
def embedding_projection(embed_dim: int) -> np.ndarray:
    """Fixed seeded projection [POOL*POOL*3, embed_dim] shared by all encoders."""
    rng = np.random.default_rng(EMBED_SEED)
    m = rng.normal(size=(POOL * POOL * 3, embed_dim))
    return m / np.sqrt(POOL * POOL * 3)


def _block_mean(image: np.ndarray, bins: int) -> np.ndarray:
    """[H, W, 3] -> [bins, bins, 3] area means; bin edges as even as possible.

    Images smaller than the bin grid are nearest-upsampled first so every bin
    is nonempty.
    """
    h, w = image.shape[:2]
    if h < bins:
        image = np.repeat(image, -(-bins // h), axis=0)
        h = image.shape[0]
    if w < bins:
        image = np.repeat(image, -(-bins // w), axis=1)
        w = image.shape[1]
    rows = np.array_split(np.arange(h), bins)
    cols = np.array_split(np.arange(w), bins)
    out = np.empty((bins, bins, 3))
    for i, r in enumerate(rows):
        strip = image[r[0]:r[-1] + 1]
        for j, c in enumerate(cols):
            out[i, j] = strip[:, c[0]:c[-1] + 1].reshape(-1, 3).mean(axis=0)
    return out


def encode_image(image: np.ndarray, embed_dim: int) -> np.ndarray:
    """Unit-norm embedding of an RGB image (any resolution, values in [-1, 1])."""
    img = np.asarray(image, dtype=np.float64)
    flat = _block_mean(img, POOL).reshape(-1)
    e = flat @ embedding_projection(embed_dim)
    return e / np.sqrt(e @ e + 1e-24)


@lru_cache(maxsize=1)
def _reference_render_pool() -> tuple[np.ndarray, list[PromptSpec]]:
    """Block-mean pixel vectors of a seeded render sweep over the full grammar.

    Every prompt the grammar can express, rendered from seeded random
    viewpoints with the same pose and jitter distribution the dataset uses, so
    statistics taken over the pool transfer to real draws. The pixel pooling
    is embedding-width independent, so this (the expensive part) is computed
    once per process and reused by every table width.
    """
    res = 32
    draws = 12
    ccfg = CameraConfig()
    rng = np.random.default_rng(EMBED_SEED + 2)
    specs = [PromptSpec(shape=s, color=c, style=st)
             for s in SHAPES for c in COLOR_VALUES for st in STYLES]
    flats = np.empty((len(specs) * draws, POOL * POOL * 3))
    owners: list[PromptSpec] = []
    row = 0
    for spec in specs:
        for _ in range(draws):
            camera = cam.make_camera(float(rng.uniform(0.0, 360.0)),
                                     float(rng.uniform(0.0, 30.0)),
                                     ccfg.radius, ccfg.fov_degrees)
            scale = 1.0 + rng.uniform(-0.10, 0.10)
            jitter = 1.0 + rng.uniform(-0.05, 0.05, size=3)
            img = render_prompt_view(spec, camera, res, scale, jitter)
            flats[row] = _block_mean(img, POOL).reshape(-1)
            owners.append(spec)
            row += 1
    return flats, owners


@lru_cache(maxsize=8)
def _attribute_table(embed_dim: int) -> dict[str, np.ndarray]:
    """Per-attribute embedding vectors.

    Each attribute's vector is the mean image embedding of every rendered
    scene carrying that attribute (marginalizing the other attributes, the
    viewpoint, and the jitter), centered against the other values of the same
    attribute, then orthogonalized against the pool's mean embedding and mixed
    with a small seeded random direction for strict pairwise distinctness.
    Centering removes what all values of an attribute share; the
    orthogonalization removes what every render shares (background, framing),
    so comparing one image against two candidate prompts measures only the
    attributes in which the prompts differ.
    """
    rng = np.random.default_rng(EMBED_SEED + 1)
    flats, owners = _reference_render_pool()
    embeds = flats @ embedding_projection(embed_dim)
    embeds /= np.sqrt(np.sum(embeds * embeds, axis=1, keepdims=True) + 1e-24)
    common = embeds.mean(axis=0)
    common /= np.linalg.norm(common)

    table: dict[str, np.ndarray] = {}
    groups = (("color", tuple(COLOR_VALUES), lambda s: s.color),
              ("shape", SHAPES, lambda s: s.shape),
              ("style", STYLES, lambda s: s.style))
    for group, tokens, value_of in groups:
        means = {token: embeds[[value_of(s) == token for s in owners]].mean(axis=0)
                 for token in tokens}
        center = np.mean(list(means.values()), axis=0)
        for token in tokens:
            v = means[token] - center
            v -= (v @ common) * common
            v /= np.linalg.norm(v)
            noise = rng.normal(size=embed_dim)
            noise /= np.linalg.norm(noise)
            v = 0.97 * v + 0.03 * noise
            table[f"{group}:{token}"] = v / np.linalg.norm(v)
    return table


def encode_text(prompt: PromptSpec | str, embed_dim: int) -> np.ndarray:
    """Unit-norm prompt embedding: normalized sum of its attribute vectors."""
    spec = parse_prompt(prompt) if isinstance(prompt, str) else prompt
    if spec.color not in COLOR_VALUES or spec.shape not in SHAPES or spec.style not in STYLES:
        raise ValueError(f"prompt outside vocabulary: {spec}")
    table = _attribute_table(embed_dim)
    e = (table[f"color:{spec.color}"] + table[f"shape:{spec.shape}"]
         + table[f"style:{spec.style}"])
    return e / np.linalg.norm(e)


# ---------------------------------------------------------------------------
# signed-distance scene


def _sdf(shape: str, p: np.ndarray, scale: float) -> np.ndarray:
    """Signed distance of points [N, 3] to the named shape."""
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    if shape == "sphere":
        return np.linalg.norm(p, axis=1) - 0.5 * scale
    if shape == "box":
        q = np.abs(p) - 0.40 * scale
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside
    if shape == "torus":
        ring = np.sqrt(x ** 2 + z ** 2) - 0.38 * scale
        return np.sqrt(ring ** 2 + y ** 2) - 0.16 * scale
    if shape == "capsule":
        half = 0.28 * scale
        yy = np.clip(y, -half, half)
        return np.sqrt(x ** 2 + (y - yy) ** 2 + z ** 2) - 0.26 * scale
    raise ValueError(f"unknown shape {shape!r}")


def _style_factor(style: str, p: np.ndarray) -> np.ndarray:
    """Per-point brightness multiplier; pure scaling keeps hue ratios intact."""
    if style == "plain":
        return np.ones(p.shape[0])
    if style == "striped":
        return 0.75 + 0.25 * np.sin(14.0 * p[:, 1])
    if style == "checker":
        return 0.75 + 0.25 * np.sign(np.sin(9.0 * p[:, 0]) * np.sin(9.0 * p[:, 2]) + 1e-12)
    raise ValueError(f"unknown style {style!r}")


def _style_band(style: str, p: np.ndarray) -> np.ndarray:
    """Blend weight [N] toward white for the style's latitude bands.

    Bands depend only on height, so they are invariant to the camera's orbit
    longitude and keep a stable place in the frame across viewpoints. That
    stability is what lets a fixed linear readout of the pooled image tell
    styles apart: the fine multiplicative patterns alone shift phase with the
    viewpoint and average out under block pooling.
    """
    y = p[:, 1]
    if style == "plain":
        return np.zeros(p.shape[0])
    if style == "striped":
        return 0.9 * (np.abs(y) < 0.11)
    if style == "checker":
        return 0.9 * (np.abs(np.abs(y) - 0.27) < 0.055)
    raise ValueError(f"unknown style {style!r}")


def _sphere_trace(shape: str, camera: np.ndarray, resolution: int, scale: float,
                  steps: int = 96):
    origins, dirs = cam.generate_rays(camera, resolution, resolution)
    t = np.full(origins.shape[0], 0.5)
    active = np.ones(origins.shape[0], dtype=bool)
    for _ in range(steps):
        if not active.any():
            break
        p = origins[active] + t[active, None] * dirs[active]
        d = _sdf(shape, p, scale)
        t[active] = t[active] + d
        still = (d > 1e-4) & (t[active] < 6.0)
        idx = np.flatnonzero(active)
        active[idx[~still]] = False
    points = origins + t[:, None] * dirs
    hit = (np.abs(_sdf(shape, points, scale)) < 1e-3) & (t < 6.0)
    return hit, points, t


def _normals(shape: str, points: np.ndarray, scale: float) -> np.ndarray:
    eps = 1e-4
    n = np.empty_like(points)
    for axis in range(3):
        offset = np.zeros(3)
        offset[axis] = eps
        n[:, axis] = _sdf(shape, points + offset, scale) - _sdf(shape, points - offset, scale)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return n / norm


LIGHT_DIR = np.array([0.5, 0.8, 0.6]) / np.linalg.norm([0.5, 0.8, 0.6])


def render_prompt_view(spec: PromptSpec, camera: np.ndarray, resolution: int,
                       scale: float = 1.0, color_jitter: np.ndarray | None = None) -> np.ndarray:
    """One shaded view, float RGB in [-1, 1], black background."""
    hit, points, _ = _sphere_trace(spec.shape, camera, resolution, scale)
    img = np.zeros((resolution * resolution, 3))
    if hit.any():
        p = points[hit]
        n = _normals(spec.shape, p, scale)
        lambert = 0.35 + 0.65 * np.maximum(n @ LIGHT_DIR, 0.0)
        base = np.array(COLOR_VALUES[spec.color])
        if color_jitter is not None:
            base = np.clip(base * color_jitter, 0.0, 1.0)
        shade = base[None, :] * (_style_factor(spec.style, p) * lambert)[:, None]
        band = _style_band(spec.style, p)[:, None]
        shade = shade * (1.0 - band) + band * (0.95 * lambert)[:, None]
        img[hit] = np.clip(shade, 0.0, 1.0)
    return (2.0 * img - 1.0).reshape(resolution, resolution, 3)


@dataclass
class TeacherSample:
    images: np.ndarray  # [4, res, res, 3] in [-1, 1]
    cameras: np.ndarray  # [4, 25]
    prompt: PromptSpec
    base_longitude: float
    elevation: float
    seed: int


def render_teacher_views(spec: PromptSpec, base_longitude: float, elevation: float,
                         seed: int, resolution: int,
                         camera_cfg: CameraConfig | None = None) -> TeacherSample:
    """Four views at base + {0, 90, 180, 270} degrees, shared elevation.

    Per-seed jitter (object scale within 10%, color within 5%) models the
    teacher's sample-to-sample inconsistency.
    """
    if not 0.0 <= elevation <= 30.0:
        raise ValueError(f"elevation must lie in [0, 30] degrees, got {elevation}")
    ccfg = camera_cfg or CameraConfig()
    rng = np.random.default_rng(seed)
    scale = 1.0 + rng.uniform(-0.10, 0.10)
    color_jitter = 1.0 + rng.uniform(-0.05, 0.05, size=3)
    images, cameras = [], []
    for k in range(4):
        longitude = (base_longitude + 90.0 * k) % 360.0
        camera = cam.make_camera(longitude, elevation, ccfg.radius, ccfg.fov_degrees)
        cameras.append(camera)
        images.append(render_prompt_view(spec, camera, resolution, scale, color_jitter))
    return TeacherSample(images=np.stack(images), cameras=np.stack(cameras),
                         prompt=spec, base_longitude=base_longitude,
                         elevation=elevation, seed=seed)


# ---------------------------------------------------------------------------
# dataset synthesis


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    """[-1, 1] float RGB -> 8-bit, round-half-away from the midpoint."""
    return np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)


def uint8_to_image(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 127.5 - 1.0


def synthesize_dataset(vocab_cfg: VocabularyConfig, out_dir: str | Path,
                       rng: np.random.Generator,
                       camera_cfg: CameraConfig | None = None) -> list[dict]:
    """Write the teacher dataset: PNG images plus manifest.jsonl.

    Held-out prompts are chosen by the rng up front and never receive the
    'train' split tag. Returns the manifest records in file order.
    """
    from PIL import Image

    out = Path(out_dir)
    img_dir = out / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create dataset directory {img_dir}: {err}") from err

    vocab = vocabulary(vocab_cfg)
    heldout = set(rng.choice(len(vocab), size=vocab_cfg.heldout_prompts, replace=False).tolist())
    records = []
    for pid, spec in enumerate(vocab):
        split = "heldout" if pid in heldout else "train"
        for sample_i in range(vocab_cfg.samples_per_prompt):
            base = rng.uniform(0.0, 360.0)
            elevation = rng.uniform(0.0, 30.0)
            seed = int(rng.integers(0, 2 ** 31))
            sample = render_teacher_views(spec, base, elevation, seed,
                                          vocab_cfg.image_resolution, camera_cfg)
            for view in range(4):
                rel = f"images/p{pid:03d}_s{sample_i:03d}_v{view}.png"
                path = out / rel
                try:
                    Image.fromarray(image_to_uint8(sample.images[view])).save(path)
                except OSError as err:
                    raise OSError(f"cannot write image {path}: {err}") from err
                records.append({
                    "path": rel,
                    "prompt": spec.text,
                    "prompt_id": pid,
                    "camera": [float(v) for v in sample.cameras[view]],
                    "elevation": float(elevation),
                    "base_longitude": float(base),
                    "seed": seed,
                    "split": split,
                })
    manifest = out / "manifest.jsonl"
    try:
        with open(manifest, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    except OSError as err:
        raise OSError(f"cannot write manifest {manifest}: {err}") from err
    return records


def load_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    try:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except OSError as err:
        raise OSError(f"cannot read manifest {path}: {err}") from err


def load_image(dataset_dir: str | Path, record: dict) -> np.ndarray:
    from PIL import Image

    path = Path(dataset_dir) / record["path"]
    try:
        with Image.open(path) as im:
            return uint8_to_image(np.asarray(im.convert("RGB")))
    except OSError as err:
        raise OSError(f"cannot read image {path}: {err}") from err
