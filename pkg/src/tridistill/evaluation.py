"""Evaluation: distribution distance, prompt similarity, latency, meshes.

All metrics run on the deterministic embedding oracle, so every number here
is reproducible bit-for-bit given the same seed. The distribution metric is
the Fréchet distance between Gaussian fits of oracle embeddings; prompt
similarity is mean cosine between image and text embeddings; mesh extraction
runs marching cubes over the decoded density field.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import teacher
from .camera import make_camera
from .config import Config
from .networks import generate
from .triplane import field_density

# Ridge added to both covariance diagonals so small evaluation sets still
# yield a well-defined matrix square root.
COVARIANCE_RIDGE = 1e-6

# Evaluation renders use the same four-view protocol as the teacher.
EVAL_VIEWS = 4


# ---------------------------------------------------------------------------
# Fréchet embedding distance


def _mean_and_cov(x: np.ndarray, ridge: float) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    centered = x - mu
    n = x.shape[0]
    if n > 1:
        cov = centered.T @ centered / (n - 1)
    else:
        cov = np.zeros((x.shape[1], x.shape[1]))
    cov = cov + ridge * np.eye(x.shape[1])
    return mu, cov


def _sym_sqrt(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(a)
    vals = np.maximum(vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_embedding_distance(set_a: np.ndarray, set_b: np.ndarray,
                               ridge: float = COVARIANCE_RIDGE) -> float:
    """Squared Fréchet distance between Gaussian fits of two embedding sets.

    d^2 = |mu_a - mu_b|^2 + tr(C_a + C_b - 2 (C_a C_b)^{1/2}), with the trace
    term computed through symmetric eigendecompositions: the cross term equals
    the trace square root of the symmetric matrix S_a^{1/2} C_b S_a^{1/2}.
    """
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"expected [n, d] embedding sets with a shared d, "
                         f"got {a.shape} and {b.shape}")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("embedding sets must be nonempty")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("embeddings contain non-finite values")
    mu_a, cov_a = _mean_and_cov(a, ridge)
    mu_b, cov_b = _mean_and_cov(b, ridge)
    sqrt_a = _sym_sqrt(cov_a)
    inner = sqrt_a @ cov_b @ sqrt_a
    inner = (inner + inner.T) * 0.5
    cross_vals = np.maximum(np.linalg.eigvalsh(inner), 0.0)
    gap = mu_a - mu_b
    d2 = float(gap @ gap + np.trace(cov_a) + np.trace(cov_b)
               - 2.0 * np.sqrt(cross_vals).sum())
    # mathematically >= 0; rounding can leave a tiny negative residue
    return max(d2, 0.0)


# ---------------------------------------------------------------------------
# prompt similarity


def _text_embedding(prompt, embed_dim: int) -> np.ndarray:
    if isinstance(prompt, str):
        return teacher.encode_text(prompt, embed_dim)
    emb = np.asarray(prompt, dtype=np.float64)
    if emb.shape != (embed_dim,):
        raise ValueError(f"prompt embedding must have shape ({embed_dim},), "
                         f"got {emb.shape}")
    if not np.isfinite(emb).all():
        raise ValueError("prompt embedding contains non-finite values")
    return emb


def prompt_similarity(images: np.ndarray, prompt, embed_dim: int) -> float:
    """Mean cosine between the images' oracle embeddings and the prompt's.

    ``prompt`` is a prompt string or a precomputed unit embedding. Embeddings
    are unit vectors, so each term is a cosine; values are clamped to [-1, 1]
    against rounding.
    """
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    if imgs.ndim != 4 or imgs.shape[0] == 0:
        raise ValueError(f"expected a nonempty [n, h, w, 3] image set, "
                         f"got {np.asarray(images).shape}")
    text = _text_embedding(prompt, embed_dim)
    dots = [float(teacher.encode_image(img, embed_dim) @ text) for img in imgs]
    return float(np.clip(dots, -1.0, 1.0).mean())


# ---------------------------------------------------------------------------
# latency


def measure_latency(g_params: dict[str, np.ndarray], cfg: Config,
                    trials: int, warmup: int = 3) -> dict[str, float]:
    """Wall-clock of single-image generation on fixed inputs.

    Runs ``warmup`` unrecorded calls, then ``trials`` timed ones on the
    monotonic performance clock; reports milliseconds.
    """
    if trials < 1:
        raise ValueError(f"need at least one trial, got {trials}")
    rng = np.random.default_rng(0)
    z = rng.normal(size=cfg.generator.z_dim)
    cam = make_camera(30.0, 15.0, cfg.camera.radius, cfg.camera.fov_degrees)
    prompt = teacher.vocabulary(cfg.vocabulary)[0].text
    t_embed = teacher.encode_text(prompt, cfg.generator.embed_dim)
    samples = []
    for i in range(warmup + trials):
        start = time.perf_counter()
        generate(g_params, z, cam, cam, t_embed, cfg)
        elapsed_ms = (time.perf_counter() - start) * 1e3
        if i >= warmup:
            samples.append(elapsed_ms)
    arr = np.asarray(samples)
    return {"trials": trials,
            "mean_ms": float(arr.mean()),
            "p50_ms": float(np.percentile(arr, 50)),
            "p95_ms": float(np.percentile(arr, 95))}


# ---------------------------------------------------------------------------
# mesh extraction


@dataclass
class Mesh:
    vertices: np.ndarray           # [n, 3] float
    triangles: np.ndarray          # [m, 3] int vertex indices
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")


def default_iso_level(grid_res: int) -> float:
    """Density whose opacity over one voxel is 0.5: 1 - exp(-sigma*h) = 0.5."""
    voxel = 2.0 / (grid_res - 1)
    return float(np.log(2.0) / voxel)


def _triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def density_grid(planes: np.ndarray, dec_params: dict[str, np.ndarray],
                 grid_res: int) -> np.ndarray:
    """Decoded density sampled on a grid_res^3 lattice spanning [-1, 1]^3."""
    if grid_res < 2:
        raise ValueError(f"grid resolution must be at least 2, got {grid_res}")
    axis = np.linspace(-1.0, 1.0, grid_res)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    points = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    return field_density(planes, dec_params, points).reshape(grid_res, grid_res, grid_res)


def extract_mesh(planes: np.ndarray, dec_params: dict[str, np.ndarray],
                 grid_res: int = 64, iso_level: float | None = None,
                 density: np.ndarray | None = None) -> Mesh:
    """Marching-cubes isosurface of the decoded density over [-1, 1]^3.

    ``iso_level`` defaults to the density whose opacity over one voxel is 0.5.
    A field that never crosses the level yields an empty mesh. Degenerate
    (zero-area) triangles are dropped.
    """
    from skimage.measure import marching_cubes

    if grid_res < 2:
        raise ValueError(f"grid resolution must be at least 2, got {grid_res}")
    iso = default_iso_level(grid_res) if iso_level is None else float(iso_level)
    vol = density_grid(planes, dec_params, grid_res) if density is None else density
    if not (vol.min() < iso < vol.max()):
        return Mesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64),
                    np.empty((0, 3)))
    voxel = 2.0 / (grid_res - 1)
    verts, faces, normals, _ = marching_cubes(vol, level=iso,
                                              spacing=(voxel, voxel, voxel))
    verts = verts.astype(np.float64) - 1.0
    faces = faces.astype(np.int64)
    keep = _triangle_areas(verts, faces) > 1e-12
    return Mesh(vertices=verts, triangles=faces[keep],
                normals=normals.astype(np.float64))


def write_ply(mesh: Mesh, path) -> None:
    """ASCII PLY export, vertex elements first, then faces."""
    has_normals = mesh.normals is not None and len(mesh.normals) == len(mesh.vertices)
    lines = ["ply", "format ascii 1.0",
             f"element vertex {len(mesh.vertices)}",
             "property float x", "property float y", "property float z"]
    if has_normals:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines += [f"element face {len(mesh.triangles)}",
              "property list uchar int vertex_indices", "end_header"]
    for i, v in enumerate(mesh.vertices):
        row = f"{v[0]:.8g} {v[1]:.8g} {v[2]:.8g}"
        if has_normals:
            n = mesh.normals[i]
            row += f" {n[0]:.8g} {n[1]:.8g} {n[2]:.8g}"
        lines.append(row)
    for t in mesh.triangles:
        lines.append(f"3 {t[0]} {t[1]} {t[2]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# prompt interpolation


def interpolate_prompts(t1, t2, alpha: float, embed_dim: int) -> np.ndarray:
    """Normalized linear interpolation between two prompt embeddings.

    The endpoints return the exact input embeddings. Antipodal embeddings
    interpolated to the midpoint have no direction and raise.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    e1 = _text_embedding(t1, embed_dim)
    e2 = _text_embedding(t2, embed_dim)
    if alpha == 0.0:
        return e1.copy()
    if alpha == 1.0:
        return e2.copy()
    blend = (1.0 - alpha) * e1 + alpha * e2
    norm = float(np.linalg.norm(blend))
    if norm < 1e-8:
        raise ValueError("interpolated embedding vanishes (antipodal inputs "
                         f"at alpha={alpha}); no direction to normalize")
    return blend / norm


# ---------------------------------------------------------------------------
# model-level evaluation protocol


def render_prompt_sample(g_params: dict[str, np.ndarray], cfg: Config,
                         t_embed: np.ndarray,
                         rng: np.random.Generator) -> np.ndarray:
    """Four views of one generated object under the teacher camera protocol.

    Shares one latent across the views; longitudes are 90 degrees apart from
    a random base, elevation drawn once — the same distribution the teacher
    dataset uses.
    """
    ccfg = cfg.camera
    z = rng.normal(size=cfg.generator.z_dim)
    base = rng.uniform(0.0, 360.0)
    elevation = rng.uniform(ccfg.elevation_low, ccfg.elevation_high)
    cams = np.stack([make_camera((base + 90.0 * k) % 360.0, elevation,
                                 ccfg.radius, ccfg.fov_degrees)
                     for k in range(EVAL_VIEWS)])
    zs = np.tile(z, (EVAL_VIEWS, 1))
    ts = np.tile(t_embed, (EVAL_VIEWS, 1))
    rgb, _, _, _ = generate(g_params, zs, cams, cams, ts, cfg)
    return rgb


def distribution_distance(g_params: dict[str, np.ndarray], cfg: Config,
                          rng: np.random.Generator, n_prompts: int = 16,
                          exclude_ids: tuple[int, ...] = ()) -> float:
    """Fréchet embedding distance, generated views vs teacher renders.

    Draws ``n_prompts`` prompts (held-out ids excluded via ``exclude_ids``),
    renders four views per prompt from both the generator and the teacher,
    embeds every view with the oracle, and compares the two embedding sets.
    """
    vocab = teacher.vocabulary(cfg.vocabulary)
    dim = cfg.generator.embed_dim
    pool = [i for i in range(len(vocab)) if i not in set(exclude_ids)]
    if not pool:
        raise ValueError("no prompts left to evaluate after exclusions")
    picks = rng.choice(pool, size=min(n_prompts, len(pool)), replace=False)
    gen_embeds, teach_embeds = [], []
    for pid in picks:
        spec = vocab[int(pid)]
        t_embed = teacher.encode_text(spec.text, dim)
        fake_views = render_prompt_sample(g_params, cfg, t_embed, rng)
        sample = teacher.render_teacher_views(
            spec,
            base_longitude=float(rng.uniform(0.0, 360.0)),
            elevation=float(rng.uniform(cfg.camera.elevation_low,
                                        cfg.camera.elevation_high)),
            seed=int(rng.integers(0, 2**31)),
            resolution=cfg.image_resolution,
            camera_cfg=cfg.camera)
        for k in range(EVAL_VIEWS):
            gen_embeds.append(teacher.encode_image(fake_views[k], dim))
            teach_embeds.append(teacher.encode_image(sample.images[k], dim))
    return frechet_embedding_distance(np.asarray(gen_embeds),
                                      np.asarray(teach_embeds))


def alignment_report(g_params: dict[str, np.ndarray], cfg: Config,
                     heldout_ids: list[int], rng: np.random.Generator,
                     draws: int = 40) -> dict[str, float]:
    """Matched- vs mismatched-prompt similarity on held-out prompts.

    Each draw renders four views of a held-out prompt, then compares the mean
    cosine against that prompt with the mean cosine against a different
    prompt sampled from the rest of the vocabulary.
    """
    if not heldout_ids:
        raise ValueError("no held-out prompts to evaluate")
    vocab = teacher.vocabulary(cfg.vocabulary)
    dim = cfg.generator.embed_dim
    matched, mismatched, wins = [], [], 0
    for _ in range(draws):
        pid = int(rng.choice(heldout_ids))
        others = [i for i in range(len(vocab)) if i != pid]
        other = int(rng.choice(others))
        t_embed = teacher.encode_text(vocab[pid].text, dim)
        views = render_prompt_sample(g_params, cfg, t_embed, rng)
        sim_match = prompt_similarity(views, vocab[pid].text, dim)
        sim_other = prompt_similarity(views, vocab[other].text, dim)
        matched.append(sim_match)
        mismatched.append(sim_other)
        wins += int(sim_match > sim_other)
    return {"draws": draws,
            "matched_mean": float(np.mean(matched)),
            "mismatched_mean": float(np.mean(mismatched)),
            "matched_wins_fraction": wins / draws}


def evaluate_model(g_params: dict[str, np.ndarray], cfg: Config,
                   heldout_ids: list[int], seed: int = 0,
                   n_prompts: int = 16, draws: int = 40,
                   latency_trials: int = 10) -> dict[str, float]:
    """Full evaluation pass: distribution distance, alignment, latency."""
    rng = np.random.default_rng(seed)
    metrics: dict[str, float] = {}
    metrics["fed"] = distribution_distance(g_params, cfg, rng, n_prompts,
                                           exclude_ids=tuple(heldout_ids))
    metrics.update(alignment_report(g_params, cfg, heldout_ids, rng, draws))
    latency = measure_latency(g_params, cfg, trials=latency_trials)
    metrics.update({f"latency_{k}": v for k, v in latency.items()})
    return metrics


def write_metrics(metrics: dict, txt_path, json_path) -> None:
    """Plain-text key=value report plus a machine-readable JSON record."""
    import json as _json

    lines = [f"{k}={metrics[k]}" for k in sorted(metrics)]
    with open(txt_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(json_path, "w") as fh:
        _json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
