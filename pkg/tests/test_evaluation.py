"""Distribution distance, similarity, latency, meshes, and interpolation."""

import json

import numpy as np
import pytest
import scipy.linalg

from tridistill import evaluation as ev
from tridistill import teacher
from tridistill.config import (Config, DecoderConfig, DiscriminatorConfig,
                               GeneratorConfig, RenderConfig, TriPlaneConfig,
                               TrainConfig, VocabularyConfig)
from tridistill.networks import init_generator
from tridistill.triplane import init_decoder

TINY = Config(
    render=RenderConfig(resolution=4, n_samples=4),
    triplane=TriPlaneConfig(resolution=8, channels=3),
    decoder=DecoderConfig(hidden_width=8, color_channels=4),
    generator=GeneratorConfig(z_dim=6, embed_dim=5, mapping_width=12,
                              mapping_layers=2, seed_resolution=4,
                              synthesis_channels=(8, 7),
                              sr_channels=(6,)),
    discriminator=DiscriminatorConfig(channels=(4, 6), head_width=7),
    vocabulary=VocabularyConfig(shapes=("sphere", "box"), colors=("red", "blue"),
                                styles=("plain",), samples_per_prompt=2,
                                heldout_prompts=1, image_resolution=8),
    train=TrainConfig(steps=2, batch=2, seed=5),
)


# ---------------------------------------------------------------------------
# Fréchet embedding distance


def _fed_oracle(a, b, ridge=ev.COVARIANCE_RIDGE):
    """Independent reference via scipy's general matrix square root."""
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ca = np.cov(a, rowvar=False) + ridge * np.eye(a.shape[1])
    cb = np.cov(b, rowvar=False) + ridge * np.eye(b.shape[1])
    cross = scipy.linalg.sqrtm(ca @ cb)
    if np.iscomplexobj(cross):
        cross = cross.real
    gap = mu_a - mu_b
    return float(gap @ gap + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(cross))


def test_fed_identical_sets_is_zero():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 6))
    assert ev.frechet_embedding_distance(x, x.copy()) < 1e-9


def test_fed_gaussian_mean_gap():
    rng = np.random.default_rng(1)
    d, n, gap = 8, 20000, 1.7
    a = rng.normal(size=(n, d))
    b = rng.normal(size=(n, d))
    b[:, 0] += gap
    d2 = ev.frechet_embedding_distance(a, b)
    assert abs(d2 - gap * gap) < 0.05 * gap * gap


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_fed_matches_scipy_sqrtm_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(50, 6)) @ rng.normal(size=(6, 6)) + rng.normal(size=6)
    b = rng.normal(size=(60, 6)) @ rng.normal(size=(6, 6))
    ours = ev.frechet_embedding_distance(a, b)
    assert abs(ours - _fed_oracle(a, b)) < 1e-8


def test_fed_symmetry_and_rotation_invariance():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(45, 5)) * 2.0 + 1.0
    b = rng.normal(size=(45, 5))
    d_ab = ev.frechet_embedding_distance(a, b)
    d_ba = ev.frechet_embedding_distance(b, a)
    assert abs(d_ab - d_ba) < 1e-8
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    d_rot = ev.frechet_embedding_distance(a @ q, b @ q)
    assert abs(d_rot - d_ab) < 1e-8


def test_fed_small_sets_shrinkage_nonnegative():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 9))   # fewer samples than dimensions
    b = rng.normal(size=(3, 9))
    d2 = ev.frechet_embedding_distance(a, b)
    assert np.isfinite(d2) and d2 >= 0.0


def test_fed_input_validation():
    ok = np.zeros((5, 3))
    with pytest.raises(ValueError):
        ev.frechet_embedding_distance(ok, np.zeros((5, 4)))
    with pytest.raises(ValueError):
        ev.frechet_embedding_distance(np.zeros((0, 3)), ok)
    bad = ok.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        ev.frechet_embedding_distance(bad, ok)


# ---------------------------------------------------------------------------
# prompt similarity


def test_similarity_of_matching_embedding_is_one():
    rng = np.random.default_rng(0)
    img = rng.uniform(-1, 1, size=(16, 16, 3))
    emb = teacher.encode_image(img, 12)
    assert abs(ev.prompt_similarity(img, emb, 12) - 1.0) < 1e-12


def test_similarity_range_and_prompt_string_path():
    rng = np.random.default_rng(1)
    imgs = rng.uniform(-1, 1, size=(5, 16, 16, 3))
    sim = ev.prompt_similarity(imgs, "a red sphere, plain", 24)
    assert -1.0 <= sim <= 1.0


def test_similarity_teacher_views_prefer_their_prompt():
    spec = teacher.PromptSpec("sphere", "red", "plain")
    other = teacher.PromptSpec("box", "blue", "plain")
    sample = teacher.render_teacher_views(spec, base_longitude=30.0,
                                          elevation=10.0, seed=3, resolution=32)
    matched = ev.prompt_similarity(sample.images, spec.text, 32)
    mismatched = ev.prompt_similarity(sample.images, other.text, 32)
    assert matched > mismatched


def test_similarity_input_validation():
    with pytest.raises(ValueError):
        ev.prompt_similarity(np.zeros((0, 8, 8, 3)), "a red sphere, plain", 8)
    with pytest.raises(ValueError):
        ev.prompt_similarity(np.zeros((2, 8, 8, 3)), np.zeros(9), 8)
    bad = np.full(8, np.nan)
    with pytest.raises(ValueError):
        ev.prompt_similarity(np.zeros((2, 8, 8, 3)), bad, 8)


# ---------------------------------------------------------------------------
# latency


def test_latency_report_contract():
    params = init_generator(TINY, np.random.default_rng(0))
    report = ev.measure_latency(params, TINY, trials=5)
    assert report["trials"] == 5
    assert 0 < report["p50_ms"] <= report["p95_ms"]
    assert np.isfinite(report["mean_ms"])


def test_latency_rejects_zero_trials():
    params = init_generator(TINY, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ev.measure_latency(params, TINY, trials=0)


# ---------------------------------------------------------------------------
# mesh extraction


def _sphere_density(grid_res: int, radius: float = 0.5) -> np.ndarray:
    axis = np.linspace(-1.0, 1.0, grid_res)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    r = np.sqrt(gx * gx + gy * gy + gz * gz)
    return radius - r  # positive inside, crosses zero exactly at the radius


def test_zero_density_gives_empty_mesh():
    mesh = ev.extract_mesh(None, None, grid_res=24,
                           density=np.zeros((24, 24, 24)))
    assert len(mesh.vertices) == 0 and len(mesh.triangles) == 0


def test_sphere_vertices_near_radius():
    grid_res = 64
    mesh = ev.extract_mesh(None, None, grid_res=grid_res, iso_level=0.0,
                           density=_sphere_density(grid_res))
    assert len(mesh.vertices) > 100
    radii = np.linalg.norm(mesh.vertices, axis=1)
    cell = 2.0 / (grid_res - 1)
    assert np.abs(radii - 0.5).max() < 2 * cell


def test_sphere_mesh_is_closed_manifold():
    mesh = ev.extract_mesh(None, None, grid_res=32, iso_level=0.0,
                           density=_sphere_density(32))
    counts = {}
    for tri in mesh.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    assert counts and all(c == 2 for c in counts.values())


def test_sphere_mesh_has_no_degenerate_triangles():
    mesh = ev.extract_mesh(None, None, grid_res=32, iso_level=0.0,
                           density=_sphere_density(32))
    areas = ev._triangle_areas(mesh.vertices, mesh.triangles)
    assert (areas > 1e-12).all()


def test_vertex_count_monotone_in_grid_res():
    counts = [len(ev.extract_mesh(None, None, grid_res=r, iso_level=0.0,
                                  density=_sphere_density(r)).vertices)
              for r in (16, 24, 32, 48)]
    assert all(b >= a for a, b in zip(counts, counts[1:]))


def test_default_iso_level_is_half_opacity_over_a_voxel():
    grid_res = 64
    iso = ev.default_iso_level(grid_res)
    voxel = 2.0 / (grid_res - 1)
    assert abs((1.0 - np.exp(-iso * voxel)) - 0.5) < 1e-12


def test_density_grid_from_decoded_field():
    rng = np.random.default_rng(0)
    planes = rng.normal(size=(TINY.triplane.resolution,
                              TINY.triplane.resolution,
                              TINY.triplane.total_channels))
    dec = init_decoder(TINY.triplane, TINY.decoder, rng)
    vol = ev.density_grid(planes, dec, grid_res=8)
    assert vol.shape == (8, 8, 8)
    assert np.isfinite(vol).all() and (vol > 0).all()  # softplus density
    mesh = ev.extract_mesh(planes, dec, grid_res=8)
    assert isinstance(mesh, ev.Mesh)


def test_extract_mesh_rejects_tiny_grid():
    with pytest.raises(ValueError):
        ev.extract_mesh(None, None, grid_res=1, density=np.zeros((1, 1, 1)))


def test_mesh_rejects_out_of_range_indices():
    with pytest.raises(ValueError):
        ev.Mesh(np.zeros((3, 3)), np.array([[0, 1, 5]]))


def test_ply_export_layout(tmp_path):
    mesh = ev.extract_mesh(None, None, grid_res=16, iso_level=0.0,
                           density=_sphere_density(16))
    path = tmp_path / "sphere.ply"
    ev.write_ply(mesh, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "ply" and lines[1] == "format ascii 1.0"
    n_v, n_f = len(mesh.vertices), len(mesh.triangles)
    assert f"element vertex {n_v}" in lines
    assert f"element face {n_f}" in lines
    assert lines.index(f"element vertex {n_v}") < lines.index(f"element face {n_f}")
    body = lines[lines.index("end_header") + 1:]
    assert len(body) == n_v + n_f
    # vertices first, then faces
    assert all(not row.startswith("3 ") or i >= n_v for i, row in enumerate(body))
    for row in body[n_v:]:
        parts = row.split()
        assert parts[0] == "3"
        assert all(0 <= int(p) < n_v for p in parts[1:])


# ---------------------------------------------------------------------------
# prompt interpolation


def test_interpolation_endpoints_are_exact():
    p1, p2 = "a red sphere, plain", "a blue box, plain"
    e1 = teacher.encode_text(p1, 16)
    e2 = teacher.encode_text(p2, 16)
    assert np.array_equal(ev.interpolate_prompts(p1, p2, 0.0, 16), e1)
    assert np.array_equal(ev.interpolate_prompts(p1, p2, 1.0, 16), e2)


def test_interpolation_unit_norm():
    p1, p2 = "a red sphere, plain", "a yellow torus, striped"
    for alpha in np.linspace(0.0, 1.0, 11):
        e = ev.interpolate_prompts(p1, p2, float(alpha), 16)
        assert abs(np.linalg.norm(e) - 1.0) < 1e-12


def test_interpolation_antipodal_midpoint_raises():
    e = teacher.encode_text("a red sphere, plain", 16)
    with pytest.raises(ValueError, match="antipodal"):
        ev.interpolate_prompts(e, -e, 0.5, 16)


def test_interpolation_rejects_alpha_out_of_range():
    with pytest.raises(ValueError):
        ev.interpolate_prompts("a red sphere, plain", "a blue box, plain", 1.5, 16)


def test_interpolation_sweep_moves():
    p1, p2 = "a red sphere, plain", "a blue box, plain"
    frames = [ev.interpolate_prompts(p1, p2, a, 16)
              for a in np.linspace(0.0, 1.0, 6)]
    for a, b in zip(frames, frames[1:]):
        assert not np.array_equal(a, b)


# ---------------------------------------------------------------------------
# model-level protocol


def test_render_prompt_sample_shape_and_determinism():
    params = init_generator(TINY, np.random.default_rng(0))
    t = teacher.encode_text("a red sphere, plain", TINY.generator.embed_dim)
    views1 = ev.render_prompt_sample(params, TINY, t, np.random.default_rng(4))
    views2 = ev.render_prompt_sample(params, TINY, t, np.random.default_rng(4))
    assert views1.shape == (ev.EVAL_VIEWS, TINY.image_resolution,
                            TINY.image_resolution, 3)
    assert np.array_equal(views1, views2)
    assert views1.min() >= -1.0 - 1e-9 and views1.max() <= 1.0 + 1e-9


def test_distribution_distance_runs_and_is_deterministic():
    params = init_generator(TINY, np.random.default_rng(0))
    d1 = ev.distribution_distance(params, TINY, np.random.default_rng(2),
                                  n_prompts=2)
    d2 = ev.distribution_distance(params, TINY, np.random.default_rng(2),
                                  n_prompts=2)
    assert d1 == d2
    assert np.isfinite(d1) and d1 > 0.0


def test_distribution_distance_requires_prompts():
    params = init_generator(TINY, np.random.default_rng(0))
    all_ids = tuple(range(len(teacher.vocabulary(TINY.vocabulary))))
    with pytest.raises(ValueError):
        ev.distribution_distance(params, TINY, np.random.default_rng(0),
                                 exclude_ids=all_ids)


def test_alignment_report_contract():
    params = init_generator(TINY, np.random.default_rng(0))
    report = ev.alignment_report(params, TINY, heldout_ids=[1], draws=3,
                                 rng=np.random.default_rng(0))
    assert report["draws"] == 3
    assert 0.0 <= report["matched_wins_fraction"] <= 1.0
    assert -1.0 <= report["matched_mean"] <= 1.0
    with pytest.raises(ValueError):
        ev.alignment_report(params, TINY, heldout_ids=[], draws=2,
                            rng=np.random.default_rng(0))


def test_write_metrics_formats(tmp_path):
    metrics = {"fed": 1.25, "draws": 4, "matched_wins_fraction": 0.75}
    txt, js = tmp_path / "metrics.txt", tmp_path / "metrics.json"
    ev.write_metrics(metrics, txt, js)
    lines = txt.read_text().strip().splitlines()
    assert lines == [f"{k}={metrics[k]}" for k in sorted(metrics)]
    assert json.loads(js.read_text()) == metrics
