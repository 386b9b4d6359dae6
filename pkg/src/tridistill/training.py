"""Alternating adversarial training: compiled step graphs, Adam, checkpoints.

The three hot graphs (discriminator step, regularized discriminator step,
generator step) are compiled once and rerun with mutated leaf bindings, so a
training step allocates almost nothing. Parameters are updated in place;
the bindings dictionaries hold references to the live arrays.
"""

from __future__ import annotations

import json
import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import teacher
from .config import Config
from .networks import (build_discriminator, build_generator,
                       discriminator_param_shapes, generator_param_shapes,
                       init_discriminator, init_generator, plan_rays)
from .objectives import (build_alignment_loss, build_discriminator_loss,
                         build_generator_loss, build_r1_penalty)

CHECKPOINT_MAGIC = b"TPGC"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamSlots:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(params: dict[str, np.ndarray]) -> AdamSlots:
    return AdamSlots(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()})


def adam_apply(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               slots: AdamSlots, lr: float, beta1: float = 0.0,
               beta2: float = 0.99, eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction."""
    slots.t += 1
    c1 = 1.0 - beta1 ** slots.t
    c2 = 1.0 - beta2 ** slots.t
    for name in sorted(params):
        g = grads[name]
        m, v = slots.m[name], slots.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# train state


@dataclass
class TrainState:
    config: Config
    g_params: dict[str, np.ndarray]
    d_params: dict[str, np.ndarray]
    g_opt: AdamSlots
    d_opt: AdamSlots
    step: int
    rng: np.random.Generator
    # Detached fake batch rendered by the most recent generator update; the
    # next discriminator update trains against it, which avoids a second full
    # generator forward per step.  Carried through checkpoints so an
    # interrupted run resumes bit-identically.  None until the first step,
    # which primes it with a one-off synthesis.
    fake_images: np.ndarray | None = None
    fake_cond: np.ndarray | None = None


def init_train_state(cfg: Config) -> TrainState:
    rng = np.random.default_rng(cfg.train.seed)
    g_params = init_generator(cfg, np.random.default_rng(cfg.train.seed + 1))
    d_params = init_discriminator(cfg, np.random.default_rng(cfg.train.seed + 2))
    return TrainState(config=cfg, g_params=g_params, d_params=d_params,
                      g_opt=adam_init(g_params), d_opt=adam_init(d_params),
                      step=0, rng=rng)


# ---------------------------------------------------------------------------
# checkpoints


def _state_tensors(state: TrainState) -> list[tuple[str, np.ndarray]]:
    groups = [("g", state.g_params), ("d", state.d_params),
              ("gm", state.g_opt.m), ("gv", state.g_opt.v),
              ("dm", state.d_opt.m), ("dv", state.d_opt.v)]
    if state.fake_images is not None:
        groups.append(("cache", {"fake_img": state.fake_images,
                                 "fake_cond": state.fake_cond}))
    return [(f"{tag}/{name}", group[name])
            for tag, group in groups for name in sorted(group)]


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Versioned binary container; see docs/formats.md for the byte layout."""
    tensors = _state_tensors(state)
    header = {
        "config_hash": state.config.digest(),
        "step": state.step,
        "g_opt_t": state.g_opt.t,
        "d_opt_t": state.d_opt.t,
        "rng_state": state.rng.bit_generator.state,
        "tensors": [[name, list(arr.shape)] for name, arr in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path, cfg: Config,
                    allow_config_mismatch: bool = False) -> TrainState:
    """Load and verify magic, version, and config hash; rebuild the state."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file "
                             f"(bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint format version {version} not supported "
                             f"(this build reads version {CHECKPOINT_VERSION})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        if header["config_hash"] != cfg.digest():
            msg = (f"checkpoint was written with config hash "
                   f"{header['config_hash'][:12]}..., current config hashes to "
                   f"{cfg.digest()[:12]}...")
            if not allow_config_mismatch:
                raise ValueError(msg + " (pass allow_config_mismatch to override)")
            warnings.warn(msg)
        arrays: dict[str, np.ndarray] = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"checkpoint truncated in tensor '{name}'")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    def group(tag: str) -> dict[str, np.ndarray]:
        prefix = f"{tag}/"
        return {name[len(prefix):]: arr for name, arr in arrays.items()
                if name.startswith(prefix)}

    want_g = generator_param_shapes(cfg)
    want_d = discriminator_param_shapes(cfg)
    g_params, d_params = group("g"), group("d")
    for want, got, label in ((want_g, g_params, "generator"),
                             (want_d, d_params, "discriminator")):
        if set(want) != set(got):
            raise ValueError(f"checkpoint {label} tensors do not match the "
                             f"current architecture")
    g_opt = AdamSlots(m=group("gm"), v=group("gv"), t=header["g_opt_t"])
    d_opt = AdamSlots(m=group("dm"), v=group("dv"), t=header["d_opt_t"])
    cache = group("cache")
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    return TrainState(config=cfg, g_params=g_params, d_params=d_params,
                      g_opt=g_opt, d_opt=d_opt, step=header["step"], rng=rng,
                      fake_images=cache.get("fake_img"),
                      fake_cond=cache.get("fake_cond"))


# ---------------------------------------------------------------------------
# data sampling


class BatchSampler:
    """Draws training batches from a synthesized dataset.

    Decoded images are cached in their 8-bit form (the desk dataset fits in
    well under 100 MB that way). Every sampling path asserts that held-out
    prompts never reach the training loop.
    """

    def __init__(self, data_dir: str | Path, cfg: Config):
        self.data_dir = Path(data_dir)
        self.cfg = cfg
        records = teacher.load_manifest(self.data_dir)
        if not records:
            raise ValueError(f"dataset at {self.data_dir} has an empty manifest")
        self.train_records = [r for r in records if r["split"] == "train"]
        if not self.train_records:
            raise ValueError("dataset has no training-split records")
        self.heldout_ids = frozenset(r["prompt_id"] for r in records
                                     if r["split"] == "heldout")
        self.train_prompt_ids = sorted({r["prompt_id"] for r in self.train_records})
        vocab = teacher.vocabulary(cfg.vocabulary)
        dim = cfg.generator.embed_dim
        self.embeddings = {pid: teacher.encode_text(vocab[pid], dim)
                           for pid in range(len(vocab))}
        self._cache: dict[str, np.ndarray] = {}

    def _image(self, record: dict) -> np.ndarray:
        raw = self._cache.get(record["path"])
        if raw is None:
            raw = teacher.image_to_uint8(teacher.load_image(self.data_dir, record))
            self._cache[record["path"]] = raw
        return teacher.uint8_to_image(raw)

    def real_batch(self, rng: np.random.Generator, batch: int):
        """(images, cameras, prompt embeddings, prompt ids) for the D step."""
        picks = rng.integers(0, len(self.train_records), size=batch)
        recs = [self.train_records[i] for i in picks]
        ids = [r["prompt_id"] for r in recs]
        assert not any(pid in self.heldout_ids for pid in ids), \
            "held-out prompt leaked into a training batch"
        images = np.stack([self._image(r) for r in recs])
        cameras = np.stack([np.asarray(r["camera"], dtype=np.float64) for r in recs])
        embeds = np.stack([self.embeddings[pid] for pid in ids])
        return images, cameras, embeds, ids

    def prompt_batch(self, rng: np.random.Generator, batch: int):
        """Uniform prompts over the training vocabulary for the G step."""
        ids = [int(i) for i in rng.choice(self.train_prompt_ids, size=batch)]
        assert not any(pid in self.heldout_ids for pid in ids), \
            "held-out prompt leaked into a generator batch"
        return ids, np.stack([self.embeddings[pid] for pid in ids])

    def random_cameras(self, rng: np.random.Generator, batch: int) -> np.ndarray:
        from . import camera as cam

        ccfg = self.cfg.camera
        out = np.empty((batch, 25))
        for i in range(batch):
            lon = rng.uniform(0.0, 360.0)
            elev = rng.uniform(ccfg.elevation_low, ccfg.elevation_high)
            out[i] = cam.make_camera(lon, elev, ccfg.radius, ccfg.fov_degrees)
        return out


# ---------------------------------------------------------------------------
# step graphs


@dataclass
class TrainingGraphs:
    cfg: Config
    d_names: list[str]
    g_names: list[str]
    d_plain: ad.CompiledGraph
    d_reg: ad.CompiledGraph
    g_fake: ad.CompiledGraph
    g_step: ad.CompiledGraph
    idx_shape: tuple[int, ...]


def build_training_graphs(cfg: Config,
                          g_loss_variant: str = "non-saturating") -> TrainingGraphs:
    tr = cfg.train
    batch = tr.batch
    res_img = cfg.image_resolution
    dim = cfg.generator.embed_dim
    cond_dim = 25 + dim
    points = batch * cfg.render.resolution ** 2 * cfg.render.n_samples
    idx_shape = (3, 4, points)

    d_shapes = discriminator_param_shapes(cfg)
    g_shapes = generator_param_shapes(cfg)
    d_names = sorted(d_shapes)
    g_names = sorted(g_shapes)

    # discriminator step (shared nodes feed both the plain and regularized graph)
    d_leaves = {k: ad.leaf(f"d/{k}", d_shapes[k]) for k in d_names}
    real_img = ad.leaf("data/real_img", (batch, res_img, res_img, 3))
    real_cond = ad.leaf("data/real_cond", (batch, cond_dim))
    fake_img = ad.leaf("data/fake_img", (batch, res_img, res_img, 3))
    fake_cond = ad.leaf("data/fake_cond", (batch, cond_dim))
    real_logits = build_discriminator(real_img, real_cond, d_leaves, cfg)
    fake_logits = build_discriminator(fake_img, fake_cond, d_leaves, cfg)
    l_d = build_discriminator_loss(real_logits, fake_logits)
    stats = [ad.mean(real_logits), ad.mean(fake_logits)]
    wrt = [d_leaves[k] for k in d_names]
    d_plain = ad.CompiledGraph([l_d] + stats + ad.grad(l_d, wrt))
    r1 = build_r1_penalty(real_logits, real_img)
    l_reg = l_d + ad.const(tr.lambda_r1 * tr.r1_interval) * r1
    d_reg = ad.CompiledGraph([l_reg, l_d, r1] + stats + ad.grad(l_reg, wrt))

    # generator forward only: produces detached fakes for the discriminator step
    gf_leaves = {k: ad.leaf(f"g/{k}", g_shapes[k]) for k in g_names}
    zp_f = ad.leaf("data/zp", (batch, cfg.generator.z_dim + 25))
    t_f = ad.leaf("data/t_embed", (batch, dim))
    idx_f = ad.leaf("data/idx", idx_shape, dtype=np.int64)
    wgt_f = ad.leaf("data/wgt", idx_shape)
    g_fake = ad.CompiledGraph(
        [build_generator(zp_f, t_f, idx_f, wgt_f, gf_leaves, cfg)["rgb"]])

    # generator step: full pipeline, adversarial + alignment losses
    gs_leaves = {k: ad.leaf(f"g/{k}", g_shapes[k]) for k in g_names}
    ds_leaves = {k: ad.leaf(f"d/{k}", d_shapes[k]) for k in d_names}
    zp = ad.leaf("data/zp", (batch, cfg.generator.z_dim + 25))
    t_embed = ad.leaf("data/t_embed", (batch, dim))
    idx = ad.leaf("data/idx", idx_shape, dtype=np.int64)
    wgt = ad.leaf("data/wgt", idx_shape)
    render_cond = ad.leaf("data/render_cond", (batch, cond_dim))
    rgb = build_generator(zp, t_embed, idx, wgt, gs_leaves, cfg)["rgb"]
    logits = build_discriminator(rgb, render_cond, ds_leaves, cfg)
    l_adv = build_generator_loss(logits, g_loss_variant)
    l_clip = build_alignment_loss(rgb, t_embed, dim)
    l_g = l_adv + ad.const(tr.lambda_clip) * l_clip
    g_wrt = [gs_leaves[k] for k in g_names]
    g_step = ad.CompiledGraph([l_g, l_adv, l_clip, ad.mean(logits), rgb]
                              + ad.grad(l_g, g_wrt))

    return TrainingGraphs(cfg=cfg, d_names=d_names, g_names=g_names,
                          d_plain=d_plain, d_reg=d_reg, g_fake=g_fake,
                          g_step=g_step, idx_shape=idx_shape)


# ---------------------------------------------------------------------------
# steps


def _prefixed(tag: str, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{tag}/{k}": v for k, v in params.items()}


def _conditioning_cameras(cameras: np.ndarray, sampler: BatchSampler,
                          rng: np.random.Generator, swap_prob: float) -> np.ndarray:
    """Mapping-network camera conditioning, decorrelated from the render view.

    With probability swap_prob a sample's conditioning camera is replaced by an
    independent draw, so the synthesized field cannot encode the render pose.
    """
    cond = cameras.copy()
    swap = rng.random(len(cond)) < swap_prob
    if swap.any():
        cond[swap] = sampler.random_cameras(rng, int(swap.sum()))
    return cond


def discriminator_step(state: TrainState, graphs: TrainingGraphs,
                       real_img: np.ndarray, real_cond: np.ndarray,
                       fake_img: np.ndarray, fake_cond: np.ndarray,
                       apply_r1: bool) -> dict[str, float]:
    tr = state.config.train
    bind = _prefixed("d", state.d_params)
    bind.update({"data/real_img": real_img, "data/real_cond": real_cond,
                 "data/fake_img": fake_img, "data/fake_cond": fake_cond})
    metrics: dict[str, float]
    if apply_r1:
        out = graphs.d_reg.run(bind)
        _, l_d, r1, real_mean, fake_mean = (float(v) for v in out[:5])
        grads_flat = out[5:]
        metrics = {"l_d": l_d, "r1": r1, "d_real": real_mean, "d_fake": fake_mean}
    else:
        out = graphs.d_plain.run(bind)
        l_d, real_mean, fake_mean = (float(v) for v in out[:3])
        grads_flat = out[3:]
        metrics = {"l_d": l_d, "d_real": real_mean, "d_fake": fake_mean}
    grads = dict(zip(graphs.d_names, grads_flat))
    adam_apply(state.d_params, grads, state.d_opt, tr.lr_d, tr.beta1, tr.beta2,
               tr.adam_eps)
    return metrics


def generator_step(state: TrainState, graphs: TrainingGraphs, zp: np.ndarray,
                   t_embed: np.ndarray, idx: np.ndarray, wgt: np.ndarray,
                   render_cond: np.ndarray) -> tuple[dict[str, float], np.ndarray]:
    """Adversarial + alignment update of G; also returns the rendered fakes.

    The returned images are detached copies (rendered before the parameter
    update); the caller feeds them to the next discriminator update.
    """
    tr = state.config.train
    bind = _prefixed("g", state.g_params)
    bind.update(_prefixed("d", state.d_params))
    bind.update({"data/zp": zp, "data/t_embed": t_embed, "data/idx": idx,
                 "data/wgt": wgt, "data/render_cond": render_cond})
    out = graphs.g_step.run(bind)
    l_g, l_adv, l_clip, logit_mean = (float(v) for v in out[:4])
    rgb = out[4].copy()  # buffer is reused by the next run; detach now
    grads = dict(zip(graphs.g_names, out[5:]))
    adam_apply(state.g_params, grads, state.g_opt, tr.lr_g, tr.beta1, tr.beta2,
               tr.adam_eps)
    metrics = {"l_g": l_g, "g_adv": l_adv, "l_clip": l_clip, "g_logit": logit_mean}
    return metrics, rgb


def synthesize_fakes(state: TrainState, graphs: TrainingGraphs,
                     sampler: BatchSampler, rng: np.random.Generator):
    """Sample (z, prompt, camera), render fake images, return them detached."""
    cfg = state.config
    batch = cfg.train.batch
    z = rng.normal(size=(batch, cfg.generator.z_dim))
    ids, t_embed = sampler.prompt_batch(rng, batch)
    cameras = sampler.random_cameras(rng, batch)
    cond_cam = _conditioning_cameras(cameras, sampler, rng,
                                     cfg.train.pose_swap_prob)
    idx, wgt, _ = plan_rays(cameras, cfg)
    zp = np.concatenate([z, cond_cam], axis=1)
    bind = _prefixed("g", state.g_params)
    bind.update({"data/zp": zp, "data/t_embed": t_embed, "data/idx": idx,
                 "data/wgt": wgt})
    rgb = graphs.g_fake.run(bind)[0].copy()  # buffer is reused; detach now
    return rgb, cameras, t_embed, ids, zp, idx, wgt


def train_step(state: TrainState, graphs: TrainingGraphs,
               sampler: BatchSampler) -> dict[str, float]:
    """One alternating D/G update; returns the step's metrics.

    The discriminator trains against the detached fake batch rendered by the
    previous step's generator update (primed by a one-off synthesis on the
    first step), so each step runs exactly one generator forward. The
    generator update itself always samples fresh latents, prompts, and
    cameras.
    """
    cfg = state.config
    rng = state.rng
    batch = cfg.train.batch

    real_img, real_cams, real_embeds, _ = sampler.real_batch(rng, batch)
    real_cond = np.concatenate([real_cams, real_embeds], axis=1)
    if state.fake_images is None:
        fake_img, fake_cams, fake_embeds, _, _, _, _ = synthesize_fakes(
            state, graphs, sampler, rng)
        state.fake_images = fake_img
        state.fake_cond = np.concatenate([fake_cams, fake_embeds], axis=1)
    apply_r1 = cfg.train.lambda_r1 > 0 and state.step % cfg.train.r1_interval == 0
    d_metrics = discriminator_step(state, graphs, real_img, real_cond,
                                   state.fake_images, state.fake_cond, apply_r1)

    z = rng.normal(size=(batch, cfg.generator.z_dim))
    _, t_embed = sampler.prompt_batch(rng, batch)
    cameras = sampler.random_cameras(rng, batch)
    cond_cam = _conditioning_cameras(cameras, sampler, rng,
                                     cfg.train.pose_swap_prob)
    idx, wgt, _ = plan_rays(cameras, cfg)
    zp = np.concatenate([z, cond_cam], axis=1)
    render_cond = np.concatenate([cameras, t_embed], axis=1)
    g_metrics, rendered = generator_step(state, graphs, zp, t_embed, idx, wgt,
                                         render_cond)
    state.fake_images = rendered
    state.fake_cond = render_cond

    metrics = {**d_metrics, **g_metrics}
    state.step += 1
    return metrics


class TrainingDiverged(RuntimeError):
    pass


def _check_finite(metrics: dict[str, float], step: int, out_dir: Path | None) -> None:
    bad = {k: v for k, v in metrics.items() if not np.isfinite(v)}
    if not bad:
        return
    dump = None
    if out_dir is not None:
        dump = out_dir / f"divergence_step{step:06d}.json"
        dump.write_text(json.dumps({"step": step, "metrics": metrics,
                                    "non_finite": sorted(bad)}, indent=2))
    raise TrainingDiverged(f"non-finite loss at step {step}: {sorted(bad)}"
                           + (f" (diagnostics in {dump})" if dump else ""))


# ---------------------------------------------------------------------------
# metrics log


class MetricsLog:
    """Append-only text log: one `key=value` record per line."""

    FIELDS = ("step", "l_d", "l_g", "r1", "l_clip", "d_real", "d_fake", "wall_s")

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a")

    def write(self, step: int, metrics: dict[str, float], wall_s: float) -> None:
        vals = {"step": step, "wall_s": wall_s, **metrics}
        parts = [f"step={step}"]
        for k in self.FIELDS[1:]:
            # r1 is only computed on regularized steps; log nan in between
            parts.append(f"{k}={float(vals.get(k, float('nan'))):.9g}")
        self._fh.write(" ".join(parts) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    @staticmethod
    def read(path: str | Path) -> list[dict[str, float]]:
        rows = []
        with open(path) as fh:
            for line in fh:
                parts = dict(p.split("=", 1) for p in line.split())
                rows.append({k: (int(v) if k == "step" else float(v))
                             for k, v in parts.items()})
        return rows


# ---------------------------------------------------------------------------
# driver


def latest_checkpoint(out_dir: str | Path) -> Path | None:
    ckpts = sorted(Path(out_dir).glob("checkpoints/step_*.ckpt"))
    return ckpts[-1] if ckpts else None


def run_training(cfg: Config, data_dir: str | Path, out_dir: str | Path,
                 resume: bool = False, on_step=None) -> TrainState:
    """Train to cfg.train.steps; write checkpoints, metrics, and the config.

    Fully deterministic for a given seed in single-worker mode (the only mode
    implemented: data decoding is cheap next to the step itself).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_path = out / "config.json"
    config_path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    sampler = BatchSampler(data_dir, cfg)
    graphs = build_training_graphs(cfg)
    ckpt = latest_checkpoint(out) if resume else None
    state = load_checkpoint(ckpt, cfg) if ckpt else init_train_state(cfg)

    log = MetricsLog(out / "metrics.log")
    try:
        while state.step < cfg.train.steps:
            t0 = time.monotonic()
            step_before = state.step
            metrics = train_step(state, graphs, sampler)
            _check_finite(metrics, step_before, out)
            log.write(step_before, metrics, time.monotonic() - t0)
            if on_step is not None:
                on_step(step_before, metrics)
            at_interval = state.step % cfg.train.checkpoint_interval == 0
            if at_interval or state.step == cfg.train.steps:
                save_checkpoint(state, out / "checkpoints" /
                                f"step_{state.step:06d}.ckpt")
    finally:
        log.close()
    final = out / "checkpoints" / f"step_{state.step:06d}.ckpt"
    if not final.exists():
        save_checkpoint(state, final)
    return state
