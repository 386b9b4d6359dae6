"""Command-line interface: dataset synthesis, training, and inference.

Subcommands: synth-data, train, generate, extract-mesh, eval, interpolate.
Exit codes: 0 on success, 1 on usage errors (bad flags, missing required
arguments), 2 on runtime failures (missing files, bad data, divergence).

Configuration precedence, highest first: explicit flags, then a config.json
found next to the inputs (the file every command echoes into its output
directory), then the built-in preset.  Passing --preset explicitly replaces
a found config file as the baseline, since flags outrank it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation, teacher, training
from .camera import make_camera
from .config import Config, config_from_dict, get_config
from .networks import generate as generate_views
from .networks import map_latent, synthesize_triplane


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# Train-loop fields settable from the command line (flag dest == field name).
_TRAIN_FLAG_FIELDS = ("seed", "steps", "batch", "lr_g", "lr_d", "lambda_r1",
                      "lambda_clip", "r1_interval", "workers")


def _find_config_file(args) -> Path | None:
    """Locate an echoed config.json next to the command's inputs.

    Checked in order: beside the checkpoint (and its run directory), in the
    output directory (supports resuming a run or re-filling a prepared
    directory with its recorded settings), then in the dataset directory.
    """
    candidates = []
    ckpt = getattr(args, "checkpoint", None)
    if ckpt:
        p = Path(ckpt)
        candidates += [p.parent / "config.json", p.parent.parent / "config.json"]
    out = getattr(args, "out", None)
    if out:
        candidates.append(Path(out) / "config.json")
    data = getattr(args, "data", None)
    if data:
        candidates.append(Path(data) / "config.json")
    for cand in candidates:
        if cand.is_file():
            return cand
    return None


def _resolve_config(args, apply_train_flags: bool = False) -> Config:
    """Build the effective config: flags > config file > built-in preset."""
    cfg_file = _find_config_file(args)
    if getattr(args, "preset", None) is not None:
        cfg = get_config(args.preset)
    elif cfg_file is not None:
        try:
            cfg = config_from_dict(json.loads(cfg_file.read_text()))
        except (KeyError, TypeError, ValueError) as err:
            raise ValueError(f"malformed config file {cfg_file}: {err}") from err
    else:
        cfg = get_config("desk")
    if apply_train_flags:
        overrides = {name: getattr(args, name) for name in _TRAIN_FLAG_FIELDS
                     if getattr(args, name, None) is not None}
        if overrides:
            cfg = dataclasses.replace(
                cfg, train=dataclasses.replace(cfg.train, **overrides))
    return cfg


def _echo_config(cfg: Config, out_dir: Path) -> None:
    """Write the effective config into the output directory for provenance."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def _load_generator(args, cfg: Config) -> dict[str, np.ndarray]:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state = training.load_checkpoint(path, cfg)
    return state.g_params


def _default_prompt(cfg: Config, last: bool = False) -> str:
    vocab = teacher.vocabulary(cfg.vocabulary)
    return vocab[-1].text if last else vocab[0].text


def _save_png(image: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(teacher.image_to_uint8(image)).save(path)


def _render_turntable(g_params, cfg: Config, prompt: str, seed: int,
                      longitudes, elevation: float = 15.0) -> np.ndarray:
    """Render one object (fixed latent) from a sweep of longitudes."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(cfg.generator.z_dim)
    t_embed = teacher.encode_text(prompt, cfg.generator.embed_dim)
    cams = np.stack([make_camera(float(lon), elevation, cfg.camera.radius,
                                 cfg.camera.fov_degrees) for lon in longitudes])
    n = len(cams)
    zs = np.repeat(z[None, :], n, axis=0)
    ts = np.repeat(t_embed[None, :], n, axis=0)
    rgb, _, _, _ = generate_views(g_params, zs, cams, cams, ts, cfg)
    return rgb


def _cmd_synth_data(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    records = teacher.synthesize_dataset(cfg.vocabulary, out, rng, cfg.camera)
    _echo_config(cfg, out)
    heldout = sorted({r["prompt_id"] for r in records if r["split"] == "heldout"})
    print(f"wrote {len(records)} images for "
          f"{len({r['prompt_id'] for r in records})} prompts to {out} "
          f"(held out: {heldout})")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args, apply_train_flags=True)
    out = Path(args.out)
    last = {"step": None}

    def report(step, metrics):
        last["step"] = step
        if step % 100 == 0:
            print(f"step {step}: l_d={metrics['l_d']:.4f} "
                  f"l_g={metrics['l_g']:.4f} l_clip={metrics['l_clip']:.4f}")

    state = training.run_training(cfg, args.data, out, resume=True,
                                  on_step=report)
    print(f"finished at step {state.step}; checkpoints in {out / 'checkpoints'}")
    return 0


def _cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    g_params = _load_generator(args, cfg)
    prompt = args.prompt or _default_prompt(cfg)
    frames = args.frames if args.frames is not None else 8
    if frames < 1:
        raise ValueError(f"--frames must be positive, got {frames}")
    seed = args.seed if args.seed is not None else 0
    longitudes = [360.0 * k / frames for k in range(frames)]
    rgb = _render_turntable(g_params, cfg, prompt, seed, longitudes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(frames):
        _save_png(rgb[k], out / f"frame_{k:03d}.png")
    _echo_config(cfg, out)
    print(f"wrote {frames} views of {prompt!r} to {out}")
    return 0


def _cmd_extract_mesh(args) -> int:
    cfg = _resolve_config(args)
    g_params = _load_generator(args, cfg)
    prompt = args.prompt or _default_prompt(cfg)
    seed = args.seed if args.seed is not None else 0
    grid_res = args.grid_res if args.grid_res is not None else 64
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(cfg.generator.z_dim)
    t_embed = teacher.encode_text(prompt, cfg.generator.embed_dim)
    cam = make_camera(0.0, 15.0, cfg.camera.radius, cfg.camera.fov_degrees)
    w = map_latent(z, cam, t_embed, g_params, cfg)
    planes = synthesize_triplane(w, g_params, cfg)
    dec_params = {key.split("/", 1)[1]: val for key, val in g_params.items()
                  if key.startswith("dec/")}
    mesh = evaluation.extract_mesh(planes, dec_params, grid_res=grid_res)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ply = out / "mesh.ply"
    evaluation.write_ply(mesh, ply)
    _echo_config(cfg, out)
    print(f"wrote mesh for {prompt!r}: {len(mesh.vertices)} vertices, "
          f"{len(mesh.triangles)} triangles -> {ply}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    g_params = _load_generator(args, cfg)
    records = teacher.load_manifest(args.data)
    heldout = sorted({r["prompt_id"] for r in records if r["split"] == "heldout"})
    seed = args.seed if args.seed is not None else 0
    metrics = evaluation.evaluate_model(g_params, cfg, heldout, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_metrics(metrics, out / "metrics.txt", out / "metrics.json")
    _echo_config(cfg, out)
    for key in sorted(metrics):
        print(f"{key}={metrics[key]}")
    return 0


def _cmd_interpolate(args) -> int:
    cfg = _resolve_config(args)
    g_params = _load_generator(args, cfg)
    prompt_a = args.prompt or _default_prompt(cfg)
    prompt_b = args.prompt_b or _default_prompt(cfg, last=True)
    frames = args.frames if args.frames is not None else 10
    if frames < 2:
        raise ValueError(f"--frames must be at least 2, got {frames}")
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(cfg.generator.z_dim)
    cam = make_camera(30.0, 15.0, cfg.camera.radius, cfg.camera.fov_degrees)
    t_a = teacher.encode_text(prompt_a, cfg.generator.embed_dim)
    t_b = teacher.encode_text(prompt_b, cfg.generator.embed_dim)
    alphas = np.linspace(0.0, 1.0, frames)
    embeds = np.stack([evaluation.interpolate_prompts(t_a, t_b, float(a),
                                                      cfg.generator.embed_dim)
                       for a in alphas])
    n = len(alphas)
    zs = np.repeat(z[None, :], n, axis=0)
    cams = np.repeat(cam[None, :], n, axis=0)
    rgb, _, _, _ = generate_views(g_params, zs, cams, cams, embeds, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(n):
        _save_png(rgb[k], out / f"frame_{k:03d}.png")
    _echo_config(cfg, out)
    print(f"wrote {n} interpolation frames {prompt_a!r} -> {prompt_b!r} to {out}")
    return 0


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--preset", choices=["paper", "desk"], default=None,
                     help="built-in configuration preset (default: desk, or the "
                          "config file found next to the inputs)")
    sub.add_argument("--seed", type=int, default=None, help="random seed")


def build_parser() -> _Parser:
    parser = _Parser(prog="tridistill",
                     description="Text-conditioned tri-plane 3D generator: "
                                 "data synthesis, training, and inference.")
    subs = parser.add_subparsers(dest="command", parser_class=_Parser,
                                 metavar="COMMAND")
    subs.required = True

    p = subs.add_parser("synth-data", help="render the multi-view image dataset")
    _add_common(p)
    p.add_argument("--out", default="dataset", help="output dataset directory")
    p.add_argument("--workers", type=int, default=None,
                   help="worker count; this build is serial, 1 is deterministic")
    p.set_defaults(func=_cmd_synth_data)

    p = subs.add_parser("train", help="train the generator against the dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", default="runs/train", help="run output directory")
    p.add_argument("--steps", type=int, default=None, help="training steps")
    p.add_argument("--batch", type=int, default=None, help="batch size")
    p.add_argument("--lr-g", type=float, default=None, help="generator learning rate")
    p.add_argument("--lr-d", type=float, default=None,
                   help="discriminator learning rate")
    p.add_argument("--lambda-r1", type=float, default=None,
                   help="gradient-penalty weight")
    p.add_argument("--lambda-clip", type=float, default=None,
                   help="embedding-alignment loss weight")
    p.add_argument("--r1-interval", type=int, default=None,
                   help="steps between gradient-penalty applications")
    p.add_argument("--workers", type=int, default=None,
                   help="worker count; this build is serial, 1 is deterministic")
    p.set_defaults(func=_cmd_train)

    p = subs.add_parser("generate", help="render turntable views from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint file")
    p.add_argument("--prompt", default=None, help="text prompt")
    p.add_argument("--frames", type=int, default=None,
                   help="number of evenly spaced longitudes (default 8)")
    p.add_argument("--out", default="generated", help="output image directory")
    p.set_defaults(func=_cmd_generate)

    p = subs.add_parser("extract-mesh", help="extract a surface mesh as ASCII PLY")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint file")
    p.add_argument("--prompt", default=None, help="text prompt")
    p.add_argument("--grid-res", type=int, default=None,
                   help="density sampling grid resolution (default 64)")
    p.add_argument("--out", default="mesh", help="output directory")
    p.set_defaults(func=_cmd_extract_mesh)

    p = subs.add_parser("eval", help="compute distribution and alignment metrics")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint file")
    p.add_argument("--data", required=True,
                   help="dataset directory (identifies held-out prompts)")
    p.add_argument("--out", default="evaluation", help="output directory")
    p.set_defaults(func=_cmd_eval)

    p = subs.add_parser("interpolate",
                        help="render a sweep between two prompt embeddings")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint file")
    p.add_argument("--prompt", default=None, help="start prompt")
    p.add_argument("--prompt-b", default=None, help="end prompt")
    p.add_argument("--frames", type=int, default=None,
                   help="number of interpolation frames (default 10)")
    p.add_argument("--out", default="interpolation", help="output image directory")
    p.set_defaults(func=_cmd_interpolate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else 0
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
