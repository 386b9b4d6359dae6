"""Command-line interface contract tests.

Everything runs at a miniature configuration injected through the config-file
precedence layer: a config.json pre-seeded into the output directory (or
echoed into it by an earlier command) overrides the built-in preset, so the
full pipeline wires through the real CLI in seconds.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from tridistill.cli import main
from tridistill.config import (Config, DecoderConfig, DiscriminatorConfig,
                               GeneratorConfig, RenderConfig, TrainConfig,
                               TriPlaneConfig, VocabularyConfig,
                               config_from_dict, get_config)

TINY = Config(
    render=RenderConfig(resolution=4, n_samples=4),
    triplane=TriPlaneConfig(resolution=8, channels=3),
    decoder=DecoderConfig(hidden_width=8, color_channels=4),
    generator=GeneratorConfig(z_dim=6, embed_dim=5, mapping_width=12,
                              mapping_layers=2, seed_resolution=4,
                              synthesis_channels=(8, 7), sr_channels=(6,)),
    discriminator=DiscriminatorConfig(channels=(4, 6), head_width=7),
    vocabulary=VocabularyConfig(shapes=("sphere", "box"), colors=("red", "blue"),
                                styles=("plain",), samples_per_prompt=2,
                                heldout_prompts=1, image_resolution=8),
    train=TrainConfig(steps=2, batch=2, seed=5),
)


def _write_config(directory: Path, cfg: Config) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def _digest_dir(directory: Path, pattern: str = "*.png") -> dict[str, str]:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(Path(directory).glob(pattern))}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset plus a short training run, both produced through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    _write_config(data, TINY)
    assert main(["synth-data", "--out", str(data), "--seed", "3"]) == 0
    run = root / "run"
    assert main(["train", "--data", str(data), "--out", str(run)]) == 0
    ckpts = sorted((run / "checkpoints").glob("step_*.ckpt"))
    assert ckpts, "training produced no checkpoint"
    return {"root": root, "data": data, "run": run, "ckpt": ckpts[-1]}


# ---------------------------------------------------------------- exit codes


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "synth-data" in capsys.readouterr().out


@pytest.mark.parametrize("command", ["synth-data", "train", "generate",
                                     "extract-mesh", "eval", "interpolate"])
def test_subcommand_help_exits_zero(command, capsys):
    assert main([command, "--help"]) == 0
    assert "--seed" in capsys.readouterr().out


def test_no_subcommand_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_flag_is_usage_error_on_stderr(capsys):
    assert main(["train", "--data", "x", "--bogus-flag", "1"]) == 1
    err = capsys.readouterr().err
    assert "usage" in err.lower()
    assert "--bogus-flag" in err


def test_generate_without_checkpoint_names_the_flag(capsys):
    assert main(["generate"]) == 1
    assert "--checkpoint" in capsys.readouterr().err


def test_missing_checkpoint_file_is_runtime_error(tmp_path, capsys):
    missing = tmp_path / "nope.ckpt"
    assert main(["generate", "--checkpoint", str(missing),
                 "--out", str(tmp_path / "out")]) == 2
    assert "error" in capsys.readouterr().err.lower()


def test_missing_dataset_is_runtime_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "absent"),
                 "--out", str(tmp_path / "out")]) == 2
    assert "error" in capsys.readouterr().err.lower()


def test_bad_preset_value_is_usage_error(capsys):
    assert main(["synth-data", "--preset", "huge"]) == 1
    assert "huge" in capsys.readouterr().err


# ------------------------------------------------------------ synth + train


def test_synth_data_layout(workspace):
    data = workspace["data"]
    records = [json.loads(line) for line in
               (data / "manifest.jsonl").read_text().splitlines()]
    vocab_n = len(TINY.vocabulary.shapes) * len(TINY.vocabulary.colors) \
        * len(TINY.vocabulary.styles)
    assert len(records) == vocab_n * TINY.vocabulary.samples_per_prompt * 4
    for rec in records:
        assert (data / rec["path"]).is_file()
    splits = {r["split"] for r in records}
    assert splits == {"train", "heldout"}


def test_train_used_config_file_baseline(workspace):
    echoed = json.loads((workspace["run"] / "config.json").read_text())
    assert config_from_dict(echoed) == TINY


def test_train_wrote_metrics_log(workspace):
    log = (workspace["run"] / "metrics.log").read_text().splitlines()
    assert len(log) >= TINY.train.steps
    assert "l_d=" in log[0] and "l_g=" in log[0]


def test_flags_override_config_file(workspace, tmp_path):
    out = tmp_path / "run_flags"
    assert main(["train", "--data", str(workspace["data"]), "--out", str(out),
                 "--steps", "1", "--batch", "3", "--lr-g", "1e-3",
                 "--workers", "1"]) == 0
    echoed = config_from_dict(json.loads((out / "config.json").read_text()))
    assert echoed.train.steps == 1
    assert echoed.train.batch == 3
    assert echoed.train.lr_g == pytest.approx(1e-3)
    assert echoed.render == TINY.render          # non-flag fields from the file


def test_train_resumes_from_existing_run(workspace, tmp_path, capsys):
    out = tmp_path / "resume"
    assert main(["train", "--data", str(workspace["data"]), "--out", str(out),
                 "--steps", "1"]) == 0
    # second call picks the echoed config (steps=1) up again and is a no-op
    assert main(["train", "--data", str(workspace["data"]),
                 "--out", str(out)]) == 0
    ckpts = sorted((out / "checkpoints").glob("step_*.ckpt"))
    assert [c.name for c in ckpts] == ["step_000001.ckpt"]


def test_preset_flag_beats_config_file(workspace, tmp_path, capsys):
    # An explicit --preset replaces the config file found next to the
    # checkpoint; the desk architecture no longer matches the checkpoint
    # hash, so the command fails at load time rather than silently mixing.
    assert main(["generate", "--preset", "desk",
                 "--checkpoint", str(workspace["ckpt"]),
                 "--out", str(tmp_path / "out")]) == 2
    err = capsys.readouterr().err
    assert "config" in err.lower()


# -------------------------------------------------------------- inference


def test_generate_writes_frames_and_config_echo(workspace, tmp_path):
    out = tmp_path / "gen"
    assert main(["generate", "--checkpoint", str(workspace["ckpt"]),
                 "--out", str(out), "--frames", "3", "--seed", "7"]) == 0
    frames = sorted(out.glob("frame_*.png"))
    assert [f.name for f in frames] == [f"frame_{k:03d}.png" for k in range(3)]
    assert config_from_dict(json.loads((out / "config.json").read_text())) == TINY
    from PIL import Image
    with Image.open(frames[0]) as img:
        assert img.size == (TINY.image_resolution, TINY.image_resolution)
        assert img.mode == "RGB"


def test_generate_same_seed_is_byte_identical(workspace, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        assert main(["generate", "--checkpoint", str(workspace["ckpt"]),
                     "--out", str(out), "--frames", "2", "--seed", "7"]) == 0
    assert _digest_dir(out_a) == _digest_dir(out_b)


def test_generate_different_seeds_differ(workspace, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for seed, out in (("7", out_a), ("8", out_b)):
        assert main(["generate", "--checkpoint", str(workspace["ckpt"]),
                     "--out", str(out), "--frames", "1", "--seed", seed]) == 0
    assert _digest_dir(out_a) != _digest_dir(out_b)


def test_generate_with_prompt_flag(workspace, tmp_path):
    out = tmp_path / "gen"
    assert main(["generate", "--checkpoint", str(workspace["ckpt"]),
                 "--out", str(out), "--frames", "1",
                 "--prompt", "a blue box, plain"]) == 0
    assert (out / "frame_000.png").is_file()


def test_extract_mesh_writes_ascii_ply(workspace, tmp_path):
    out = tmp_path / "mesh"
    assert main(["extract-mesh", "--checkpoint", str(workspace["ckpt"]),
                 "--out", str(out), "--grid-res", "24"]) == 0
    text = (out / "mesh.ply").read_text()
    lines = text.splitlines()
    assert lines[0] == "ply"
    assert lines[1].startswith("format ascii")
    n_verts = next(int(l.split()[-1]) for l in lines
                   if l.startswith("element vertex"))
    assert n_verts >= 0
    assert (out / "config.json").is_file()


def test_eval_writes_metric_files(workspace, tmp_path):
    out = tmp_path / "metrics"
    assert main(["eval", "--checkpoint", str(workspace["ckpt"]),
                 "--data", str(workspace["data"]), "--out", str(out),
                 "--seed", "1"]) == 0
    recorded = json.loads((out / "metrics.json").read_text())
    for key in ("fed", "matched_wins_fraction", "latency_p50_ms"):
        assert key in recorded
        assert np.isfinite(recorded[key])
    text = (out / "metrics.txt").read_text().splitlines()
    assert any(line.startswith("fed=") for line in text)


def test_interpolate_writes_frame_sweep(workspace, tmp_path):
    out = tmp_path / "interp"
    assert main(["interpolate", "--checkpoint", str(workspace["ckpt"]),
                 "--out", str(out), "--frames", "4",
                 "--prompt", "a red sphere, plain",
                 "--prompt-b", "a blue box, plain", "--seed", "2"]) == 0
    frames = sorted(out.glob("frame_*.png"))
    assert len(frames) == 4
    digests = set(_digest_dir(out).values())
    assert len(digests) == 4, "interpolation frames should all differ"


def test_interpolate_rejects_single_frame(workspace, tmp_path, capsys):
    assert main(["interpolate", "--checkpoint", str(workspace["ckpt"]),
                 "--out", str(tmp_path / "x"), "--frames", "1"]) == 2
    assert "frames" in capsys.readouterr().err


# ------------------------------------------------------------- config layer


def test_config_round_trip_identity():
    for preset in ("desk", "paper"):
        cfg = get_config(preset)
        clone = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert clone == cfg
        assert clone.digest() == cfg.digest()


def test_module_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "tridistill", "--help"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0
    assert "synth-data" in proc.stdout
