#!/usr/bin/env python3
"""Execute the reference desk-scale distillation run end to end.

Synthesizes the teacher dataset, evaluates the untrained generator, trains
for the full step budget, evaluates again with the identical protocol, and
records the numbers the acceptance gate tracks: the distribution-distance
ratio (final / step 0), the held-out alignment win rate, and wall-clock
minutes.  The summary lands in <out>/summary.json; training checkpoints and
the dataset stay in subdirectories that are not meant to be committed.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from tridistill import evaluation, teacher, training
from tridistill.config import get_config


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/reference")
    ap.add_argument("--data", default=None,
                    help="reuse an existing dataset directory")
    ap.add_argument("--seed", type=int, default=0, help="training seed")
    ap.add_argument("--eval-seed", type=int, default=0,
                    help="seed for both evaluation passes")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = get_config("desk", seed=args.seed)

    data = Path(args.data) if args.data else out / "data"
    t_synth = time.monotonic()
    if (data / "manifest.jsonl").is_file():
        records = teacher.load_manifest(data)
        print(f"reusing dataset at {data} ({len(records)} images)")
    else:
        records = teacher.synthesize_dataset(
            cfg.vocabulary, data, np.random.default_rng(args.seed), cfg.camera)
        print(f"synthesized {len(records)} images into {data}")
    synth_minutes = (time.monotonic() - t_synth) / 60.0
    heldout = sorted({r["prompt_id"] for r in records if r["split"] == "heldout"})
    n_prompts = len({r["prompt_id"] for r in records})
    print(f"{n_prompts} prompts, held out: {heldout}")

    print("evaluating untrained generator ...")
    state0 = training.init_train_state(cfg)
    m0 = evaluation.evaluate_model(state0.g_params, cfg, heldout,
                                   seed=args.eval_seed)
    evaluation.write_metrics(m0, out / "metrics_step0.txt",
                             out / "metrics_step0.json")
    print(f"step 0: fed={m0['fed']:.4f} "
          f"matched_wins={m0['matched_wins_fraction']:.2f}")

    t_train = time.monotonic()
    last_print = [t_train]

    def progress(step, metrics):
        now = time.monotonic()
        if step % 250 == 0 or now - last_print[0] > 120:
            last_print[0] = now
            rate = (now - t_train) / max(step + 1, 1)
            print(f"step {step}: l_d={metrics['l_d']:.3f} "
                  f"l_g={metrics['l_g']:.3f} l_clip={metrics['l_clip']:.3f} "
                  f"({rate * 1e3:.0f} ms/step)", flush=True)

    state = training.run_training(cfg, data, out / "train", resume=True,
                                  on_step=progress)
    train_minutes = (time.monotonic() - t_train) / 60.0
    print(f"training finished at step {state.step} in {train_minutes:.1f} min")

    mf = evaluation.evaluate_model(state.g_params, cfg, heldout,
                                   seed=args.eval_seed)
    evaluation.write_metrics(mf, out / "metrics_final.txt",
                             out / "metrics_final.json")

    summary = {
        "config_digest": cfg.digest(),
        "preset": cfg.preset,
        "seed": args.seed,
        "eval_seed": args.eval_seed,
        "steps": state.step,
        "n_prompts": n_prompts,
        "heldout_ids": heldout,
        "n_images": len(records),
        "fed_step0": m0["fed"],
        "fed_final": mf["fed"],
        "fed_ratio": mf["fed"] / m0["fed"],
        "matched_wins_fraction": mf["matched_wins_fraction"],
        "matched_mean": mf["matched_mean"],
        "mismatched_mean": mf["mismatched_mean"],
        "latency_p50_ms": mf["latency_p50_ms"],
        "synth_minutes": synth_minutes,
        "train_minutes": train_minutes,
        "total_minutes": synth_minutes + train_minutes,
        "cores": os.cpu_count(),
        "platform": platform.platform(),
        "completed_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2,
                                                 sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    ok_a = summary["fed_ratio"] < 0.5
    ok_b = summary["matched_wins_fraction"] >= 0.8
    ok_c = summary["total_minutes"] < 45.0
    print(f"distribution distance ratio {summary['fed_ratio']:.3f} "
          f"(< 0.5: {'PASS' if ok_a else 'FAIL'})")
    print(f"held-out alignment win rate {summary['matched_wins_fraction']:.2f} "
          f"(>= 0.8: {'PASS' if ok_b else 'FAIL'})")
    print(f"wall clock {summary['total_minutes']:.1f} min "
          f"(< 45: {'PASS' if ok_c else 'FAIL'})")
    return 0 if (ok_a and ok_b and ok_c) else 1


if __name__ == "__main__":
    raise SystemExit(main())
