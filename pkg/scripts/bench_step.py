"""Time one desk-preset training step and project the full-run wall clock.

Usage: python3 scripts/bench_step.py [--steps N] [--samples K]
"""

import argparse
import pathlib
import sys
import tempfile
import time

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

import dataclasses

from tridistill import teacher, training
from tridistill.config import VocabularyConfig, desk_config


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=12, help="timed steps")
    ap.add_argument("--n-samples", type=int, default=None,
                    help="override depth samples per ray")
    args = ap.parse_args()

    cfg = desk_config()
    if args.n_samples is not None:
        cfg = dataclasses.replace(
            cfg, render=dataclasses.replace(cfg.render, n_samples=args.n_samples))

    bench_vocab = VocabularyConfig(shapes=("sphere", "box"), colors=("red", "blue"),
                                   styles=("plain",), samples_per_prompt=2,
                                   heldout_prompts=1,
                                   image_resolution=cfg.image_resolution)

    with tempfile.TemporaryDirectory() as tmp:
        t0 = time.monotonic()
        teacher.synthesize_dataset(bench_vocab, tmp, np.random.default_rng(0))
        print(f"dataset synth (32 imgs): {time.monotonic() - t0:.2f}s")

        t0 = time.monotonic()
        graphs = training.build_training_graphs(cfg)
        print(f"graph build: {time.monotonic() - t0:.2f}s")

        sampler = training.BatchSampler(tmp, cfg)
        state = training.init_train_state(cfg)

        for i in range(3):  # warmup: numba jit, buffer faults
            t0 = time.monotonic()
            training.train_step(state, graphs, sampler)
            print(f"warmup step {i}: {time.monotonic() - t0:.2f}s")

        times = []
        for _ in range(args.steps):
            t0 = time.monotonic()
            training.train_step(state, graphs, sampler)
            times.append(time.monotonic() - t0)
        arr = np.array(times)
        per = float(np.median(arr))
        print(f"steps timed: {len(arr)}  median {per*1e3:.0f} ms  "
              f"mean {arr.mean()*1e3:.0f} ms  min {arr.min()*1e3:.0f} ms")
        total = per * cfg.train.steps
        print(f"projected {cfg.train.steps} steps: {total/60:.1f} min "
              f"(n_samples={cfg.render.n_samples}, batch={cfg.train.batch})")


if __name__ == "__main__":
    main()
