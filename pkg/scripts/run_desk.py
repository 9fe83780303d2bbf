"""Desk-scale experiment over several seeds, reported as mean +- std.

    python3 scripts/run_desk.py --seeds 1 2 3 --out runs/desk-sweep

Each seed runs the whole pipeline into ``<out>/seed<N>``. A summary table
goes to stdout and ``<out>/summary.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from revrir import pipeline
from revrir.config import resolve

ROWS = (
    ("speech head, speech set", "speech_head", "speech_set"),
    ("speech head, RIR set", "speech_head", "rir_set"),
    ("RIR head, RIR set", "rir_head", "rir_set"),
    ("RIR head, speech set", "rir_head", "speech_set"),
    ("baseline, RIR set", "baseline", "rir_set"),
)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    parser.add_argument("--preset", default="desk")
    parser.add_argument("--config", type=Path)
    parser.add_argument("--out", type=Path, default=Path("runs/desk-sweep"))
    args = parser.parse_args()

    base, _ = resolve(args.preset, args.config)
    results = {}
    with threadpool_limits(limits=1):
        for seed in args.seeds:
            start = time.perf_counter()
            run = pipeline.run_all(dataclasses.replace(base, seed=seed), args.out / f"seed{seed}")
            results[seed] = run.metrics
            print(f"seed {seed}: {time.perf_counter() - start:.0f} s")

    summary = {}
    print(f"\n{'':28s} {'rooms':>15s} {'types':>15s}")
    for label, model, split in ROWS:
        boards = [m["results"][model][split] for m in results.values() if model in m["results"]]
        if not boards:
            continue
        rooms = np.array([b["top1"] for b in boards])
        types = np.array([b["type_top1"] for b in boards])
        summary[label] = {"top1": [rooms.mean(), rooms.std()], "type_top1": [types.mean(), types.std()]}
        print(f"{label:28s} {rooms.mean():7.3f} +- {rooms.std():.3f} {types.mean():7.3f} +- {types.std():.3f}")
    ratios = [m["pretrain"]["final_train_loss"] / m["pretrain"]["initial_loss"] for m in results.values()]
    print(f"{'pre-train loss final/initial':28s} {np.mean(ratios):7.3f} +- {np.std(ratios):.3f}")
    summary["seeds"] = args.seeds
    (args.out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")


if __name__ == "__main__":
    main()
