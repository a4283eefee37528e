#!/usr/bin/env python3
"""End-to-end synthetic experiment: does acoustic fusion help when the
ground-truth signal lives in the attention-pooled encoder summaries?

Generates a local-plant dataset, trains the decoder-only baseline and the
joint fusion model under the same folds and seeds, and prints the combined
comparison tables. Everything runs through the CLI, so the run leaves the
same artifacts (manifests, checkpoints, predictions, reports) as a real
experiment.
"""

import argparse
import sys
import tempfile
from pathlib import Path

from wlpred.cli import run


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default=None, help="keep artifacts here (default: temp dir)")
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--count", type=int, default=300)
    parser.add_argument("--scenes", type=int, default=15)
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args()

    workdir = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="wlpred-exp-"))
    workdir.mkdir(parents=True, exist_ok=True)
    data = workdir / "data"
    print(f"workdir: {workdir}")

    steps = [
        ["synth", "--seed", str(args.seed), "--count", str(args.count),
         "--scenes", str(args.scenes), "--planted", "local", "--out", str(data)],
    ]
    for mode in ("decoder", "joint"):
        ckpts = workdir / f"ckpts_{mode}"
        preds = workdir / f"preds_{mode}.jsonl"
        report = workdir / f"report_{mode}.json"
        steps += [
            ["train", "--data", str(data), "--out", str(ckpts), "--mode", mode,
             "--seeds", str(args.seeds), "--folds", "5", "--workers", str(args.workers)],
            ["predict", "--checkpoints", str(ckpts), "--data", str(data),
             "--split", "dev", "--out", str(preds), "--workers", str(args.workers)],
            ["evaluate", "--predictions", str(preds), "--labels", str(data / "labels.tsv"),
             "--out", str(report), "--system", mode],
        ]
    steps.append(
        ["report", f"decoder={workdir / 'report_decoder.json'}",
         f"joint={workdir / 'report_joint.json'}"]
    )

    for argv in steps:
        print(f"\n$ wlpred {' '.join(argv)}")
        status = run(argv)
        if status != 0:
            return status
    return 0


if __name__ == "__main__":
    sys.exit(main())
