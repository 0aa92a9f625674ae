"""Full benchmark recipe on one fold: prepare, train the six methods, evaluate, report.

    python scripts/reproduce.py --fold $LTR_DATA_ROOT/MQ2008/Fold1 --name MQ2008 --out runs/mq2008

Methods: discriminative pointwise / pairwise (clean and with feature noise) and
the generative pointwise / pairwise rankers.  Each (method, seed) run writes its
own directory under ``<out>/runs``; the report lands in ``<out>/report``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ltrdiff import cli

METHODS = [
    ("disc_pointwise", "disc_pointwise", None),
    ("disc_pointwise_perturbed", "disc_pointwise", 0.1),
    ("disc_pairwise", "disc_pairwise", None),
    ("disc_pairwise_perturbed", "disc_pairwise", 0.1),
    ("gen_pointwise", "gen_pointwise", None),
    ("gen_pairwise", "gen_pairwise", None),
]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--fold", required=True, help="directory with train.txt, vali.txt, test.txt")
    p.add_argument("--name", required=True, help="dataset label used in the tables")
    p.add_argument("--scheme", default="letor", choices=["letor", "mslr"])
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--k-fraction", type=float, default=1.0)
    p.add_argument("--methods", nargs="+", default=[m[0] for m in METHODS], choices=[m[0] for m in METHODS])
    p.add_argument("--noise-std", type=float, default=0.1, help="feature noise for the perturbed runs")
    args = p.parse_args(argv)

    out = Path(args.out).resolve()
    prepared = out / "prepared"
    if not (prepared / "transform.npz").is_file():
        rc = cli.main(["prepare", "--input", args.fold, "--dataset", args.scheme, "--out", str(prepared)])
        if rc:
            return rc

    for name, objective, noise in METHODS:
        if name not in args.methods:
            continue
        for seed in args.seeds:
            run = out / "runs" / f"{name}_K{args.k_fraction:g}_s{seed}"
            cfg = out / "configs" / f"{run.name}.cfg"
            cfg.parent.mkdir(parents=True, exist_ok=True)
            cfg.write_text(
                f"objective = {objective}\n"
                f"data_dir = {prepared}\n"
                f"out_dir = {run}\n"
                f"seed = {seed}\n"
                f"dataset_name = {args.name}\n"
                f"epochs = {args.epochs}\n"
                f"k_fraction = {args.k_fraction!r}\n"
            )
            if (run / "results.csv").is_file():
                print(f"skipping finished run {run.name}")
                continue
            cmd = ["-v", "train", "--config", str(cfg)]
            if noise is not None:
                cmd = ["-v", "ablate", "--config", str(cfg), "--noise-std", repr(args.noise_std)]
            rc = cli.main(cmd)
            if rc:
                print(f"{run.name}: training failed with exit code {rc}", file=sys.stderr)
                continue
            cli.main(["evaluate", "--run", str(run)])

    return cli.main(["report", "--runs", str(out / "runs"), "--out", str(out / "report")])


if __name__ == "__main__":
    sys.exit(main())
