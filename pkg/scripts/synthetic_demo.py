"""End-to-end run on generated LETOR-style data; finishes in about a minute on one core.

    python scripts/synthetic_demo.py --out /tmp/ltrdiff-demo
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ltrdiff.synthetic import write_fold

sys.path.insert(0, str(Path(__file__).resolve().parent))
import reproduce  # noqa: E402


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="demo_runs")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = p.parse_args(argv)

    out = Path(args.out)
    fold = write_fold(out / "fold", n_train=60, n_vali=20, n_test=20, seed=0)
    return reproduce.main([
        "--fold", str(fold), "--name", "synthetic", "--out", str(out),
        "--epochs", str(args.epochs), "--seeds", *map(str, args.seeds),
    ])


if __name__ == "__main__":
    sys.exit(main())
