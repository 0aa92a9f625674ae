"""Command-line recipes: prepare -> train / ablate -> evaluate -> report."""

from __future__ import annotations

import argparse
import logging
import math
import shutil
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import data
from .evaluation import (
    EvalResult,
    evaluate,
    paired_t_test,
    read_per_query,
    read_results,
    write_per_query,
    write_results,
    write_significance,
)
from .model import load_checkpoint
from .objectives import ObjectiveKind
from .train import RunConfig, TrainingAborted, load_prepared, train

log = logging.getLogger("ltrdiff")

METHOD_ORDER = [
    ObjectiveKind.DISC_POINTWISE.display_name(),
    ObjectiveKind.DISC_POINTWISE.display_name(perturbed=True),
    ObjectiveKind.DISC_PAIRWISE.display_name(),
    ObjectiveKind.DISC_PAIRWISE.display_name(perturbed=True),
    ObjectiveKind.GEN_POINTWISE.display_name(),
    ObjectiveKind.GEN_PAIRWISE.display_name(),
]


def _write_args(path: Path, args: argparse.Namespace) -> None:
    items = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    path.write_text("".join(f"{k} = {v}\n" for k, v in items.items()), encoding="utf-8")


# ----------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    out = Path(args.out)
    splits = data.load_split_files(args.input, args.dataset)
    transform = data.fit_quantile_transform(splits["train"], args.quantiles, args.output_distribution)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in splits.items():
        data.save_cache(ds, out / f"{name}.bin")
    transform.save(out / "transform.npz")
    summary = format_summary(splits)
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    _write_args(out / "prepare_args.txt", args)
    print(summary, end="")
    return 0


def format_summary(splits: dict[str, data.Dataset]) -> str:
    total = sum(ds.n_rows for ds in splits.values())
    nq = sum(len(ds.queries) for ds in splits.values())
    any_ds = next(iter(splits.values()))
    lines = [
        f"Queries (Train)     {len(splits['train'].queries)}",
        f"Queries (Val)       {len(splits['vali'].queries)}",
        f"Queries (Test)      {len(splits['test'].queries)}",
        f"Data Points (Total) {total}",
        f"Per Query (avg.)    {total / nq:.2f}",
        f"Features (F)        {any_ds.feature_count}",
        f"Relevance Labels (R) {any_ds.grade_levels}",
    ]
    return "\n".join(lines) + "\n"


def _run_training(config: RunConfig) -> int:
    try:
        result = train(config)
    except TrainingAborted as e:
        print(f"training aborted: {e}; last good checkpoint: {e.checkpoint}", file=sys.stderr)
        return 2
    print(
        f"best validation NDCG@10 {result.best_val_ndcg10:.4f} at step {result.best_step}; "
        f"checkpoint {result.checkpoint}"
    )
    return 0


def cmd_train(args) -> int:
    return _run_training(RunConfig.load(args.config))


def cmd_ablate(args) -> int:
    config = RunConfig.load(args.config)
    if config.objective.generative:
        print("ablation is defined for discriminative objectives only", file=sys.stderr)
        return 2
    config.noise_std = args.noise_std
    if args.out:
        config.out_dir = Path(args.out).resolve()
    return _run_training(config)


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    config = RunConfig.load(run / "config.txt", check_paths=False)
    data_dir = Path(args.data) if args.data else config.data_dir
    split = load_prepared(data_dir)[args.split]
    net, _, extra = load_checkpoint(run / "best.ckpt")
    result = evaluate(net, split, args.k)
    row = {
        "method": extra.get("method") or config.method_name(),
        "dataset": extra.get("dataset") or config.dataset_name,
        "K": repr(float(config.k_fraction)),
        "ndcg10": repr(result.mean_ndcg),
        "map10": repr(result.mean_map),
        "n_queries": len(result.query_ids),
    }
    write_results(run / "results.csv", [row])
    write_per_query(run / "per_query.csv", result)
    _write_args(run / "evaluate_args.txt", args)
    print(f"{row['method']} {row['dataset']} K={config.k_fraction}: "
          f"NDCG@{args.k} {result.mean_ndcg:.4f} MAP@{args.k} {result.mean_map:.4f}")
    return 0


def cmd_subsample(args) -> int:
    prepared = Path(args.data)
    train_ds = data.load_cache(prepared / "train.bin")
    sub = data.subsample(train_ds, args.fraction, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_cache(sub, out)
    print(f"kept {len(sub.queries)} of {len(train_ds.queries)} queries ({sub.n_rows} rows)")
    return 0


# ----------------------------------------------------------------------------
# report


def _collect_runs(runs_dir: Path, exclude: Path | None = None) -> list[dict]:
    runs = []
    skip = exclude.resolve() if exclude is not None else None
    for sub in sorted(p for p in runs_dir.iterdir() if p.is_dir()):
        if sub.resolve() == skip:
            continue
        try:
            rows = read_results(sub / "results.csv")
            per_query = read_per_query(sub / "per_query.csv")
        except (OSError, ValueError, KeyError) as e:
            log.warning("skipping %s: %s", sub, e)
            continue
        if len(rows) != 1:
            log.warning("skipping %s: expected one result row", sub)
            continue
        runs.append({"dir": sub, **rows[0], "per_query": per_query})
    return runs


def _method_key(m: str) -> tuple[int, str]:
    return (METHOD_ORDER.index(m) if m in METHOD_ORDER else len(METHOD_ORDER), m)


def build_report(runs: list[dict]) -> tuple[str, list[dict], list[dict]]:
    """Markdown table, aggregated result rows and significance rows.

    Several runs of the same (method, dataset, K) are averaged; their
    per-query vectors are averaged before significance testing.
    """
    cells: dict[tuple[str, str, float], list[dict]] = defaultdict(list)
    for r in runs:
        cells[(r["method"], r["dataset"], r["K"])].append(r)

    agg: dict[tuple[str, str, float], dict] = {}
    for key, group in cells.items():
        qids = sorted(set.intersection(*(set(g["per_query"]) for g in group)))
        nd = np.mean([[g["per_query"][q][0] for q in qids] for g in group], axis=0)
        mp = np.mean([[g["per_query"][q][1] for q in qids] for g in group], axis=0)
        agg[key] = {
            "method": key[0],
            "dataset": key[1],
            "K": key[2],
            "ndcg10": float(np.mean([g["ndcg10"] for g in group])),
            "map10": float(np.mean([g["map10"] for g in group])),
            "n_queries": group[0]["n_queries"],
            "n_runs": len(group),
            "qids": qids,
            "vectors": {"ndcg10": nd, "map10": mp},
        }

    datasets = sorted({k[1] for k in agg})
    ks = sorted({k[2] for k in agg}, reverse=True)
    methods = sorted({k[0] for k in agg}, key=_method_key)
    metrics = ("ndcg10", "map10")

    sig_rows = []
    best_marker: dict[tuple[str, float, str], tuple[str, bool]] = {}
    for ds in datasets:
        for k in ks:
            present = [m for m in methods if (m, ds, k) in agg]
            for metric in metrics:
                for i, a in enumerate(present):
                    for b in present[i + 1 :]:
                        A, B = agg[(a, ds, k)], agg[(b, ds, k)]
                        common = sorted(set(A["qids"]) & set(B["qids"]))
                        if len(common) < 2:
                            continue
                        va = dict(zip(A["qids"], A["vectors"][metric]))
                        vb = dict(zip(B["qids"], B["vectors"][metric]))
                        res = paired_t_test([va[q] for q in common], [vb[q] for q in common])
                        sig_rows.append({
                            "method_a": a, "method_b": b, "metric": metric,
                            "t": repr(res.t), "p": repr(res.p), "significant": res.significant,
                            "dataset": ds, "K": k,
                        })
                ranked = sorted(present, key=lambda m: -agg[(m, ds, k)][metric])
                if not ranked:
                    continue
                top = ranked[0]
                beats_next = False
                if len(ranked) > 1:
                    for s in sig_rows:
                        if s["dataset"] == ds and s["K"] == k and s["metric"] == metric and {
                            s["method_a"], s["method_b"]} == {top, ranked[1]}:
                            beats_next = s["significant"]
                best_marker[(ds, k, metric)] = (top, beats_next)

    header = "| method | " + " | ".join(f"{ds} NDCG@10 | {ds} MAP@10" for ds in datasets) + " |"
    sep = "|---|" + "---:|" * (2 * len(datasets))
    lines = [header, sep]
    for k in ks:
        lines.append(f"| **K={_format_k(k)}** |" + " |" * (2 * len(datasets)))
        for m in methods:
            cells_txt = []
            for ds in datasets:
                for metric in metrics:
                    a = agg.get((m, ds, k))
                    if a is None:
                        cells_txt.append("")
                        continue
                    txt = f"{a[metric]:.4f}"
                    top, sig = best_marker.get((ds, k, metric), (None, False))
                    if top == m:
                        txt = f"**{txt}**" + ("*" if sig else "")
                    cells_txt.append(txt)
            lines.append(f"| {m} | " + " | ".join(cells_txt) + " |")
    md = "\n".join(lines) + "\n\nBold: best per (dataset, K, metric). *: best is significantly better than the runner-up (paired t-test, p < 0.05).\n"

    result_rows = [
        {**{f: agg[key][f] for f in ("method", "dataset", "K", "n_queries")},
         "ndcg10": repr(agg[key]["ndcg10"]), "map10": repr(agg[key]["map10"])}
        for key in sorted(agg, key=lambda k: (k[1], -k[2], _method_key(k[0])))
    ]
    return md, result_rows, sig_rows


def _format_k(k: float) -> str:
    if k == 1.0:
        return "1.0"
    e = math.log2(k)
    return f"2^{int(e)}" if e == int(e) else repr(k)


def cmd_report(args) -> int:
    runs_dir = Path(args.runs)
    out = Path(args.out) if args.out else runs_dir / "report"
    runs = _collect_runs(runs_dir, exclude=out)
    if not runs:
        print(f"no completed runs under {runs_dir}", file=sys.stderr)
        return 1
    md, rows, sig = build_report(runs)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.md").write_text(md, encoding="utf-8")
    write_results(out / "results_all.csv", rows)
    write_significance(out / "significance.csv", sig)
    curves = out / "curves"
    curves.mkdir(exist_ok=True)
    for r in runs:
        src = r["dir"] / "train_log.csv"
        if src.is_file():
            shutil.copyfile(src, curves / f"{r['dir'].name}.csv")
    _write_args(out / "report_args.txt", args)
    print(md, end="")
    return 0


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ltrdiff", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="parse a fold, fit the quantile transform, write caches")
    s.add_argument("--input", required=True, help="fold directory with train.txt, vali.txt, test.txt")
    s.add_argument("--dataset", required=True, choices=sorted(data.SCHEMES))
    s.add_argument("--out", required=True)
    s.add_argument("--quantiles", type=int, default=1000)
    s.add_argument("--output-distribution", choices=["normal", "uniform"], default="normal")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train one model from a run config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("ablate", help="train a discriminative model on perturbed features")
    s.add_argument("--config", required=True)
    s.add_argument("--noise-std", type=float, required=True)
    s.add_argument("--out", help="override the run directory")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("evaluate", help="score a run's best checkpoint on a split")
    s.add_argument("--run", required=True, help="run directory written by train/ablate")
    s.add_argument("--split", default="test", choices=["train", "vali", "test"])
    s.add_argument("--data", help="prepared data directory (defaults to the run's data_dir)")
    s.add_argument("--k", type=int, default=10)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("subsample", help="write a K-fraction query subset of the training cache")
    s.add_argument("--data", required=True, help="prepared data directory")
    s.add_argument("--fraction", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_subsample)

    s = sub.add_parser("report", help="aggregate evaluated runs into tables and curve CSVs")
    s.add_argument("--runs", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        return args.func(args)
    except (FileNotFoundError, data.ParseError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
