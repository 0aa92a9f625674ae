"""Ranking metrics, paired significance tests and result files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .data import Dataset
from .model import DenoiserNet, score

RESULT_FIELDS = ["method", "dataset", "K", "ndcg10", "map10", "n_queries"]
SIGNIFICANCE_FIELDS = ["method_a", "method_b", "metric", "t", "p", "significant"]


def ranked_labels(scores, labels) -> np.ndarray:
    """Labels in descending score order; ties keep the original document order."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return np.asarray(labels)[order]


def dcg(ranked: np.ndarray, k: int) -> float:
    top = np.asarray(ranked[:k], dtype=np.float64)
    return float(((2.0**top - 1.0) / np.log2(np.arange(2, len(top) + 2))).sum())


def ndcg_at_k(scores, labels, k: int = 10) -> float:
    """Gain 2^rel - 1, discount log2(rank + 1).  All-zero queries score 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    labels = np.asarray(labels)
    ideal = dcg(np.sort(labels)[::-1], k)
    if ideal == 0.0:
        return 0.0
    return dcg(ranked_labels(scores, labels), k) / ideal


def map_at_k(scores, labels, k: int = 10, relevant_threshold: int = 1) -> float:
    """Average precision over relevant docs in the top k, divided by min(#relevant, k)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = np.asarray(labels) >= relevant_threshold
    total = int(rel.sum())
    if total == 0:
        return 0.0
    hits = ranked_labels(scores, rel)[:k].astype(np.float64)
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float((precision * hits).sum() / min(total, k))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    significant: bool


def paired_t_test(a, b, alpha: float = 0.05) -> TTestResult:
    """Two-sided paired t-test on aligned per-query values.

    Zero variance of the differences: p = 1 when the mean difference is 0,
    otherwise p = 0 with t = +/-inf.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = len(d)
    if n < 2:
        raise ValueError("paired t-test needs at least two aligned values")
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, False)
        return TTestResult(math.copysign(math.inf, mean), 0.0, True)
    t = mean / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), n - 1))
    return TTestResult(float(t), p, p < alpha)


@dataclass
class EvalResult:
    query_ids: list[str]
    ndcg: np.ndarray
    map: np.ndarray

    @property
    def mean_ndcg(self) -> float:
        return float(self.ndcg.mean()) if len(self.ndcg) else 0.0

    @property
    def mean_map(self) -> float:
        return float(self.map.mean()) if len(self.map) else 0.0


def evaluate_scores(scores: np.ndarray, split: Dataset, k: int = 10) -> EvalResult:
    _, grades, _, offsets = split.stacked()
    nd, mp = [], []
    for i in range(len(split.queries)):
        s = scores[offsets[i] : offsets[i + 1]]
        g = grades[offsets[i] : offsets[i + 1]]
        nd.append(ndcg_at_k(s, g, k))
        mp.append(map_at_k(s, g, k))
    return EvalResult([q.query_id for q in split.queries], np.array(nd), np.array(mp))


def evaluate(net: DenoiserNet, split: Dataset, k: int = 10) -> EvalResult:
    """Score every document in inference mode and compute per-query NDCG@k / MAP@k
    against the original graded labels."""
    if net.config.feature_dim != split.feature_count:
        raise ValueError(
            f"model expects {net.config.feature_dim} features, split has {split.feature_count}"
        )
    x = split.stacked()[0]
    return evaluate_scores(score(net, x), split, k)


# ----------------------------------------------------------------------------
# files


def write_results(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in RESULT_FIELDS})


def read_results(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        missing = set(RESULT_FIELDS) - set(r)
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        r["K"] = float(r["K"])
        r["ndcg10"] = float(r["ndcg10"])
        r["map10"] = float(r["map10"])
        r["n_queries"] = int(r["n_queries"])
    return rows


def write_per_query(path: str | Path, result: EvalResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "ndcg10", "map10"])
        for q, n, m in zip(result.query_ids, result.ndcg, result.map):
            w.writerow([q, repr(float(n)), repr(float(m))])


def read_per_query(path: str | Path) -> dict[str, tuple[float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {r["query_id"]: (float(r["ndcg10"]), float(r["map10"])) for r in csv.DictReader(fh)}


def write_significance(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SIGNIFICANCE_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in SIGNIFICANCE_FIELDS})
