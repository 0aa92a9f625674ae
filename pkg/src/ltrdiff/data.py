"""LETOR 4.0 / MSLR-WEB10K loading, label binarization, quantile scaling,
pair construction and query-level subsampling.

Input lines follow the SVMLight-with-qid layout::

    <grade> qid:<id> 1:<v> 2:<v> ... #comment
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal

import numpy as np
from scipy.special import ndtri

Scheme = Literal["letor", "mslr"]

SCHEMES: dict[str, dict[str, int]] = {
    "letor": {"feature_count": 46, "grade_levels": 3, "threshold": 1},
    "mslr": {"feature_count": 136, "grade_levels": 5, "threshold": 2},
}

CACHE_MAGIC = b"LTRCACHE"
CACHE_VERSION = 1


class ParseError(ValueError):
    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


def binarize(grade, scheme: Scheme):
    """Collapse graded relevance to 0/1.

    LETOR: 0 -> 0, {1, 2} -> 1.  MSLR: {0, 1} -> 0, {2, 3, 4} -> 1.
    Accepts scalars or integer arrays.
    """
    layout = SCHEMES[scheme]
    g = np.asarray(grade)
    if g.size and (g.min() < 0 or g.max() >= layout["grade_levels"]):
        raise ValueError(f"grade outside [0, {layout['grade_levels'] - 1}] for {scheme}")
    out = (g >= layout["threshold"]).astype(np.int64)
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class QueryGroup:
    query_id: str
    features: np.ndarray  # [n_docs, feature_count]
    grades: np.ndarray  # [n_docs] int
    binary: np.ndarray  # [n_docs] int

    def __len__(self) -> int:
        return len(self.grades)

    @property
    def rows(self) -> list[tuple[np.ndarray, int, int]]:
        return [(self.features[i], int(self.grades[i]), int(self.binary[i])) for i in range(len(self))]


@dataclass(frozen=True, eq=False)
class Dataset:
    queries: list[QueryGroup]
    feature_count: int
    grade_levels: int
    scheme: Scheme = "letor"

    def __post_init__(self):
        seen = set()
        for q in self.queries:
            if q.query_id in seen:
                raise ValueError(f"duplicate query id {q.query_id}")
            seen.add(q.query_id)
            if len(q) == 0:
                raise ValueError(f"query {q.query_id} has no rows")
            if q.features.shape[1] != self.feature_count:
                raise ValueError(f"query {q.query_id}: expected {self.feature_count} features")

    @property
    def n_rows(self) -> int:
        return sum(len(q) for q in self.queries)

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(features, grades, binary, offsets) with query i at rows offsets[i]:offsets[i+1]."""
        if not self.queries:
            f = self.feature_count
            return np.zeros((0, f)), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(1, np.int64)
        x = np.concatenate([q.features for q in self.queries])
        g = np.concatenate([q.grades for q in self.queries])
        b = np.concatenate([q.binary for q in self.queries])
        offsets = np.concatenate([[0], np.cumsum([len(q) for q in self.queries])]).astype(np.int64)
        return x, g, b, offsets

    def with_features(self, transform) -> "Dataset":
        """Copy with every query's features passed through ``transform``."""
        return replace(
            self,
            queries=[replace(q, features=transform(q.features)) for q in self.queries],
        )

    def summary(self) -> dict[str, float]:
        n = self.n_rows
        return {
            "queries": len(self.queries),
            "rows": n,
            "per_query": n / len(self.queries) if self.queries else 0.0,
            "features": self.feature_count,
            "grades": self.grade_levels,
        }


def _group(
    qids: list[str], feats: list[np.ndarray], grades: list[int], feature_count: int, scheme: Scheme
) -> Dataset:
    order: dict[str, list[int]] = {}
    for i, q in enumerate(qids):
        order.setdefault(q, []).append(i)
    x = np.asarray(feats, dtype=np.float64).reshape(len(feats), feature_count)
    g = np.asarray(grades, dtype=np.int64)
    queries = [
        QueryGroup(q, x[idx], g[idx], binarize(g[idx], scheme))
        for q, idx in ((q, np.asarray(ix)) for q, ix in order.items())
    ]
    return Dataset(queries, feature_count, SCHEMES[scheme]["grade_levels"], scheme)


def parse_lines(lines: Iterable[str], feature_count: int, scheme: Scheme = "letor") -> Dataset:
    levels = SCHEMES[scheme]["grade_levels"]
    qids: list[str] = []
    feats: list[np.ndarray] = []
    grades: list[int] = []
    for lineno, raw in enumerate(lines, start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        toks = body.split()
        if len(toks) < 2 or not toks[1].startswith("qid:"):
            raise ParseError("expected '<grade> qid:<id> ...'", lineno)
        try:
            grade = int(float(toks[0]))
        except ValueError:
            raise ParseError(f"bad grade {toks[0]!r}", lineno) from None
        if not 0 <= grade < levels:
            raise ParseError(f"grade {grade} outside [0, {levels - 1}]", lineno)
        row = np.zeros(feature_count)
        ntok = len(toks) - 2
        if ntok:
            joined = " ".join(toks[2:])
            if joined.count(":") != ntok:
                raise ParseError("feature tokens must look like '<index>:<value>'", lineno)
            try:
                flat = np.array(joined.replace(":", " ").split(), dtype=np.float64)
            except ValueError:
                raise ParseError("unreadable feature token", lineno) from None
            if len(flat) != 2 * ntok:
                raise ParseError("feature tokens must look like '<index>:<value>'", lineno)
            idx = flat[0::2]
            if np.any(idx != np.floor(idx)):
                raise ParseError("non-integer feature index", lineno)
            bad = (idx < 1) | (idx > feature_count)
            if bad.any():
                raise ParseError(f"feature index {int(idx[bad][0])} outside [1, {feature_count}]", lineno)
            row[idx.astype(np.int64) - 1] = flat[1::2]
        qids.append(toks[1][4:])
        feats.append(row)
        grades.append(grade)
    return _group(qids, feats, grades, feature_count, scheme)


def parse_letor(path: str | Path, feature_count: int | None = None, scheme: Scheme = "letor") -> Dataset:
    """Parse one SVMLight-with-qid split file, grouping rows by query in file order."""
    if feature_count is None:
        feature_count = SCHEMES[scheme]["feature_count"]
    with open(path, encoding="utf-8") as fh:
        return parse_lines(fh, feature_count, scheme)


def write_letor(ds: Dataset, path: str | Path) -> None:
    """Inverse of ``parse_letor``; floats are written with ``repr`` so values survive exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for q in ds.queries:
            for feat, grade in zip(q.features, q.grades):
                cols = " ".join(f"{i + 1}:{float(v)!r}" for i, v in enumerate(feat))
                fh.write(f"{int(grade)} qid:{q.query_id} {cols}\n")


# ----------------------------------------------------------------------------
# binary cache
#
#   magic    8 bytes  b"LTRCACHE"
#   version  u32
#   scheme   u8       0 = letor, 1 = mslr
#   features u32
#   levels   u32
#   queries  u32
#   rows     u64
#   per query: u32 id byte length, utf-8 id bytes, u32 row count
#   features f64[rows * features], row-major
#   grades   i32[rows]
# All integers and floats little-endian.


def save_cache(ds: Dataset, path: str | Path) -> None:
    x, g, _, _ = ds.stacked()
    parts = [
        CACHE_MAGIC,
        struct.pack(
            "<IBIIIQ",
            CACHE_VERSION,
            0 if ds.scheme == "letor" else 1,
            ds.feature_count,
            ds.grade_levels,
            len(ds.queries),
            ds.n_rows,
        ),
    ]
    for q in ds.queries:
        qb = q.query_id.encode("utf-8")
        parts.append(struct.pack("<I", len(qb)) + qb + struct.pack("<I", len(q)))
    parts.append(np.ascontiguousarray(x, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(g, dtype="<i4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_cache(path: str | Path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:8] != CACHE_MAGIC:
        raise ParseError(f"{path}: not a dataset cache")
    head = struct.calcsize("<IBIIIQ")
    version, scheme_id, fcount, levels, nq, nrows = struct.unpack_from("<IBIIIQ", buf, 8)
    if version != CACHE_VERSION:
        raise ParseError(f"{path}: unsupported cache version {version}")
    pos = 8 + head
    ids, counts = [], []
    for _ in range(nq):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        ids.append(buf[pos : pos + n].decode("utf-8"))
        pos += n
        (c,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        counts.append(c)
    x = np.frombuffer(buf, dtype="<f8", count=nrows * fcount, offset=pos).reshape(nrows, fcount)
    pos += nrows * fcount * 8
    g = np.frombuffer(buf, dtype="<i4", count=nrows, offset=pos).astype(np.int64)
    scheme: Scheme = "letor" if scheme_id == 0 else "mslr"
    queries = []
    start = 0
    for qid, c in zip(ids, counts):
        sl = slice(start, start + c)
        queries.append(QueryGroup(qid, x[sl].astype(np.float64), g[sl], binarize(g[sl], scheme)))
        start += c
    return Dataset(queries, fcount, levels, scheme)


# ----------------------------------------------------------------------------
# quantile scaling

CLIP = 1e-7
QUANT_MAGIC = b"LTRQUANT"


@dataclass(frozen=True, eq=False)
class QuantileTransform:
    """Per-feature empirical-CDF mapping fit on the training split."""

    references: np.ndarray  # [quantile_count, feature_count], non-decreasing per column
    output_distribution: Literal["uniform", "normal"] = "normal"
    probabilities: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.probabilities is None:
            object.__setattr__(self, "probabilities", np.linspace(0.0, 1.0, len(self.references)))

    @property
    def quantile_count(self) -> int:
        return len(self.references)

    @property
    def feature_count(self) -> int:
        return self.references.shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return apply_quantile_transform(self, x)

    # file layout (little-endian):
    #   magic b"LTRQUANT", u32 version, u8 output (0 uniform, 1 normal),
    #   u32 quantile_count, u32 feature_count,
    #   f64[quantile_count] probabilities, f64[quantile_count * feature_count] references

    def save(self, path: str | Path) -> None:
        refs = np.ascontiguousarray(self.references, dtype="<f8")
        blob = b"".join(
            [
                QUANT_MAGIC,
                struct.pack(
                    "<IBII",
                    1,
                    1 if self.output_distribution == "normal" else 0,
                    refs.shape[0],
                    refs.shape[1],
                ),
                np.ascontiguousarray(self.probabilities, dtype="<f8").tobytes(),
                refs.tobytes(),
            ]
        )
        Path(path).write_bytes(blob)

    @classmethod
    def load(cls, path: str | Path) -> "QuantileTransform":
        buf = Path(path).read_bytes()
        if buf[:8] != QUANT_MAGIC:
            raise ParseError(f"{path}: not a quantile transform file")
        version, out, nq, nf = struct.unpack_from("<IBII", buf, 8)
        if version != 1:
            raise ParseError(f"{path}: unsupported transform version {version}")
        pos = 8 + struct.calcsize("<IBII")
        probs = np.frombuffer(buf, dtype="<f8", count=nq, offset=pos).astype(np.float64)
        pos += nq * 8
        refs = np.frombuffer(buf, dtype="<f8", count=nq * nf, offset=pos).reshape(nq, nf).astype(np.float64)
        return cls(refs, "normal" if out else "uniform", probs)


def fit_quantile_transform(
    train: Dataset | np.ndarray,
    quantile_count: int = 1000,
    output: Literal["uniform", "normal"] = "normal",
) -> QuantileTransform:
    x = train.stacked()[0] if isinstance(train, Dataset) else np.asarray(train, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("cannot fit a quantile transform on an empty split")
    n_q = min(quantile_count, len(x))
    probs = np.linspace(0.0, 1.0, n_q)
    refs = np.quantile(x, probs, axis=0)
    # np.quantile can wobble by an ulp between neighbours
    refs = np.maximum.accumulate(refs, axis=0)
    return QuantileTransform(refs, output, probs)


def apply_quantile_transform(t: QuantileTransform, x: np.ndarray) -> np.ndarray:
    """Interpolated empirical CDF per feature, then optionally the inverse normal CDF.

    Ties among reference quantiles map to the middle of their probability span
    (average of forward and backward interpolation).  Out-of-range values clamp
    to the extreme quantiles.  A constant training column maps everything to
    the midpoint.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != t.feature_count:
        raise ValueError(f"expected {t.feature_count} features, got {x2.shape[1]}")
    p = t.probabilities
    out = np.empty_like(x2)
    for j in range(t.feature_count):
        ref = t.references[:, j]
        col = x2[:, j]
        if ref[0] == ref[-1]:
            out[:, j] = 0.5
            continue
        fwd = np.interp(col, ref, p)
        bwd = -np.interp(-col, -ref[::-1], -p[::-1])
        out[:, j] = 0.5 * (fwd + bwd)
    if t.output_distribution == "normal":
        out = ndtri(np.clip(out, CLIP, 1.0 - CLIP))
        # a constant column maps to exactly Phi^-1(0.5) = 0
        out[:, [j for j in range(t.feature_count) if t.references[0, j] == t.references[-1, j]]] = 0.0
    return out[0] if single else out


# ----------------------------------------------------------------------------
# pairs, subsets, perturbation


@dataclass(frozen=True, eq=False)
class PairSample:
    query_id: str
    features_i: np.ndarray
    features_j: np.ndarray
    preference: int = 1  # document i strictly more relevant than j


def pair_indices(
    grades: np.ndarray, max_pairs_per_query: int | None, rng: np.random.Generator
) -> np.ndarray:
    """All (i, j) with grade_i > grade_j, uniformly capped. Shape [n_pairs, 2]."""
    g = np.asarray(grades)
    ii, jj = np.nonzero(g[:, None] > g[None, :])
    pairs = np.stack([ii, jj], axis=1)
    if max_pairs_per_query is not None and len(pairs) > max_pairs_per_query:
        keep = np.sort(rng.choice(len(pairs), size=max_pairs_per_query, replace=False))
        pairs = pairs[keep]
    return pairs


def make_pairs(
    g: QueryGroup, max_pairs_per_query: int | None = 200, rng: np.random.Generator | None = None
) -> list[PairSample]:
    rng = rng if rng is not None else np.random.default_rng(0)
    return [
        PairSample(g.query_id, g.features[i], g.features[j])
        for i, j in pair_indices(g.grades, max_pairs_per_query, rng)
    ]


def subsample(train: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep ceil(fraction * Q) whole queries chosen uniformly at random, in original order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(train.queries)
    if fraction == 1.0:
        return train
    keep = math.ceil(fraction * n)
    picked = np.sort(np.random.default_rng(seed).choice(n, size=keep, replace=False))
    return replace(train, queries=[train.queries[i] for i in picked])


def perturb_features(x: np.ndarray, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if noise_std == 0:
        return x
    return x + rng.normal(0.0, noise_std, size=x.shape)


SPLITS = ("train", "vali", "test")


def load_split_files(input_dir: str | Path, scheme: Scheme) -> dict[str, Dataset]:
    """Parse ``train.txt``, ``vali.txt`` and ``test.txt`` from a fold directory."""
    input_dir = Path(input_dir)
    out = {}
    for split in SPLITS:
        path = input_dir / f"{split}.txt"
        if not path.is_file():
            raise FileNotFoundError(f"missing split file: {path}")
        out[split] = parse_letor(path, SCHEMES[scheme]["feature_count"], scheme)
    return out
