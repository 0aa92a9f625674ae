"""Toy LETOR-style data with a planted linear relevance signal, for smoke runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import SCHEMES, Dataset, QueryGroup, binarize, write_letor


def make_dataset(
    n_queries: int,
    seed: int,
    scheme: str = "letor",
    docs_per_query: tuple[int, int] = (8, 30),
    noise: float = 0.5,
    id_offset: int = 0,
) -> Dataset:
    rng = np.random.default_rng(seed)
    layout = SCHEMES[scheme]
    f, levels = layout["feature_count"], layout["grade_levels"]
    direction = np.random.default_rng(12345).normal(size=f)
    direction[f // 2 :] = 0.0  # second half of the features carries no signal
    queries = []
    for q in range(n_queries):
        n = int(rng.integers(docs_per_query[0], docs_per_query[1] + 1))
        x = rng.gamma(2.0, 1.0, size=(n, f)) * (rng.random((n, f)) > 0.2)
        latent = (x - 2.0) @ direction / np.sqrt(f) + noise * rng.normal(size=n)
        cuts = np.quantile(latent, np.linspace(0, 1, levels + 1)[1:-1] ** 0.7)
        grades = np.searchsorted(cuts, latent).astype(np.int64)
        queries.append(QueryGroup(str(id_offset + q), x, grades, binarize(grades, scheme)))
    return Dataset(queries, f, levels, scheme)  # type: ignore[arg-type]


def write_fold(
    out_dir: str | Path, n_train: int = 60, n_vali: int = 20, n_test: int = 20, seed: int = 0,
    scheme: str = "letor",
) -> Path:
    """Write train.txt / vali.txt / test.txt of a toy fold."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    offset = 0
    for i, (name, n) in enumerate((("train", n_train), ("vali", n_vali), ("test", n_test))):
        write_letor(make_dataset(n, seed + i, scheme, id_offset=offset), out / f"{name}.txt")
        offset += n
    return out
