"""Independent reference computations used by the tests."""

import math

import numpy as np


def fd_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f() with respect to array x (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def brute_ranking(scores, labels):
    """Labels ordered by descending score, ties by position (explicit sort key)."""
    idx = sorted(range(len(scores)), key=lambda i: (-float(scores[i]), i))
    return [int(labels[i]) for i in idx]


def brute_ndcg(scores, labels, k):
    def dcg(rels):
        return sum((2 ** r - 1) / math.log2(pos + 2) for pos, r in enumerate(rels[:k]))

    ideal = dcg(sorted((int(l) for l in labels), reverse=True))
    if ideal == 0:
        return 0.0
    return dcg(brute_ranking(scores, labels)) / ideal


def brute_ap(scores, labels, k, threshold=1):
    ranked = brute_ranking(scores, labels)
    total = sum(1 for l in labels if l >= threshold)
    if total == 0:
        return 0.0
    hits, acc = 0, 0.0
    for pos, r in enumerate(ranked[:k], start=1):
        if r >= threshold:
            hits += 1
            acc += hits / pos
    return acc / min(total, k)


def reduction_gap(kind: str, seed: int, feature_dim: int = 6, hidden_dim: int = 16, rows: int = 12) -> float:
    """|generative loss - discriminative loss| under the degenerate corruption.

    No feature noise, every label masked, unit mask weight, no noise-prediction
    term and a fixed diffusion time.  The discriminative side is the same net
    with the MASK label and that time folded into its first-layer bias.
    """
    from ltrdiff.diffusion import DiffusionSchedule, LossWeights
    from ltrdiff.model import fold_to_discriminative, init_parameters
    from ltrdiff.objectives import (
        ObjectiveKind,
        disc_pairwise_loss,
        disc_pointwise_loss,
        gen_pairwise_loss,
        gen_pointwise_loss,
    )

    rng = np.random.default_rng(seed)
    schedule = DiffusionSchedule(sigma_max=0.0, weighted=False)
    weights = LossWeights(total_steps=1, start=0.0, end=0.0)
    t = float(rng.uniform(schedule.t_min, 1.0))
    obj = ObjectiveKind.GEN_PAIRWISE if kind == "pairwise" else ObjectiveKind.GEN_POINTWISE
    net = init_parameters(obj.net_config(feature_dim, hidden_dim, time_embed_dim=8), seed)
    folded = fold_to_discriminative(net, net.config.mask_index, t)
    corrupt_rng = np.random.default_rng(seed + 1)
    if kind == "pairwise":
        x_i, x_j = rng.normal(size=(rows, feature_dim)), rng.normal(size=(rows, feature_dim))
        gen = gen_pairwise_loss(net, x_i, x_j, schedule, weights, 0, corrupt_rng, training=False, times=t, force_mask=True)
        disc = disc_pairwise_loss(folded, x_i, x_j)
    else:
        x = rng.normal(size=(rows, feature_dim))
        labels = rng.integers(0, 2, rows)
        gen = gen_pointwise_loss(net, x, labels, schedule, weights, 0, corrupt_rng, training=False, times=t, force_mask=True)
        disc = disc_pointwise_loss(folded, x, labels)
    return abs(gen.item() - disc.item())
