"""Batch losses for the four rankers: discriminative / generative x pointwise / pairwise."""

from __future__ import annotations

import enum

import numpy as np

from . import numcore as nc
from .diffusion import (
    CorruptedBatch,
    DiffusionSchedule,
    LossWeights,
    corrupt_label,
    corrupt_numeric,
    loss_cat_pairwise,
    loss_cat_pointwise,
    loss_num,
    mask_draw,
    ranknet_rows,
    sample_time,
    total_loss,
)
from .model import DenoiserNet, NetConfig, forward_denoiser, forward_discriminative, label_onehot
from .numcore import Tensor


class ObjectiveKind(str, enum.Enum):
    DISC_POINTWISE = "disc_pointwise"
    DISC_PAIRWISE = "disc_pairwise"
    GEN_POINTWISE = "gen_pointwise"
    GEN_PAIRWISE = "gen_pairwise"

    @property
    def generative(self) -> bool:
        return self in (ObjectiveKind.GEN_POINTWISE, ObjectiveKind.GEN_PAIRWISE)

    @property
    def pairwise(self) -> bool:
        return self in (ObjectiveKind.DISC_PAIRWISE, ObjectiveKind.GEN_PAIRWISE)

    def display_name(self, perturbed: bool = False) -> str:
        family = "DiffusionRank" if self.generative else "Discriminative"
        name = f"{family} ({'pairwise' if self.pairwise else 'pointwise'})"
        return f"{name} perturbed" if perturbed else name

    def net_config(
        self,
        feature_dim: int,
        hidden_dim: int = 256,
        num_hidden_layers: int = 4,
        dropout_rate: float = 0.1,
        time_embed_dim: int = 16,
        squared_loss: bool = False,
    ) -> NetConfig:
        scalar_head = self.pairwise or (squared_loss and self is ObjectiveKind.DISC_POINTWISE)
        return NetConfig(
            feature_dim=feature_dim,
            hidden_dim=hidden_dim,
            num_hidden_layers=num_hidden_layers,
            dropout_rate=dropout_rate,
            mode="generative" if self.generative else "discriminative",
            label_outputs=1 if scalar_head else 2,
            label_classes=2,
            time_embed_dim=time_embed_dim,
        )


# ----------------------------------------------------------------------------
# discriminative


def disc_pointwise_loss(
    net: DenoiserNet, x, labels, training: bool = False, rng: np.random.Generator | None = None
) -> Tensor:
    """Mean softmax cross-entropy of the logits against binarized labels."""
    return nc.softmax_cross_entropy(forward_discriminative(net, x, training, rng), labels)


def disc_pointwise_squared_loss(
    net: DenoiserNet, x, labels, training: bool = False, rng: np.random.Generator | None = None
) -> Tensor:
    s = nc.flatten(forward_discriminative(net, x, training, rng))
    return nc.mean(nc.square(nc.sub(s, np.asarray(labels, dtype=np.float64))))


def _pair_scores(out: Tensor, n: int) -> tuple[Tensor, Tensor]:
    flat = nc.flatten(out)
    return nc.rows(flat, 0, n), nc.rows(flat, n, 2 * n)


def disc_pairwise_loss(
    net: DenoiserNet,
    x_i,
    x_j,
    training: bool = False,
    rng: np.random.Generator | None = None,
    tau: float = 1.0,
) -> Tensor:
    """Mean RankNet loss log(1 + exp(-(s_i - s_j) / tau)); document i is the preferred one.

    Both sides go through the same net in one stacked pass, which is the same
    as two independent passes since every layer is row-wise.
    """
    x_i = np.atleast_2d(x_i)
    n = len(x_i)
    out = forward_discriminative(net, np.concatenate([x_i, np.atleast_2d(x_j)]), training, rng)
    s_i, s_j = _pair_scores(out, n)
    return nc.mean(ranknet_rows(s_i, s_j, tau))


# ----------------------------------------------------------------------------
# generative


def corrupt_pointwise(
    x0,
    labels,
    classes: int,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    times=None,
    force_mask: bool | None = None,
) -> CorruptedBatch:
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = len(x0)
    t = sample_time(rng, n, schedule.t_min) if times is None else np.broadcast_to(times, (n,)).astype(float)
    x_t, eps = corrupt_numeric(x0, t, rng, schedule)
    y0 = label_onehot(labels, classes)
    if force_mask is None:
        y_t, flags = corrupt_label(y0, t, rng)
    else:
        flags = np.full(n, force_mask)
        y_t = y0.copy()
        y_t[flags] = 0.0
        y_t[flags, -1] = 1.0
    return CorruptedBatch(x_t, eps, y_t, t, flags)


def gen_pointwise_loss(
    net: DenoiserNet,
    x0,
    labels,
    schedule: DiffusionSchedule,
    weights: LossWeights,
    step: int,
    rng: np.random.Generator,
    training: bool = True,
    times=None,
    force_mask: bool | None = None,
) -> Tensor:
    """lambda_num * L_num + L_cat on a batch of (features, binary label) rows.

    Per row: draw t, add Gaussian noise to the features, mask the label with
    probability 1 - alpha(t), then denoise.  ``times`` and ``force_mask`` pin
    the random draws (used by consistency checks).
    """
    labels = np.asarray(labels, dtype=np.int64)
    cfg = net.config
    batch = corrupt_pointwise(x0, labels, cfg.label_classes, schedule, rng, times, force_mask)
    chi, psi = forward_denoiser(net, batch.x_t, batch.y_t, batch.t, training, rng)
    l_cat = loss_cat_pointwise(psi, labels, batch.t, batch.mask_flags, schedule)
    return total_loss(loss_num(chi, batch.eps), l_cat, weights, step)


def corrupt_pairs(
    x_i,
    x_j,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    times=None,
    force_mask: bool | None = None,
) -> CorruptedBatch:
    """One shared t and one tied mask flag per pair; independent noise per side.

    The returned arrays stack the i sides on top of the j sides (2n rows).
    Label inputs: side i carries class 1 (preferred), side j class 0.
    """
    x_i = np.atleast_2d(np.asarray(x_i, dtype=np.float64))
    x_j = np.atleast_2d(np.asarray(x_j, dtype=np.float64))
    n = len(x_i)
    t = sample_time(rng, n, schedule.t_min) if times is None else np.broadcast_to(times, (n,)).astype(float)
    t2 = np.concatenate([t, t])
    x_t, eps = corrupt_numeric(np.concatenate([x_i, x_j]), t2, rng, schedule)
    flags = mask_draw(t, rng) if force_mask is None else np.full(n, force_mask)
    flags2 = np.concatenate([flags, flags])
    y = label_onehot(np.concatenate([np.ones(n, np.int64), np.zeros(n, np.int64)]), 2)
    y[flags2] = 0.0
    y[flags2, -1] = 1.0
    return CorruptedBatch(x_t, eps, y, t2, flags2)


def gen_pairwise_loss(
    net: DenoiserNet,
    x_i,
    x_j,
    schedule: DiffusionSchedule,
    weights: LossWeights,
    step: int,
    rng: np.random.Generator,
    training: bool = True,
    times=None,
    force_mask: bool | None = None,
    tau: float = 1.0,
) -> Tensor:
    """Pairwise denoising loss: the scalar-head denoiser runs on both sides; the
    noise term sums both sides' squared errors per pair and the label term is
    the masked, w(t)-weighted RankNet loss on (s_i, s_j)."""
    n = len(np.atleast_2d(x_i))
    batch = corrupt_pairs(x_i, x_j, schedule, rng, times, force_mask)
    chi, psi = forward_denoiser(net, batch.x_t, batch.y_t, batch.t, training, rng)
    s_i, s_j = _pair_scores(psi, n)
    l_cat = loss_cat_pairwise(s_i, s_j, batch.t[:n], batch.mask_flags[:n], schedule, tau)
    l_num = nc.scale(loss_num(chi, batch.eps), 2.0)
    return total_loss(l_num, l_cat, weights, step)
