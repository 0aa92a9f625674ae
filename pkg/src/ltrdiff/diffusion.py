"""Continuous-time corruption of features (Gaussian) and labels (masking),
and the joint denoising loss.

Schedules:
    sigma(t) = sigma_max * t**rho            (power_mean, fixed rho)
    alpha(t) = 1 - t                         (log_linear mask survival)
    w(t)     = -alpha'(t) / (1 - alpha(t)) = 1 / t

The categorical term is written as a non-negative loss, w(t) * CE, i.e. the
negation of the log-likelihood bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor


@dataclass(frozen=True)
class DiffusionSchedule:
    sigma_max: float = 1.0
    rho: float = 1.0
    t_min: float = 1.0 / 50
    weighted: bool = True  # False forces w(t) = 1

    def __post_init__(self):
        if not 0.0 < self.t_min < 1.0:
            raise ValueError("t_min must lie in (0, 1)")
        if self.sigma_max < 0 or self.rho <= 0:
            raise ValueError("need sigma_max >= 0 and rho > 0")

    def sigma(self, t):
        return self.sigma_max * np.power(np.asarray(t, dtype=np.float64), self.rho)

    @staticmethod
    def alpha(t):
        return 1.0 - np.asarray(t, dtype=np.float64)

    @staticmethod
    def alpha_prime(t):
        return -np.ones_like(np.asarray(t, dtype=np.float64))

    def mask_weight(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < self.t_min):
            raise ValueError(f"diffusion time below t_min={self.t_min}")
        if not self.weighted:
            return np.ones_like(t)
        return -self.alpha_prime(t) / (1.0 - self.alpha(t))


@dataclass(frozen=True)
class LossWeights:
    """lambda_num annealed linearly from ``start`` (step 0) to ``end`` (last step); lambda_cat = 1."""

    total_steps: int
    start: float = 1.0
    end: float = 0.1
    lambda_cat: float = 1.0

    def lambda_num(self, step: int) -> float:
        if self.total_steps <= 1:
            return self.start
        frac = min(max(step, 0) / (self.total_steps - 1), 1.0)
        return self.start + (self.end - self.start) * frac


@dataclass
class CorruptedBatch:
    x_t: np.ndarray
    eps: np.ndarray
    y_t: np.ndarray
    t: np.ndarray
    mask_flags: np.ndarray


def sample_time(rng: np.random.Generator, batch: int, t_min: float = 1.0 / 50) -> np.ndarray:
    """i.i.d. uniform on [t_min, 1]."""
    if not 0.0 < t_min < 1.0:
        raise ValueError("t_min must lie in (0, 1)")
    return t_min + (1.0 - t_min) * rng.random(batch)


def corrupt_numeric(
    x0: np.ndarray, t, rng: np.random.Generator, schedule: DiffusionSchedule | None = None,
    eps: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """x_t = x0 + sigma(t) * eps with eps ~ N(0, I).  ``t`` is scalar or per-row."""
    schedule = schedule or DiffusionSchedule()
    x0 = np.asarray(x0, dtype=np.float64)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    sig = schedule.sigma(t)
    if sig.ndim == 1 and x0.ndim == 2:
        sig = sig[:, None]
    return x0 + sig * eps, eps


def mask_draw(t, rng: np.random.Generator) -> np.ndarray:
    """True where the label is masked; probability 1 - alpha(t)."""
    t = np.asarray(t, dtype=np.float64)
    return rng.random(t.shape) < (1.0 - DiffusionSchedule.alpha(t))


def corrupt_label(
    y0: np.ndarray, t, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Replace one-hot rows of ``y0`` (last slot = MASK) by MASK with probability 1 - alpha(t).

    Returns (y_t, mask_flags).
    """
    y0 = np.atleast_2d(np.asarray(y0, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(y0),))
    flags = mask_draw(t, rng)
    y_t = y0.copy()
    y_t[flags] = 0.0
    y_t[flags, -1] = 1.0
    return y_t, flags


def loss_num(chi: Tensor, eps: np.ndarray) -> Tensor:
    """Batch mean of ||chi - eps||^2."""
    eps = np.asarray(eps, dtype=np.float64)
    if chi.shape != eps.shape:
        raise nc.ShapeError(f"chi {chi.shape} vs eps {eps.shape}")
    return nc.mean(nc.row_sum(nc.square(nc.sub(chi, eps))))


def _masked_mean(per_row: Tensor, t: np.ndarray, mask: np.ndarray, schedule: DiffusionSchedule) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    n_masked = int(mask.sum())
    if n_masked == 0:
        return Tensor(0.0)
    coef = np.zeros(len(mask))
    coef[mask] = schedule.mask_weight(np.asarray(t)[mask]) / n_masked
    return nc.dot(per_row, coef)


def loss_cat_pointwise(
    psi: Tensor, y0_index, t, mask, schedule: DiffusionSchedule | None = None
) -> Tensor:
    """Mean over masked rows of w(t) * (-log softmax(psi)[y0]); unmasked rows contribute nothing."""
    schedule = schedule or DiffusionSchedule()
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (psi.shape[0],))
    return _masked_mean(nc.cross_entropy_rows(psi, y0_index), t, mask, schedule)


def ranknet_rows(score_i: Tensor, score_j: Tensor, tau: float = 1.0) -> Tensor:
    """log(1 + exp(-(s_i - s_j) / tau)) per pair."""
    return nc.softplus(nc.scale(nc.sub(score_i, score_j), -1.0 / tau))


def loss_cat_pairwise(
    score_i: Tensor, score_j: Tensor, t, mask, schedule: DiffusionSchedule | None = None, tau: float = 1.0
) -> Tensor:
    """Masked, w(t)-weighted RankNet loss on a pair of scalar scores (document i preferred)."""
    schedule = schedule or DiffusionSchedule()
    if len(score_i.shape) == 2:
        score_i, score_j = nc.flatten(score_i), nc.flatten(score_j)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (score_i.shape[0],))
    return _masked_mean(ranknet_rows(score_i, score_j, tau), t, mask, schedule)


def total_loss(l_num: Tensor, l_cat: Tensor, weights: LossWeights, step: int) -> Tensor:
    lam = weights.lambda_num(step)
    cat = l_cat if weights.lambda_cat == 1.0 else nc.scale(l_cat, weights.lambda_cat)
    if lam == 0.0:
        return cat
    return nc.add(nc.scale(l_num, lam), cat)
