"""AdamW training with validation-based model selection."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .data import Dataset, QuantileTransform, load_cache, pair_indices, perturb_features, subsample
from .diffusion import DiffusionSchedule, LossWeights
from .evaluation import evaluate
from .model import DenoiserNet, init_parameters, save_checkpoint
from .numcore import Tensor
from .objectives import (
    ObjectiveKind,
    disc_pairwise_loss,
    disc_pointwise_loss,
    disc_pointwise_squared_loss,
    gen_pairwise_loss,
    gen_pointwise_loss,
)

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    pass


class TrainingAborted(RuntimeError):
    """Raised when the loss goes non-finite; the last good checkpoint is kept on disk."""

    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "OptimState":
        return cls(
            [np.zeros_like(p.values) for p in params],
            [np.zeros_like(p.values) for p in params],
            **kw,
        )


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimState) -> None:
    """One AdamW update in place: theta *= (1 - lr * wd), then the bias-corrected Adam step."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("params, grads and optimizer state are not aligned")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient; aborting")
    state.step += 1
    lr = state.learning_rate
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} vs parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.values *= 1.0 - lr * state.weight_decay
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ----------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Keys of the flat ``key = value`` run file (``#`` starts a comment)."""

    objective: ObjectiveKind
    data_dir: Path
    out_dir: Path
    seed: int
    dataset_name: str = ""
    epochs: int = 200
    batch_size: int = 0  # 0: 1024 rows pointwise, 512 pairs pairwise
    max_steps: int = 0  # 0: no cap
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    hidden_dim: int = 256
    num_hidden_layers: int = 4
    dropout: float = 0.1
    time_embed_dim: int = 16
    squared_loss: bool = False
    sigma_max: float = 1.0
    rho: float = 1.0
    t_min: float = 0.02
    lambda_num_start: float = 1.0
    lambda_num_end: float = 0.1
    pair_cat_weighting: bool = True
    tau: float = 1.0
    eval_interval: int = 0  # 0: once per epoch
    k_fraction: float = 1.0
    subsample_seed: int = 0
    noise_std: float = 0.0
    max_pairs_per_query: int = 200

    @property
    def effective_batch_size(self) -> int:
        if self.batch_size:
            return self.batch_size
        return 512 if self.objective.pairwise else 1024

    def schedule(self) -> DiffusionSchedule:
        weighted = self.pair_cat_weighting if self.objective.pairwise else True
        return DiffusionSchedule(self.sigma_max, self.rho, self.t_min, weighted)

    def method_name(self) -> str:
        return self.objective.display_name(perturbed=self.noise_std > 0)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, ObjectiveKind):
                v = v.value
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base_dir: Path | None = None, check_paths: bool = True) -> "RunConfig":
        raw: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            raw[key.strip()] = value.strip()
        return cls.from_dict(raw, base_dir, check_paths)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None, check_paths: bool = True) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(raw) - set(fields)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for req in ("objective", "data_dir", "out_dir", "seed"):
            if req not in raw:
                raise ValueError(f"config is missing required key {req!r}")
        kw = {}
        defaults = {f.name: f.default for f in dataclasses.fields(cls)}
        for key, value in raw.items():
            if not isinstance(value, str):
                kw[key] = value
                continue
            default = defaults.get(key)
            if key == "objective":
                kw[key] = ObjectiveKind(value)
            elif key in ("data_dir", "out_dir"):
                p = Path(value)
                if base_dir is not None and not p.is_absolute():
                    p = base_dir / p
                kw[key] = p.resolve()
            elif isinstance(default, bool):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"{key}: expected a boolean, got {value!r}")
                kw[key] = value.lower() in ("true", "1", "yes")
            elif key == "seed" or isinstance(default, int):
                kw[key] = int(value)
            elif isinstance(default, float):
                kw[key] = float(value)
            else:
                kw[key] = value
        cfg = cls(**kw)
        cfg.objective = ObjectiveKind(cfg.objective)
        cfg.data_dir = Path(cfg.data_dir)
        cfg.out_dir = Path(cfg.out_dir)
        if check_paths and not cfg.data_dir.is_dir():
            raise FileNotFoundError(f"data_dir does not exist: {cfg.data_dir}")
        if not 0.0 < cfg.k_fraction <= 1.0:
            raise ValueError("k_fraction must lie in (0, 1]")
        if cfg.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        return cfg

    @classmethod
    def load(cls, path: str | Path, check_paths: bool = True) -> "RunConfig":
        path = Path(path)
        return cls.from_text(path.read_text(encoding="utf-8"), path.parent, check_paths)


# ----------------------------------------------------------------------------
# training log


@dataclass
class LogRecord:
    step: int
    train_loss: float
    val_ndcg10: float


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)

    def append(self, step: int, train_loss: float, val_ndcg10: float) -> None:
        if self.records and step <= self.records[-1].step:
            raise ValueError("log steps must be strictly increasing")
        self.records.append(LogRecord(step, train_loss, val_ndcg10))

    def to_csv(self) -> str:
        lines = ["step,train_loss,val_ndcg10"]
        lines += [f"{r.step},{r.train_loss!r},{r.val_ndcg10!r}" for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        lines = text.strip().splitlines()
        if not lines or lines[0] != "step,train_loss,val_ndcg10":
            raise ValueError("not a training log")
        log_ = cls()
        for line in lines[1:]:
            s, l, v = line.split(",")
            log_.append(int(s), float(l), float(v))
        return log_


# ----------------------------------------------------------------------------


def load_prepared(data_dir: str | Path) -> dict[str, Dataset]:
    """Load the cached splits of a prepared directory with the fitted transform applied."""
    data_dir = Path(data_dir)
    transform = QuantileTransform.load(data_dir / "transform.npz")
    out = {}
    for split in ("train", "vali", "test"):
        path = data_dir / f"{split}.bin"
        if path.is_file():
            out[split] = load_cache(path).with_features(transform)
    return out


@dataclass
class TrainResult:
    net: DenoiserNet
    best_step: int
    best_val_ndcg10: float
    log: TrainLog
    checkpoint: Path | None = None


def _make_loss_fn(config: RunConfig, net: DenoiserNet, total_steps: int):
    kind = config.objective
    schedule = config.schedule()
    weights = LossWeights(total_steps, config.lambda_num_start, config.lambda_num_end)

    if kind is ObjectiveKind.DISC_POINTWISE:
        fn = disc_pointwise_squared_loss if config.squared_loss else disc_pointwise_loss
        return lambda batch, step, rng: fn(net, batch[0], batch[1], True, rng)
    if kind is ObjectiveKind.DISC_PAIRWISE:
        return lambda batch, step, rng: disc_pairwise_loss(net, batch[0], batch[1], True, rng, config.tau)
    if kind is ObjectiveKind.GEN_POINTWISE:
        return lambda batch, step, rng: gen_pointwise_loss(
            net, batch[0], batch[1], schedule, weights, step, rng
        )
    return lambda batch, step, rng: gen_pairwise_loss(
        net, batch[0], batch[1], schedule, weights, step, rng, tau=config.tau
    )


def train(
    config: RunConfig,
    splits: dict[str, Dataset] | None = None,
    write_outputs: bool = True,
) -> TrainResult:
    """Fixed-budget training; the checkpoint with the best validation NDCG@10 is kept.

    With ``write_outputs`` the run directory receives ``config.txt``,
    ``train_log.csv`` and ``best.ckpt``.
    """
    if config.objective.generative and config.noise_std > 0:
        raise ValueError("feature perturbation is only defined for discriminative objectives")
    splits = splits if splits is not None else load_prepared(config.data_dir)
    train_ds = subsample(splits["train"], config.k_fraction, config.subsample_seed)
    vali = splits["vali"]

    x, _, binary, offsets = train_ds.stacked()
    if config.objective.pairwise:
        pair_rng = np.random.default_rng([config.seed, 1])
        chunks = []
        for qi, q in enumerate(train_ds.queries):
            p = pair_indices(q.grades, config.max_pairs_per_query, pair_rng)
            chunks.append(p + offsets[qi])
        units = np.concatenate(chunks) if chunks else np.zeros((0, 2), np.int64)
    else:
        units = np.arange(len(x))
    if len(units) == 0:
        raise ValueError("no training examples (pairwise objectives need graded differences)")

    bs = config.effective_batch_size
    steps_per_epoch = math.ceil(len(units) / bs)
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps:
        total_steps = min(total_steps, config.max_steps)
    eval_interval = config.eval_interval or steps_per_epoch

    net_cfg = config.objective.net_config(
        x.shape[1],
        config.hidden_dim,
        config.num_hidden_layers,
        config.dropout,
        config.time_embed_dim,
        config.squared_loss,
    )
    net = init_parameters(net_cfg, config.seed)
    params = net.parameters()
    state = OptimState.for_params(
        params, learning_rate=config.learning_rate, weight_decay=config.weight_decay
    )
    loss_fn = _make_loss_fn(config, net, total_steps)

    out_dir = Path(config.out_dir)
    ckpt_path = out_dir / "best.ckpt" if write_outputs else None
    if write_outputs:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(config.to_text(), encoding="utf-8")
    extra = {
        "objective": config.objective.value,
        "method": config.method_name(),
        "dataset": config.dataset_name,
        "K": config.k_fraction,
        "noise_std": config.noise_std,
    }

    train_log = TrainLog()
    best_flat = net.flat_parameters()
    best_step, best_val = 0, -math.inf
    running, running_n = 0.0, 0
    step = 0
    epoch = 0
    while step < total_steps:
        rng = np.random.default_rng([config.seed, 2, epoch])
        order = rng.permutation(len(units))
        for start in range(0, len(order), bs):
            if step >= total_steps:
                break
            idx = units[order[start : start + bs]]
            if config.objective.pairwise:
                xi, xj = x[idx[:, 0]], x[idx[:, 1]]
                if config.noise_std:
                    xi = perturb_features(xi, config.noise_std, rng)
                    xj = perturb_features(xj, config.noise_std, rng)
                batch = (xi, xj)
            else:
                xb = x[idx]
                if config.noise_std:
                    xb = perturb_features(xb, config.noise_std, rng)
                batch = (xb, binary[idx])

            with nc.Tape() as tape:
                loss = loss_fn(batch, step, rng)
            value = loss.item()
            if not math.isfinite(value):
                _save_best(net, best_flat, ckpt_path, best_step, extra, best_val)
                raise TrainingAborted(f"non-finite loss at step {step}", ckpt_path)
            grads = nc.backward(loss, tape, params)
            try:
                adamw_step(params, [grads[p] for p in params], state)
            except NonFiniteError as e:
                _save_best(net, best_flat, ckpt_path, best_step, extra, best_val)
                raise TrainingAborted(f"{e} at step {step}", ckpt_path) from e
            step += 1
            running += value
            running_n += 1

            if step % eval_interval == 0 or step == total_steps:
                val = evaluate(net, vali).mean_ndcg
                train_log.append(step, running / running_n, val)
                log.info("step %d loss %.5f val ndcg@10 %.4f", step, running / running_n, val)
                running, running_n = 0.0, 0
                if val > best_val:
                    best_val, best_step = val, step
                    best_flat = net.flat_parameters()
        epoch += 1

    net.load_flat(best_flat)
    if write_outputs:
        _save_best(net, best_flat, ckpt_path, best_step, extra, best_val)
        (out_dir / "train_log.csv").write_text(train_log.to_csv(), encoding="utf-8")
    return TrainResult(net, best_step, best_val, train_log, ckpt_path)


def _save_best(net, flat, path, step, extra, val) -> None:
    if path is None:
        return
    snapshot = net.copy()
    snapshot.load_flat(flat)
    save_checkpoint(snapshot, path, step, {**extra, "val_ndcg10": val if math.isfinite(val) else None})
