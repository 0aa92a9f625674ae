"""Feedforward scorer and its denoiser variant.

Both share the same backbone: ``num_hidden_layers`` blocks of
linear -> SiLU -> LayerNorm -> dropout, then a linear head.  The denoiser
takes ``[x_t | label one-hot with a MASK slot | time embedding]`` and emits
``[noise prediction (feature_dim) | label head]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Literal

import numpy as np

from . import numcore as nc
from .numcore import Tensor


@dataclass(frozen=True)
class NetConfig:
    feature_dim: int
    hidden_dim: int = 256
    num_hidden_layers: int = 4
    dropout_rate: float = 0.1
    mode: Literal["discriminative", "generative"] = "discriminative"
    label_outputs: int = 2  # 2 class logits (pointwise) or 1 scalar score (pairwise)
    label_classes: int = 2  # real label classes on the denoiser input; one more slot for MASK
    time_embed_dim: int = 16
    layernorm_eps: float = 1e-5

    def __post_init__(self):
        if self.hidden_dim < 1 or self.num_hidden_layers < 1:
            raise ValueError("hidden_dim and num_hidden_layers must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.label_outputs < 1:
            raise ValueError("label_outputs must be >= 1")
        if self.mode == "generative":
            # the label head never predicts MASK: C logits for C+1 input slots, or a scalar score
            if self.label_outputs not in (self.label_classes, 1):
                raise ValueError(
                    f"generative label head must have {self.label_classes} logits or 1 score, "
                    f"got {self.label_outputs}"
                )
            if self.time_embed_dim < 2 or self.time_embed_dim % 2:
                raise ValueError("time_embed_dim must be an even number >= 2")

    @property
    def generative(self) -> bool:
        return self.mode == "generative"

    @property
    def input_dim(self) -> int:
        if self.generative:
            return self.feature_dim + self.label_classes + 1 + self.time_embed_dim
        return self.feature_dim

    @property
    def output_dim(self) -> int:
        return self.feature_dim + self.label_outputs if self.generative else self.label_outputs

    @property
    def mask_index(self) -> int:
        return self.label_classes

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_dim] * self.num_hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


class TimeEmbedding:
    """Fixed sinusoidal embedding of t in [0, 1]; frequencies geometric in [1, 1000]."""

    def __init__(self, embed_dim: int = 16, max_frequency: float = 1000.0):
        self.embed_dim = embed_dim
        self.frequencies = np.geomspace(1.0, max_frequency, embed_dim // 2)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        angles = t * self.frequencies[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class DenoiserNet:
    """Parameters of the backbone plus the I/O layout described by ``config``."""

    def __init__(self, config: NetConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.time_embedding = TimeEmbedding(config.time_embed_dim)
        expected = parameter_shapes(config)
        if list(params) != list(expected) or any(
            params[k].shape != s for k, s in expected.items()
        ):
            raise ValueError("parameter layout does not match config")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.values.reshape(-1) for p in self.params.values()])

    def load_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for p in self.params.values():
            n = p.size
            p.values = np.array(flat[pos : pos + n], dtype=np.float64).reshape(p.shape)
            pos += n
        if pos != len(flat):
            raise ValueError(f"flat parameter vector has {len(flat)} entries, expected {pos}")

    def copy(self) -> "DenoiserNet":
        return DenoiserNet(
            self.config,
            {k: Tensor(v.values.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()},
        )

    # ------------------------------------------------------------------

    def backbone(self, inputs: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.config
        if inputs.shape[-1] != cfg.input_dim:
            raise nc.ShapeError(f"expected {cfg.input_dim} input columns, got {inputs.shape[-1]}")
        h = inputs
        p = self.params
        for i in range(cfg.num_hidden_layers):
            h = nc.add(nc.matmul(h, p[f"hidden{i}.weight"]), p[f"hidden{i}.bias"])
            h = nc.silu(h)
            h = nc.layernorm(h, p[f"norm{i}.gain"], p[f"norm{i}.bias"], cfg.layernorm_eps)
            h = nc.dropout(h, cfg.dropout_rate, training, rng)
        return nc.add(nc.matmul(h, p["head.weight"]), p["head.bias"])

    def denoiser_inputs(self, x_t: np.ndarray, y_in: np.ndarray, t) -> np.ndarray:
        cfg = self.config
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        y_in = np.atleast_2d(np.asarray(y_in, dtype=np.float64))
        if y_in.shape != (len(x_t), cfg.label_classes + 1):
            raise ValueError(f"label input must be [batch, {cfg.label_classes + 1}] one-hot")
        if not (np.all((y_in == 0) | (y_in == 1)) and np.all(y_in.sum(axis=1) == 1)):
            raise ValueError("label input is not a valid one-hot encoding")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x_t),))
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("diffusion time must lie in [0, 1]")
        return np.concatenate([x_t, y_in, self.time_embedding(t)], axis=1)


def parameter_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    dims = config.layer_dims()
    for i, (fan_in, fan_out) in enumerate(dims[:-1]):
        shapes[f"hidden{i}.weight"] = (fan_in, fan_out)
        shapes[f"hidden{i}.bias"] = (fan_out,)
        shapes[f"norm{i}.gain"] = (fan_out,)
        shapes[f"norm{i}.bias"] = (fan_out,)
    fan_in, fan_out = dims[-1]
    shapes["head.weight"] = (fan_in, fan_out)
    shapes["head.bias"] = (fan_out,)
    return shapes


def init_parameters(config: NetConfig, seed: int) -> DenoiserNet:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases 0; LayerNorm gain 1, bias 0."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight"):
            bound = 1.0 / np.sqrt(shape[0])
            values = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        params[name] = Tensor(values, requires_grad=True)
    return DenoiserNet(config, params)


def forward_discriminative(
    net: DenoiserNet, x, training: bool = False, rng: np.random.Generator | None = None
) -> Tensor:
    if net.config.generative:
        raise ValueError("forward_discriminative needs a discriminative net")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != net.config.feature_dim:
        raise nc.ShapeError(f"expected {net.config.feature_dim} features, got {x.shape[1]}")
    return net.backbone(Tensor(x), training, rng)


def forward_denoiser(
    net: DenoiserNet,
    x_t,
    y_in,
    t,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Returns (noise prediction chi [batch, feature_dim], label head psi [batch, label_outputs])."""
    cfg = net.config
    if not cfg.generative:
        raise ValueError("forward_denoiser needs a generative net")
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    if x_t.shape[1] != cfg.feature_dim:
        raise nc.ShapeError(f"expected {cfg.feature_dim} features, got {x_t.shape[1]}")
    out = net.backbone(Tensor(net.denoiser_inputs(x_t, y_in, t)), training, rng)
    f = cfg.feature_dim
    return nc.columns(out, 0, f), nc.columns(out, f, f + cfg.label_outputs)


def label_onehot(index, classes: int) -> np.ndarray:
    """One-hot rows over ``classes + 1`` slots (last slot is MASK)."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    out = np.zeros((len(index), classes + 1))
    out[np.arange(len(index)), index] = 1.0
    return out


def mask_onehot(n: int, classes: int) -> np.ndarray:
    return label_onehot(np.full(n, classes), classes)


def _score_head(values: np.ndarray) -> np.ndarray:
    if values.shape[1] == 1:
        return values[:, 0]
    return nc.softmax_values(values)[:, -1]


def score_pointwise(net: DenoiserNet, x) -> np.ndarray:
    """Ranking score from a trained generative net: one pass at t = 0 with a MASK label.

    Two-logit heads give P(relevant); scalar heads give the raw score.
    The noise-prediction columns are ignored.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cfg = net.config
    _, psi = forward_denoiser(net, x, mask_onehot(len(x), cfg.label_classes), 0.0)
    return _score_head(psi.values)


def score(net: DenoiserNet, x, batch_size: int = 8192) -> np.ndarray:
    """Inference-mode ranking scores for either kind of net."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = []
    for start in range(0, len(x), batch_size):
        chunk = x[start : start + batch_size]
        if net.config.generative:
            out.append(score_pointwise(net, chunk))
        else:
            out.append(_score_head(forward_discriminative(net, chunk).values))
    return np.concatenate(out) if out else np.zeros(0)


def fold_to_discriminative(net: DenoiserNet, label_index: int, t: float) -> DenoiserNet:
    """Discriminative net equal to ``net`` with the label input and time held fixed.

    The constant extra inputs are folded into the first-layer bias and the
    noise-prediction columns are dropped from the head.
    """
    cfg = net.config
    if not cfg.generative:
        raise ValueError("net is already discriminative")
    f = cfg.feature_dim
    extra = np.concatenate(
        [label_onehot([label_index], cfg.label_classes)[0], net.time_embedding([t])[0]]
    )
    dcfg = replace(cfg, mode="discriminative")
    params = {}
    for name, p in net.params.items():
        v = p.values
        if name == "hidden0.weight":
            v = v[:f]
        elif name == "hidden0.bias":
            v = v + extra @ net.params["hidden0.weight"].values[f:]
        elif name == "head.weight":
            v = v[:, f:]
        elif name == "head.bias":
            v = v[f:]
        params[name] = Tensor(np.array(v), requires_grad=True)
    return DenoiserNet(dcfg, params)


# ----------------------------------------------------------------------------
# checkpoint file
#
#   magic   8 bytes  b"LTRCKPT\0"
#   version u32
#   step    u64      training step the parameters were taken at
#   meta    u32 byte length + utf-8 JSON {"config": {...}, "extra": {...}}
#   count   u64      number of parameters
#   params  f64[count], little-endian, concatenated in layout order

CKPT_MAGIC = b"LTRCKPT\0"
CKPT_VERSION = 1


def save_checkpoint(net: DenoiserNet, path: str | Path, step: int = 0, extra: dict | None = None) -> None:
    meta = json.dumps({"config": asdict(net.config), "extra": extra or {}}, sort_keys=True).encode()
    flat = np.ascontiguousarray(net.flat_parameters(), dtype="<f8")
    blob = b"".join(
        [
            CKPT_MAGIC,
            struct.pack("<IQ", CKPT_VERSION, step),
            struct.pack("<I", len(meta)),
            meta,
            struct.pack("<Q", flat.size),
            flat.tobytes(),
        ]
    )
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | Path) -> tuple[DenoiserNet, int, dict]:
    """Returns (net, step, extra metadata)."""
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, step = struct.unpack_from("<IQ", buf, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8 + struct.calcsize("<IQ")
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos : pos + mlen].decode())
    pos += mlen
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    flat = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
    config = NetConfig(**meta["config"])
    net = init_parameters(config, 0)
    net.load_flat(flat)
    return net, step, meta["extra"]
