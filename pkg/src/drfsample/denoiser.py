"""A small fully connected epsilon predictor trained with plain SGD."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionError, TrainingDivergence
from .schedule import NoiseSchedule
from .score import ScoreModel

__all__ = ["ToyDenoiser", "TrainConfig", "train_denoiser"]

_MAGIC = b"DRFW"
_PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


def _silu(x):
    return x * expit(x)


def _silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-2
    seed: int = 0
    batch_size: int = 128
    steps_per_epoch: int = 50
    cond_dropout: float = 0.1
    grad_clip: float = 10.0
    lr_decay: bool = True


class ToyDenoiser(ScoreModel):
    """Two-hidden-layer SiLU network over ``latent ⊕ time features ⊕ label one-hot``.

    The network head estimates the clean latent; :meth:`predict` converts it
    to noise with the schedule coefficients, ``(z - sqrt(a) x0) / sqrt(1 - a)``.

    The time features are ``n_freq`` sine/cosine pairs of ``t / T``.  Label
    slot ``n_labels`` is the unconditional (``None``) condition.
    """

    supports_exact_vjp = True

    def __init__(self, shape, n_labels, sched: NoiseSchedule, width=128, n_freq=4, seed=0):
        self.shape = tuple(int(s) for s in shape)
        self.dim = int(np.prod(self.shape, dtype=np.int64))
        self.n_labels = int(n_labels)
        self.sched = sched
        self.width = int(width)
        self.n_freq = int(n_freq)
        self.seed = int(seed)
        self.train_config: TrainConfig | None = None
        self.final_loss: float | None = None
        rng = np.random.default_rng(seed)
        n_in = self.dim + 2 * self.n_freq + self.n_labels + 1
        sizes = [(n_in, self.width), (self.width, self.width), (self.width, self.dim)]
        self.params = {}
        for k, (fan_in, fan_out) in enumerate(sizes, start=1):
            self.params[f"w{k}"] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
            self.params[f"b{k}"] = np.zeros(fan_out)

    @property
    def layer_sizes(self):
        return [self.params["w1"].shape[0], self.width, self.width, self.dim]

    def _features(self, t, y, batch):
        frac = np.atleast_1d(np.asarray(t, dtype=np.float64)) / self.sched.T
        freqs = math.pi * 2.0 ** np.arange(self.n_freq) / 2.0
        ang = frac[:, None] * freqs[None, :]
        temb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
        if temb.shape[0] == 1:
            temb = np.repeat(temb, batch, axis=0)
        labels = np.atleast_1d(np.asarray(self.n_labels if y is None else y, dtype=np.int64))
        if np.any((labels < 0) | (labels > self.n_labels)):
            raise ConfigError(f"condition label out of range: {y!r}", field="y")
        onehot = np.zeros((batch, self.n_labels + 1))
        onehot[np.arange(batch), np.broadcast_to(labels, (batch,))] = 1.0
        return np.concatenate([temb, onehot], axis=1)

    def _forward(self, x, feats):
        p = self.params
        h0 = np.concatenate([x, feats], axis=1)
        a1 = h0 @ p["w1"] + p["b1"]
        h1 = _silu(a1)
        a2 = h1 @ p["w2"] + p["b2"]
        h2 = _silu(a2)
        out = h2 @ p["w3"] + p["b3"]
        return out, (h0, a1, h1, a2, h2)

    def _backward(self, cache, g_out):
        p = self.params
        h0, a1, h1, a2, h2 = cache
        grads = {"w3": h2.T @ g_out, "b3": g_out.sum(axis=0)}
        g2 = (g_out @ p["w3"].T) * _silu_grad(a2)
        grads["w2"] = h1.T @ g2
        grads["b2"] = g2.sum(axis=0)
        g1 = (g2 @ p["w2"].T) * _silu_grad(a1)
        grads["w1"] = h0.T @ g1
        grads["b1"] = g1.sum(axis=0)
        g_in = (g1 @ p["w1"].T)[:, : self.dim]
        return grads, g_in

    def _coeffs(self, t):
        a = np.asarray(self.sched.alpha_bars)[np.atleast_1d(np.asarray(t, dtype=np.int64))]
        return np.sqrt(a)[:, None], np.sqrt(1.0 - a)[:, None]

    def predict(self, z, y, t):
        flat, shape = self._split_batch(z)
        x0, _ = self._forward(flat, self._features(t, y, flat.shape[0]))
        sa, so = self._coeffs(t)
        return ((flat - sa * x0) / so).reshape(shape)

    def vjp(self, z, y, t, cotangent):
        flat, shape = self._split_batch(z)
        u = np.asarray(cotangent, dtype=np.float64)
        if u.shape != shape:
            raise DimensionError(f"cotangent {u.shape} does not match latent {shape}")
        _, cache = self._forward(flat, self._features(t, y, flat.shape[0]))
        sa, so = self._coeffs(t)
        u = u.reshape(flat.shape) / so
        _, g_in = self._backward(cache, -sa * u)
        return (u + g_in).reshape(shape)

    def save(self, path):
        header = {
            "layer_sizes": self.layer_sizes,
            "shape": list(self.shape),
            "n_labels": self.n_labels,
            "n_freq": self.n_freq,
            "seed": self.seed,
            "schedule": {"kind": self.sched.kind, "T": self.sched.T},
            "train_config": asdict(self.train_config) if self.train_config else None,
            "final_loss": self.final_loss,
            "params": [[name, list(self.params[name].shape)] for name in _PARAM_NAMES],
        }
        blob = json.dumps(header).encode("utf-8")
        with Path(path).open("wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for name in _PARAM_NAMES:
                fh.write(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, sched: NoiseSchedule):
        raw = Path(path).read_bytes()
        if raw[:4] != _MAGIC:
            raise ConfigError(f"{path} is not a denoiser weight file", field="model.weights")
        (n,) = struct.unpack("<I", raw[4:8])
        header = json.loads(raw[8 : 8 + n].decode("utf-8"))
        model = cls(
            header["shape"], header["n_labels"], sched,
            width=header["layer_sizes"][1], n_freq=header["n_freq"], seed=header["seed"],
        )
        offset = 8 + n
        for name, shp in header["params"]:
            count = int(np.prod(shp, dtype=np.int64))
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            model.params[name] = arr.reshape(shp).astype(np.float64)
            offset += 8 * count
        if header.get("train_config"):
            model.train_config = TrainConfig(**header["train_config"])
        model.final_loss = header.get("final_loss")
        return model


def train_denoiser(dataset, sched: NoiseSchedule, epochs=200, lr=1e-2, seed=0, *,
                   width=128, config: TrainConfig | None = None):
    """Fit a :class:`ToyDenoiser` to the epsilon-prediction objective.

    ``dataset`` is a sequence of ``(latent, label)`` pairs.  Each SGD step draws
    a minibatch of data points, timesteps and noises, and drops labels to the
    unconditional slot with probability ``cond_dropout``.
    Returns ``(model, final_loss)``.
    """
    cfg = config or TrainConfig(epochs=epochs, lr=lr, seed=seed)
    data = list(dataset)
    if not data:
        raise ConfigError("dataset is empty", field="dataset")
    if cfg.epochs < 1:
        raise ConfigError(f"must be >= 1, got {cfg.epochs}", field="epochs")
    if not cfg.lr > 0:
        raise ConfigError(f"must be > 0, got {cfg.lr}", field="lr")

    x0 = np.stack([np.asarray(x, dtype=np.float64) for x, _ in data])
    shape = x0.shape[1:]
    labels = np.array([-1 if y is None else int(y) for _, y in data])
    n_labels = int(labels.max()) + 1 if labels.max() >= 0 else 0
    labels = np.where(labels < 0, n_labels, labels)

    model = ToyDenoiser(shape, n_labels, sched, width=width, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    flat = x0.reshape(len(x0), -1)
    abar = np.asarray(sched.alpha_bars)
    loss = math.nan
    for epoch in range(1, cfg.epochs + 1):
        running = 0.0
        # cosine annealing of the step size
        lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / cfg.epochs)) if cfg.lr_decay else cfg.lr
        for _ in range(cfg.steps_per_epoch):
            idx = rng.integers(0, len(flat), size=cfg.batch_size)
            t = rng.integers(1, sched.T + 1, size=cfg.batch_size)
            eps = rng.standard_normal((cfg.batch_size, model.dim))
            a = abar[t][:, None]
            zt = np.sqrt(a) * flat[idx] + np.sqrt(1.0 - a) * eps
            y = labels[idx].copy()
            y[rng.random(cfg.batch_size) < cfg.cond_dropout] = n_labels
            x0_hat, cache = model._forward(zt, model._features(t, y, cfg.batch_size))
            resid = (zt - np.sqrt(a) * x0_hat) / np.sqrt(1.0 - a) - eps
            with np.errstate(over="ignore", invalid="ignore"):
                step_loss = float(np.mean(resid**2))
            if not math.isfinite(step_loss):
                raise TrainingDivergence("non-finite training loss", epoch)
            g_eps = 2.0 * resid / resid.size
            grads, _ = model._backward(cache, -np.sqrt(a / (1.0 - a)) * g_eps)
            norm = math.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
            scale = min(1.0, cfg.grad_clip / norm) if norm > 0 else 1.0
            for name, g in grads.items():
                model.params[name] -= lr * scale * g
            running += step_loss
        loss = running / cfg.steps_per_epoch
    model.train_config = cfg
    model.final_loss = loss
    return model, loss
