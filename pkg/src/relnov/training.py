"""Pair losses, LARS / momentum SGD, warmup schedule and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import iterate_batches
from .numerics import NumericError, Tensor

log = logging.getLogger(__name__)

LOSSES = ("mse", "binary_ce")
OPTIMIZERS = ("lars", "sgd")
HEAD_FOR_LOSS = {"mse": "regression-sigmoid", "binary_ce": "classification-2way"}


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 128
    base_lr: float = 0.02
    warmup_iters: int = 100
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 5e-5
    trust_coefficient: float = 0.001
    loss: str = "mse"
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("iterations", "batch_size", "warmup_iters", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.base_lr < 0 or not math.isfinite(self.base_lr):
            raise ValueError("base_lr must be finite and >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


# Full-scale schedule, kept for reference runs (see configs/full_scale.cfg).
FULL_SCALE_TRAIN = dict(iterations=13000, batch_size=4096, base_lr=0.008, warmup_iters=500,
                   optimizer="lars", momentum=0.9, weight_decay=5e-5)


# ---------------------------------------------------------------- losses


def _check_lengths(a, b):
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: predictions {a.shape} vs labels {b.shape}")


def mse_pair_loss(sigma, labels):
    """Batch mean of (sigma - l)^2."""
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(np.asarray(sigma, dtype=np.float64))
    labels = np.asarray(labels, dtype=sigma.dtype)
    _check_lengths(sigma, labels)
    return nx.mean(nx.square(sigma - labels))


def binary_ce_pair_loss(sigma, labels, eps=1e-12):
    """Batch mean of -[l ln sigma + (1-l) ln(1-sigma)] on probabilities."""
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(np.asarray(sigma, dtype=np.float64))
    labels = np.asarray(labels, dtype=sigma.dtype)
    _check_lengths(sigma, labels)
    s = nx.Tensor(np.clip(sigma.data, eps, 1 - eps)) if not sigma.requires_grad else sigma
    return nx.mean(-(nx.log(s) * labels + nx.log(1.0 - s) * (1.0 - labels)))


def binary_ce_from_logits(logits, labels):
    """Same loss written on log-odds: l*softplus(-x) + (1-l)*softplus(x)."""
    labels = np.asarray(labels, dtype=logits.dtype)
    _check_lengths(logits, labels)
    return nx.mean(nx.softplus(-logits) * labels + nx.softplus(logits) * (1.0 - labels))


def pair_loss(logits, labels, kind):
    if kind == "mse":
        return mse_pair_loss(nx.sigmoid(logits), labels)
    if kind == "binary_ce":
        return binary_ce_from_logits(logits, labels)
    raise ValueError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------- optimisers


@dataclass
class OptimizerState:
    momentum: dict
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls({n: np.zeros_like(p.data) for n, p in params.items()})


def _grad(name, p):
    g = np.zeros_like(p.data) if p.grad is None else p.grad
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient for parameter {name}")
    return g


def lars_step(params, state, cfg, lr):
    """One LARS update, per tensor:

        g' = g + wd * w
        local_lr = trust * |w| / (|g'| + tiny)   (1 when |w| == 0)
        m = momentum * m + local_lr * lr * g'
        w = w - m
    """
    tiny = 1e-12
    for name, p in params.items():
        g = _grad(name, p) + cfg.weight_decay * p.data
        w_norm = float(np.linalg.norm(p.data))
        if w_norm > 0:
            local_lr = cfg.trust_coefficient * w_norm / (float(np.linalg.norm(g)) + tiny)
        else:
            local_lr = 1.0
        m = state.momentum[name]
        m *= cfg.momentum
        m += (local_lr * lr) * g
        p.data -= m.astype(p.dtype, copy=False)
    state.step += 1


def sgd_step(params, state, cfg, lr):
    """Momentum SGD: g' = g + wd * w; m = momentum * m + g'; w = w - lr * m."""
    for name, p in params.items():
        g = _grad(name, p) + cfg.weight_decay * p.data
        m = state.momentum[name]
        m *= cfg.momentum
        m += g
        p.data -= (lr * m).astype(p.dtype, copy=False)
    state.step += 1


def lr_at(iteration, cfg):
    """Linear warmup over ``warmup_iters`` steps, then constant."""
    if iteration < cfg.warmup_iters:
        return cfg.base_lr * (iteration + 1) / cfg.warmup_iters
    return cfg.base_lr


# ---------------------------------------------------------------- loop


def train(model, support, cfg, callback=None):
    """Train ``model`` in place on pairs drawn from ``support``.

    Returns ``(model, trace)`` where trace is a list of (iteration, loss, lr)
    for every iteration. ``callback(it, loss, lr)`` fires every ``log_every``.
    """
    cfg.validate()
    expected_head = HEAD_FOR_LOSS[cfg.loss]
    if model.config.head_mode != expected_head:
        raise ValueError(f"loss {cfg.loss!r} needs head_mode {expected_head!r}, "
                         f"model has {model.config.head_mode!r}")
    if len(np.unique(support.labels)) < 2:
        from .data import DataError
        raise DataError("support set needs at least two classes")

    rng = np.random.default_rng(cfg.seed)
    batches = iterate_batches(support, cfg.batch_size, rng)
    state = OptimizerState.for_params(model.params)
    step = lars_step if cfg.optimizer == "lars" else sgd_step
    trace = []
    for it in range(cfg.iterations):
        batch = next(batches)
        lr = lr_at(it, cfg)
        model.zero_grad()
        # overflow shows up as a non-finite loss below, reported with its iteration
        with nx.Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
            logits = model.pair_logits(batch.anchors, batch.partners)
            loss = pair_loss(logits, batch.labels, cfg.loss)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at iteration {it}")
        nx.backward(loss, tape)
        step(model.params, state, cfg, lr)
        trace.append((it, value, lr))
        if (it + 1) % cfg.log_every == 0 or it == cfg.iterations - 1:
            log.info("iter %d loss %.5f lr %.5g", it, value, lr)
            if callback is not None:
                callback(it, value, lr)
    return model, trace


def write_trace(trace, path):
    with open(path, "w") as fh:
        fh.write("iter,loss,lr\n")
        for it, loss, lr in trace:
            fh.write(f"{it},{loss!r},{lr!r}\n")


def windowed_means(trace, window=100):
    losses = np.array([t[1] for t in trace])
    n = len(losses) // window
    return losses[: n * window].reshape(n, window).mean(axis=1)
