"""Negative ELBO with the KSVD regularizer, Adam, cosine schedule and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .errors import InvalidConfig, LabelOutOfRange, NonFiniteLoss
from .model import Transformer, predict_mc

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    lr_floor: float = 1e-5
    warmup_epochs: int = 1
    eta: float = 10.0
    seed: int = 0
    mc_train_samples: int = 1
    mc_eval_samples: int = 10
    kl_scale_mode: str = "minibatch"
    clip_norm: float = 5.0

    def validate(self, n_train=None):
        if self.eta < 0:
            raise InvalidConfig("eta must be >= 0")
        if self.lr <= 0:
            raise InvalidConfig("lr must be > 0")
        if self.batch_size < 1 or (n_train is not None and self.batch_size > n_train):
            raise InvalidConfig(f"batch_size {self.batch_size} must be in 1..{n_train}")
        if self.kl_scale_mode not in ("minibatch", "none"):
            raise InvalidConfig(f"kl_scale_mode must be 'minibatch' or 'none', got {self.kl_scale_mode!r}")
        if self.mc_train_samples < 1 or self.mc_eval_samples < 1:
            raise InvalidConfig("Monte-Carlo sample counts must be >= 1")
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")


def elbo_loss(records, labels, n_train, batch_size=None, kl_scale_mode="minibatch"):
    """Minimization target ``-(E[log p(y|F)] - KL)`` estimated from ``records``.

    The likelihood is averaged over Monte-Carlo samples and batch items.  In
    ``minibatch`` mode the KL is weighted by ``batch_size / n_train`` so a
    full epoch accounts for exactly one KL.
    """
    labels = np.asarray(labels)
    if batch_size is None:
        batch_size = len(labels)
    n_classes = records[0].logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelOutOfRange(f"labels must lie in 0..{n_classes - 1}")
    onehot = np.eye(n_classes, dtype=records[0].logits.dtype)[labels]
    loglik = 0.0
    for rec in records:
        loglik = loglik + (nx.log_softmax(rec.logits) * onehot).sum(axis=-1).mean()
    loglik = loglik / len(records)
    kl = records[0].kl_sum  # depends on parameters only, identical across samples
    if kl_scale_mode == "minibatch":
        kl = kl * (batch_size / n_train)
    return -loglik + kl


def total_loss(elbo_target, ksvd_sum, eta):
    if eta < 0:
        raise InvalidConfig("eta must be >= 0")
    return elbo_target + eta * ksvd_sum


def cosine_schedule(step, total_steps, warmup_steps, peak, floor=0.0):
    """Linear warm-up to ``peak`` then cosine decay to ``floor``."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = OptimizerState(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
            0,
            beta1,
            beta2,
            eps,
        )

    def step(self, grads, lr):
        st = self.state
        st.step += 1
        c1 = 1.0 - st.beta1**st.step
        c2 = 1.0 - st.beta2**st.step
        for k, p in self.params.items():
            g = grads[k]
            st.m[k] = st.beta1 * st.m[k] + (1 - st.beta1) * g
            st.v[k] = st.beta2 * st.v[k] + (1 - st.beta2) * g * g
            p.data -= (lr * (st.m[k] / c1) / (np.sqrt(st.v[k] / c2) + st.eps)).astype(p.data.dtype)


def clip_by_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def step_loss(model: Transformer, tokens, labels, cfg: TrainConfig, n_train, rng):
    """Total loss of one minibatch plus its components (as floats)."""
    mode = "sample" if model.has_kep else "mean"
    records = [model.forward(tokens, rng, mode) for _ in range(cfg.mc_train_samples)]
    elbo = elbo_loss(records, labels, n_train, len(labels), cfg.kl_scale_mode)
    loss = total_loss(elbo, records[0].ksvd_sum, cfg.eta)
    return loss, records[0]


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_acc: float
    kl_sum: float
    ksvd_sum: float
    lr: float


@dataclass
class TrainResult:
    model: Transformer
    history: list = field(default_factory=list)
    best_epoch: int = 0
    rng_state: dict = None

    def rows(self):
        return [asdict(h) for h in self.history]


def evaluate_accuracy(model, tokens, labels, T, seed):
    probs, _ = predict_mc(model, tokens, T, seed)
    return float((probs.argmax(axis=1) == np.asarray(labels)).mean())


def train(model: Transformer, train_set, val_set, cfg: TrainConfig) -> TrainResult:
    """Minibatch Adam on ``-ELBO + eta * KSVD`` keeping the best validation model.

    ``train_set``/``val_set`` expose ``sequences`` and ``labels``.  All
    randomness (shuffling, reparameterization noise, validation sampling)
    derives from ``cfg.seed``, so equal inputs give bit-identical results.
    """
    X, y = np.asarray(train_set.sequences), np.asarray(train_set.labels)
    n = len(y)
    cfg.validate(n)
    rng = nx.make_rng(cfg.seed)
    opt = Adam(model.params)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    names = list(model.params)
    tensors = [model.params[k] for k in names]
    best = (-1.0, None, 0)
    result = TrainResult(model)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum, lr = 0.0, 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            with nx.GradTape() as tape:
                loss, rec = step_loss(model, X[idx], y[idx], cfg, n, rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLoss(step, {k: float(np.linalg.norm(p.data)) for k, p in model.params.items()})
            grads = dict(zip(names, tape.gradient(loss, tensors)))
            grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
            lr = cosine_schedule(step + 1, total, warmup, cfg.lr, cfg.lr_floor)
            opt.step(grads, lr)
            loss_sum += value * len(idx)
            step += 1
        # parameter-only terms, reported at the end of the epoch
        rec = model.forward(X[: min(n, cfg.batch_size)])
        val_acc = evaluate_accuracy(model, val_set.sequences, val_set.labels, cfg.mc_eval_samples, cfg.seed + epoch)
        entry = EpochLog(epoch, loss_sum / n, val_acc, float(rec.kl_sum.data), float(rec.ksvd_sum.data), lr)
        result.history.append(entry)
        log.info("epoch %d loss %.4f val_acc %.4f kl %.4f ksvd %.4f", epoch, entry.train_loss, val_acc, entry.kl_sum, entry.ksvd_sum)
        if val_acc > best[0]:
            best = (val_acc, {k: p.data.copy() for k, p in model.params.items()}, epoch)
    for k, arr in best[1].items():
        model.params[k].data = arr
    result.best_epoch = best[2]
    result.rng_state = nx.rng_state(rng)
    return result
