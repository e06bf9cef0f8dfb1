"""Gradient accumulation and the epoch loop."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..augment import AugmentPolicy, augment_batch, resize_bilinear
from ..errors import ConfigError, NumericError
from ..rng import make_rng
from .model import ArchConfig, ModelParams, init_params, loss_and_grad
from .optim import ScaleCycle, adamw_step, cosine_lr, cyclic_scale, init_optimizer


@dataclass
class TrainConfig:
    epochs: int = 40
    lr_max: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 1e-3
    batch_size: int = 8
    accumulation_steps: int = 1
    scale_cycle: ScaleCycle = field(default_factory=lambda: ScaleCycle([32], 5))
    loss_alpha: float = 0.5
    seed: int = 0
    channels: tuple = (8, 16, 32)
    dtype: str = "float32"
    lr_per: str = "epoch"  # or "step"

    def __post_init__(self):
        if isinstance(self.scale_cycle, dict):
            self.scale_cycle = ScaleCycle(**self.scale_cycle)
        self.channels = tuple(self.channels)
        if self.epochs < 1 or self.batch_size < 1 or self.accumulation_steps < 1:
            raise ConfigError("epochs, batch_size and accumulation_steps must be >= 1")
        if not self.lr_max > self.lr_min >= 0:
            raise ConfigError("need lr_max > lr_min >= 0")
        if self.weight_decay < 0 or self.loss_alpha < 0:
            raise ConfigError("weight_decay and loss_alpha must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.lr_per not in ("epoch", "step"):
            raise ConfigError("lr_per must be 'epoch' or 'step'")


@dataclass
class TrainLog:
    batches: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.epochs)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


def _accumulate(micro_batches, params, alpha):
    if not micro_batches:
        raise ConfigError("need at least one micro-batch")
    total = 0
    grads = None
    loss = 0.0
    losses = []
    for images, fine_t, coarse_t in micro_batches:
        n = len(images)
        l, g = loss_and_grad(params, images, fine_t, coarse_t, alpha)
        losses.append(l)
        loss += n * l
        if grads is None:
            grads = {k: n * v for k, v in g.items()}
        else:
            for k in grads:
                grads[k] += n * g[k]
        total += n
    return loss / total, {k: v / total for k, v in grads.items()}, losses


def accumulate_gradients(micro_batches, params: ModelParams, alpha: float) -> dict:
    """Size-weighted mean of per-micro-batch gradients.

    ``micro_batches`` is a list of ``(images, fine_targets, coarse_targets)``.
    Because the loss is a batch mean, the result equals the gradient of the
    concatenated batch.
    """
    return _accumulate(micro_batches, params, alpha)[1]


def train(dataset, config: TrainConfig, policy: AugmentPolicy | None = None, init: ModelParams | None = None):
    """Train a fresh two-head model on ``dataset``.

    Each epoch picks its input size from the scale cycle and its learning rate
    from the cosine schedule, shuffles, and for every micro-batch resizes,
    augments, and back-propagates; the optimizer steps once per
    ``accumulation_steps`` micro-batches. Returns ``(params, TrainLog)``.
    """
    if len(dataset) == 0:
        raise ConfigError("training split is empty")
    policy = policy or AugmentPolicy()
    dtype = np.dtype(config.dtype)
    arch = ArchConfig(dataset.n_fine, dataset.n_coarse, dataset.channels, config.channels)
    params = init if init is not None else init_params(arch, make_rng(config.seed, 0), dtype)
    state = init_optimizer(params, config.weight_decay)
    log = TrainLog()
    n = len(dataset)
    bs = config.batch_size
    n_batches = -(-n // bs)
    total_steps = config.epochs * n_batches

    for epoch in range(config.epochs):
        scale = cyclic_scale(epoch, config.scale_cycle)
        lr_epoch = cosine_lr(epoch, config.epochs, config.lr_max, config.lr_min)
        order = make_rng(config.seed, 1, epoch).permutation(n)
        pending, meta = [], []
        epoch_loss = 0.0
        for b in range(n_batches):
            idx = order[b * bs:(b + 1) * bs]
            images = dataset.images[idx]
            if scale != dataset.resolution:
                images = resize_bilinear(images, scale, scale)
            aug = augment_batch(images.astype(dtype), dataset.fine_labels[idx], dataset.coarse_labels[idx],
                                policy, dataset.n_fine, dataset.n_coarse, make_rng(config.seed, 2, epoch, b), dtype)
            pending.append((aug.images, aug.fine, aug.coarse))
            meta.append((b, aug.provenance.op))
            if config.lr_per == "step":
                lr = cosine_lr(epoch * n_batches + b, total_steps, config.lr_max, config.lr_min)
            else:
                lr = lr_epoch
            if len(pending) == config.accumulation_steps or b == n_batches - 1:
                try:
                    _, grads, losses = _accumulate(pending, params, config.loss_alpha)
                except NumericError as exc:
                    raise NumericError(f"{exc} at epoch {epoch}, batch {b}", epoch, b) from exc
                state, params = adamw_step(state, params, grads, lr)
                if not params.is_finite():
                    raise NumericError(f"parameters diverged at epoch {epoch}, batch {b}", epoch, b)
                for (bi, op), loss in zip(meta, losses):
                    log.batches.append({"epoch": epoch, "batch": bi, "loss": loss, "lr": lr,
                                        "scale": scale, "mix": op, "step": state.step_count})
                    epoch_loss += loss
                pending, meta = [], []
        log.epochs.append({"epoch": epoch, "loss": epoch_loss / n_batches, "lr": lr_epoch, "scale": scale})
    return params, log
