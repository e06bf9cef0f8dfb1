"""Two-head convolutional classifier with hand-written backpropagation.

Architecture: three 3x3 stride-2 convolutions (padding 1) each followed by
ReLU, global average pooling, then two linear heads (coarse and fine) on the
pooled features. Global pooling makes the heads independent of the input
resolution, so one set of weights serves every scale of a multi-scale cycle.

Parameters live in a plain dict keyed by :data:`PARAM_ORDER`; convolution
kernels have shape ``(k, k, c_in, c_out)`` and head weights ``(features, classes)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DatasetFormatError, FormatVersionError, NumericError

CHECKPOINT_VERSION = 1
KERNEL = 3
STRIDE = 2
PAD = 1


@dataclass(frozen=True)
class ArchConfig:
    n_fine: int
    n_coarse: int
    in_channels: int = 3
    channels: tuple = (8, 16, 32)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.n_fine < 1 or self.n_coarse < 1 or self.in_channels < 1 or not self.channels:
            raise ConfigError("architecture sizes must be positive")

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def param_order(self) -> list:
        names = []
        for i in range(len(self.channels)):
            names += [f"conv{i + 1}_w", f"conv{i + 1}_b"]
        return names + ["coarse_w", "coarse_b", "fine_w", "fine_b"]

    def param_shapes(self) -> dict:
        shapes = {}
        cin = self.in_channels
        for i, cout in enumerate(self.channels):
            shapes[f"conv{i + 1}_w"] = (KERNEL, KERNEL, cin, cout)
            shapes[f"conv{i + 1}_b"] = (cout,)
            cin = cout
        shapes["coarse_w"] = (self.feature_dim, self.n_coarse)
        shapes["coarse_b"] = (self.n_coarse,)
        shapes["fine_w"] = (self.feature_dim, self.n_fine)
        shapes["fine_b"] = (self.n_fine,)
        return shapes


@dataclass
class ModelParams:
    arch: ArchConfig
    arrays: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def names(self):
        return self.arch.param_order()

    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.arch, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in self.names()])

    def unflatten(self, flat) -> "ModelParams":
        out, i = {}, 0
        for name in self.names():
            shape = self.arrays[name].shape
            n = int(np.prod(shape))
            out[name] = np.asarray(flat[i:i + n], dtype=self.dtype).reshape(shape)
            i += n
        return ModelParams(self.arch, out)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())


def init_params(arch: ArchConfig, rng, dtype=np.float32) -> ModelParams:
    """He-normal convolution kernels, small normal head weights, zero biases."""
    arrays = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape, dtype=dtype)
        elif name.startswith("conv"):
            fan_in = shape[0] * shape[1] * shape[2]
            arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
        else:
            arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape).astype(dtype)
    return ModelParams(arch, arrays)


def zeros_like(params: ModelParams) -> dict:
    return {k: np.zeros_like(v) for k, v in params.arrays.items()}


# --------------------------------------------------------------------------
# convolution via im2col


def _out_size(n):
    return (n + 2 * PAD - KERNEL) // STRIDE + 1


def _im2col(x):
    b, h, w, c = x.shape
    ho, wo = _out_size(h), _out_size(w)
    xp = np.pad(x, ((0, 0), (PAD, PAD), (PAD, PAD), (0, 0)))
    cols = np.empty((b, ho, wo, KERNEL, KERNEL, c), dtype=x.dtype)
    for di in range(KERNEL):
        for dj in range(KERNEL):
            cols[:, :, :, di, dj, :] = xp[:, di:di + STRIDE * (ho - 1) + 1:STRIDE,
                                          dj:dj + STRIDE * (wo - 1) + 1:STRIDE, :]
    return cols.reshape(b, ho, wo, KERNEL * KERNEL * c)


def _col2im(dcols, x_shape):
    b, h, w, c = x_shape
    ho, wo = dcols.shape[1], dcols.shape[2]
    dcols = dcols.reshape(b, ho, wo, KERNEL, KERNEL, c)
    dxp = np.zeros((b, h + 2 * PAD, w + 2 * PAD, c), dtype=dcols.dtype)
    for di in range(KERNEL):
        for dj in range(KERNEL):
            dxp[:, di:di + STRIDE * (ho - 1) + 1:STRIDE, dj:dj + STRIDE * (wo - 1) + 1:STRIDE, :] += \
                dcols[:, :, :, di, dj, :]
    return dxp[:, PAD:PAD + h, PAD:PAD + w, :]


def _check_input(params, images):
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise ConfigError(f"expected (B, H, W, C) images, got shape {images.shape}")
    if images.shape[-1] != params.arch.in_channels:
        raise ConfigError(f"expected {params.arch.in_channels} channels, got {images.shape[-1]}")
    if images.shape[1] < 1 or images.shape[2] < 1:
        raise ConfigError("empty image")
    return images.astype(params.dtype, copy=False)


def forward(params: ModelParams, images, return_cache: bool = False):
    """Return ``(coarse_logits, fine_logits)`` for a batch ``(B, H, W, C)``."""
    x = _check_input(params, images)
    # overflow surfaces as non-finite logits, which the loss reports as NumericError
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward(params, x, return_cache)


def _forward(params, x, return_cache):
    cache = {"shapes": [], "cols": [], "pre": []}
    for i in range(len(params.arch.channels)):
        w = params[f"conv{i + 1}_w"]
        cache["shapes"].append(x.shape)
        cols = _im2col(x)
        z = cols @ w.reshape(-1, w.shape[-1]) + params[f"conv{i + 1}_b"]
        cache["cols"].append(cols)
        cache["pre"].append(z)
        x = np.maximum(z, 0)
    cache["last_shape"] = x.shape
    feat = x.mean(axis=(1, 2))
    cache["feat"] = feat
    coarse = feat @ params["coarse_w"] + params["coarse_b"]
    fine = feat @ params["fine_w"] + params["fine_b"]
    if return_cache:
        return coarse, fine, cache
    return coarse, fine


# --------------------------------------------------------------------------
# loss


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def soft_cross_entropy(logits, targets) -> np.ndarray:
    """Per-sample cross-entropy of ``softmax(logits)`` against soft targets."""
    return -(targets * _log_softmax(logits)).sum(axis=-1)


def multi_objective_loss(coarse_logits, fine_logits, fine_targets, coarse_targets, alpha: float) -> float:
    """``mean(CE_fine) + alpha * mean(CE_coarse)`` with soft targets."""
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    if not (np.all(np.isfinite(coarse_logits)) and np.all(np.isfinite(fine_logits))):
        raise NumericError("non-finite logits")
    fine_ce = soft_cross_entropy(fine_logits, fine_targets).mean()
    if alpha == 0:
        return float(fine_ce)
    return float(fine_ce + alpha * soft_cross_entropy(coarse_logits, coarse_targets).mean())


def _ce_grad(logits, targets, scale):
    p = np.exp(_log_softmax(logits))
    return (p * targets.sum(axis=-1, keepdims=True) - targets) * scale


def loss_and_grad(params: ModelParams, images, fine_targets, coarse_targets, alpha: float):
    """Loss of :func:`multi_objective_loss` and its gradient for every parameter."""
    coarse, fine, cache = forward(params, images, return_cache=True)
    fine_targets = np.asarray(fine_targets, dtype=params.dtype)
    coarse_targets = np.asarray(coarse_targets, dtype=params.dtype)
    if fine_targets.shape != fine.shape or coarse_targets.shape != coarse.shape:
        raise ConfigError("target shapes do not match logits")
    loss = multi_objective_loss(coarse, fine, fine_targets, coarse_targets, alpha)
    b = fine.shape[0]
    grads = {}
    d_fine = _ce_grad(fine, fine_targets, 1.0 / b)
    d_coarse = _ce_grad(coarse, coarse_targets, alpha / b)
    feat = cache["feat"]
    grads["fine_w"] = feat.T @ d_fine
    grads["fine_b"] = d_fine.sum(axis=0)
    grads["coarse_w"] = feat.T @ d_coarse
    grads["coarse_b"] = d_coarse.sum(axis=0)
    d_feat = d_fine @ params["fine_w"].T + d_coarse @ params["coarse_w"].T

    _, ho, wo, cl = cache["last_shape"]
    d_act = np.broadcast_to(d_feat[:, None, None, :] / (ho * wo), cache["last_shape"])
    for i in reversed(range(len(params.arch.channels))):
        z = cache["pre"][i]
        dz = d_act * (z > 0)
        cols = cache["cols"][i]
        w = params[f"conv{i + 1}_w"]
        k = cols.shape[-1]
        grads[f"conv{i + 1}_w"] = (cols.reshape(-1, k).T @ dz.reshape(-1, dz.shape[-1])).reshape(w.shape)
        grads[f"conv{i + 1}_b"] = dz.sum(axis=(0, 1, 2))
        if i > 0:
            d_cols = dz @ w.reshape(-1, w.shape[-1]).T
            d_act = _col2im(d_cols, cache["shapes"][i])
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return loss, grads


def backward(params: ModelParams, images, fine_targets, coarse_targets, alpha: float) -> dict:
    return loss_and_grad(params, images, fine_targets, coarse_targets, alpha)[1]


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    """Write ``model.json`` and ``weights.bin`` (little-endian float32, arrays
    concatenated in ``param_order``)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arch = params.arch
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "n_fine": arch.n_fine,
        "n_coarse": arch.n_coarse,
        "in_channels": arch.in_channels,
        "channels": list(arch.channels),
        "kernel": KERNEL,
        "stride": STRIDE,
        "padding": PAD,
        "activation": "relu",
        "dtype": "f32le",
        "param_order": [{"name": n, "shape": list(s)} for n, s in arch.param_shapes().items()],
    }
    with open(path / "model.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
    params.flatten().astype("<f4").tofile(path / "weights.bin")


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    try:
        with open(path / "model.json", encoding="utf-8") as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"model.json is not valid JSON: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise FormatVersionError(f"unsupported checkpoint version {meta.get('format_version')!r}")
    try:
        arch = ArchConfig(int(meta["n_fine"]), int(meta["n_coarse"]), int(meta["in_channels"]),
                          tuple(meta["channels"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"malformed model.json: {exc}") from exc
    flat = np.fromfile(path / "weights.bin", dtype="<f4").astype(np.float32)
    template = ModelParams(arch, {n: np.zeros(s, np.float32) for n, s in arch.param_shapes().items()})
    if flat.size != template.size():
        raise DatasetFormatError(f"weights.bin holds {flat.size} values, expected {template.size()}")
    return template.unflatten(flat)


def arch_to_dict(arch: ArchConfig) -> dict:
    d = asdict(arch)
    d["channels"] = list(arch.channels)
    return d
