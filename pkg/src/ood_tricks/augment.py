"""Training-time augmentation stack and the geometric primitives shared with TTA.

Images are float arrays in [0, 1] with layout ``(..., H, W, C)``; every
function accepts a single image or a batch with leading dimensions.
Geometric resampling uses half-pixel centres and clamps at the edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PolicyError

RANDAUG_OPS = (
    "identity",
    "hflip",
    "rotate",
    "translate_x",
    "translate_y",
    "brightness",
    "contrast",
    "saturation",
    "posterize",
)

MAX_ROTATE_DEG = 30.0
MAX_TRANSLATE_FRAC = 0.15
MAX_ENHANCE = 0.5
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SoftLabelPair:
    fine: np.ndarray
    coarse: np.ndarray


@dataclass
class MixConfig:
    beta_alpha: float = 0.4
    alternate_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if not self.beta_alpha > 0:
            raise ConfigError("beta_alpha must be > 0")
        if not 0.0 <= self.alternate_prob <= 1.0:
            raise ConfigError("alternate_prob must lie in [0, 1]")


@dataclass
class RandAugConfig:
    magnitude: float = 9
    magnitude_std: float = 0.5
    num_ops: int = 2
    op_set: tuple = RANDAUG_OPS

    def __post_init__(self):
        if not 0 <= self.magnitude <= 10:
            raise ConfigError("magnitude must lie in [0, 10]")
        if self.magnitude_std < 0:
            raise ConfigError("magnitude_std must be >= 0")
        if self.num_ops < 1:
            raise ConfigError("num_ops must be >= 1")
        self.op_set = tuple(self.op_set)
        unknown = set(self.op_set) - set(RANDAUG_OPS)
        if unknown or not self.op_set:
            raise ConfigError(f"bad op_set, unknown ops: {sorted(unknown)}")


@dataclass(frozen=True)
class MixProvenance:
    """Which batch mix fired. ``coefficient`` is the sampled lambda or gamma."""

    op: str  # "cutmix", "mixup" or "none"
    coefficient: float
    area: float | None = None
    permutation: tuple = ()
    box: tuple | None = None


@dataclass(frozen=True)
class AugmentedBatch:
    images: np.ndarray
    fine: np.ndarray
    coarse: np.ndarray
    provenance: MixProvenance

    def __len__(self):
        return len(self.images)

    @property
    def labels(self):
        return [SoftLabelPair(f, c) for f, c in zip(self.fine, self.coarse)]


@dataclass
class AugmentPolicy:
    """Everything applied to a training batch, in order: flip, RandAugment,
    label smoothing, then one batch-level mix."""

    hflip_prob: float = 0.5
    randaug: RandAugConfig | None = None
    label_smoothing: float = 0.0
    mix: MixConfig | None = None


# --------------------------------------------------------------------------
# labels


def smooth_vector(label: int, epsilon: float, n: int, dtype=np.float64) -> np.ndarray:
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError(f"epsilon must lie in [0, 1), got {epsilon}")
    if not 0 <= label < n:
        raise ConfigError(f"label {label} out of range for {n} classes")
    if n == 1:
        return np.ones(1, dtype=dtype)
    out = np.full(n, epsilon / (n - 1), dtype=dtype)
    out[label] = 1.0 - epsilon
    return out


def smooth_labels(fine_label, coarse_label, epsilon, n_fine, n_coarse) -> SoftLabelPair:
    """True class gets ``1 - epsilon``, every other class ``epsilon / (N - 1)``.

    Each head is smoothed independently with its own class count.
    """
    return SoftLabelPair(smooth_vector(fine_label, epsilon, n_fine), smooth_vector(coarse_label, epsilon, n_coarse))


def smooth_targets(labels, epsilon: float, n: int, dtype=np.float64) -> np.ndarray:
    """Batched :func:`smooth_vector`: integer labels ``(B,)`` to targets ``(B, n)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError(f"epsilon must lie in [0, 1), got {epsilon}")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ConfigError("label out of range")
    if n == 1:
        return np.ones((len(labels), 1), dtype=dtype)
    out = np.full((len(labels), n), epsilon / (n - 1), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0 - epsilon
    return out


# --------------------------------------------------------------------------
# mixing


def mixup(image_a, labels_a: SoftLabelPair, image_b, labels_b: SoftLabelPair, lam: float):
    """Pixel- and label-wise convex combination ``lam * A + (1 - lam) * B``."""
    image_a, image_b = np.asarray(image_a), np.asarray(image_b)
    if image_a.shape != image_b.shape:
        raise ConfigError(f"shape mismatch {image_a.shape} vs {image_b.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("lambda must lie in [0, 1]")
    mixed = lam * image_a + (1.0 - lam) * image_b
    labels = SoftLabelPair(
        lam * labels_a.fine + (1.0 - lam) * labels_b.fine,
        lam * labels_a.coarse + (1.0 - lam) * labels_b.coarse,
    )
    return mixed.astype(image_a.dtype, copy=False), labels


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def cutmix_box(height: int, width: int, gamma: float, rng=None, center=None):
    """Patch ``(y0, y1, x0, x1)`` with sides ``sqrt(1 - gamma)`` of the image.

    The centre is drawn uniformly over pixel positions unless given; the box is
    clipped to the image.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError("gamma must lie in [0, 1]")
    side = np.sqrt(1.0 - gamma)
    ph, pw = _round_half_up(side * height), _round_half_up(side * width)
    if center is None:
        cy, cx = int(rng.integers(height)), int(rng.integers(width))
    else:
        cy, cx = int(center[0]), int(center[1])
    y0, x0 = cy - ph // 2, cx - pw // 2
    y1, x1 = y0 + ph, x0 + pw
    return max(y0, 0), min(y1, height), max(x0, 0), min(x1, width)


def cutmix(image_a, labels_a: SoftLabelPair, image_b, labels_b: SoftLabelPair, gamma: float, rng=None, center=None):
    """Paste a patch of ``image_b`` onto ``image_a``.

    Returns ``(mixed_image, mixed_labels, area)`` where ``area`` is the realised
    (post-clipping) fraction of pixels taken from B, and the labels are
    ``(1 - area) * A + area * B``.
    """
    image_a, image_b = np.asarray(image_a), np.asarray(image_b)
    if image_a.shape != image_b.shape:
        raise ConfigError(f"shape mismatch {image_a.shape} vs {image_b.shape}")
    h, w = image_a.shape[-3], image_a.shape[-2]
    y0, y1, x0, x1 = cutmix_box(h, w, gamma, rng, center)
    mixed = image_a.copy()
    mixed[..., y0:y1, x0:x1, :] = image_b[..., y0:y1, x0:x1, :]
    area = (y1 - y0) * (x1 - x0) / (h * w)
    labels = SoftLabelPair(
        (1.0 - area) * labels_a.fine + area * labels_b.fine,
        (1.0 - area) * labels_a.coarse + area * labels_b.coarse,
    )
    return mixed, labels, area


def apply_mix_policy(images, fine, coarse, config: MixConfig, rng) -> AugmentedBatch:
    """One coin flip per batch picks CutMix (probability ``alternate_prob``) or
    MixUp; the coefficient comes from ``Beta(beta_alpha, beta_alpha)`` and each
    sample is paired with ``permutation[i]``."""
    images = np.asarray(images)
    fine, coarse = np.asarray(fine), np.asarray(coarse)
    b = len(images)
    if b < 2:
        raise PolicyError("mix policy needs a batch of at least 2 samples")
    if not (len(fine) == len(coarse) == b):
        raise PolicyError("images and labels differ in length")
    if not config.enabled:
        return AugmentedBatch(images, fine, coarse, MixProvenance("none", 1.0, permutation=tuple(range(b))))

    use_cutmix = rng.random() < config.alternate_prob
    coef = float(rng.beta(config.beta_alpha, config.beta_alpha))
    perm = rng.permutation(b)
    if use_cutmix:
        h, w = images.shape[-3], images.shape[-2]
        box = cutmix_box(h, w, coef, rng)
        y0, y1, x0, x1 = box
        mixed = images.copy()
        mixed[:, y0:y1, x0:x1, :] = images[perm][:, y0:y1, x0:x1, :]
        area = (y1 - y0) * (x1 - x0) / (h * w)
        new_fine = (1.0 - area) * fine + area * fine[perm]
        new_coarse = (1.0 - area) * coarse + area * coarse[perm]
        prov = MixProvenance("cutmix", coef, area, tuple(int(p) for p in perm), box)
    else:
        mixed = (coef * images + (1.0 - coef) * images[perm]).astype(images.dtype, copy=False)
        new_fine = coef * fine + (1.0 - coef) * fine[perm]
        new_coarse = coef * coarse + (1.0 - coef) * coarse[perm]
        prov = MixProvenance("mixup", coef, None, tuple(int(p) for p in perm))
    return AugmentedBatch(mixed, new_fine, new_coarse, prov)


# --------------------------------------------------------------------------
# geometry


def _axis_sampling(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(image, target_h: int, target_w: int):
    """Bilinear resize of the two spatial axes; identity when sizes match."""
    image = np.asarray(image)
    if target_h < 1 or target_w < 1:
        raise ConfigError("resize targets must be >= 1")
    h, w = image.shape[-3], image.shape[-2]
    if (h, w) == (target_h, target_w):
        return image.copy()
    dt = image.dtype
    i0, i1, wy = _axis_sampling(h, target_h)
    wy = wy.astype(dt)[:, None, None]
    rows = image[..., i0, :, :] * (1 - wy) + image[..., i1, :, :] * wy
    j0, j1, wx = _axis_sampling(w, target_w)
    wx = wx.astype(dt)[:, None]
    return (rows[..., :, j0, :] * (1 - wx) + rows[..., :, j1, :] * wx).astype(dt, copy=False)


def _sample_at(image, ys, xs):
    """Bilinear lookup at fractional pixel-index coordinates with edge clamping."""
    h, w = image.shape[-3], image.shape[-2]
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = (ys - y0)[..., None], (xs - x0)[..., None]
    top = image[..., y0, x0, :] * (1 - fx) + image[..., y0, x1, :] * fx
    bot = image[..., y1, x0, :] * (1 - fx) + image[..., y1, x1, :] * fx
    return (top * (1 - fy) + bot * fy).astype(image.dtype, copy=False)


def rotate(image, degrees: float):
    image = np.asarray(image)
    h, w = image.shape[-3], image.shape[-2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    t = np.deg2rad(degrees)
    # inverse map: output pixel -> source pixel
    sy = np.cos(t) * (yy - cy) - np.sin(t) * (xx - cx) + cy
    sx = np.sin(t) * (yy - cy) + np.cos(t) * (xx - cx) + cx
    return _sample_at(image, sy, sx)


def translate(image, dy: float, dx: float):
    image = np.asarray(image)
    h, w = image.shape[-3], image.shape[-2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return _sample_at(image, yy - dy, xx - dx)


def hflip(image):
    return np.asarray(image)[..., :, ::-1, :].copy()


def center_crop(image, h: int, w: int):
    image = np.asarray(image)
    ih, iw = image.shape[-3], image.shape[-2]
    if h > ih or w > iw or h < 1 or w < 1:
        raise ConfigError(f"crop {h}x{w} does not fit image {ih}x{iw}")
    top, left = (ih - h) // 2, (iw - w) // 2
    return image[..., top:top + h, left:left + w, :].copy()


def five_crop(image, h: int, w: int):
    """Crops in the order top-left, top-right, bottom-left, bottom-right, centre."""
    image = np.asarray(image)
    ih, iw = image.shape[-3], image.shape[-2]
    if h > ih or w > iw or h < 1 or w < 1:
        raise ConfigError(f"crop {h}x{w} does not fit image {ih}x{iw}")
    corners = [(0, 0), (0, iw - w), (ih - h, 0), (ih - h, iw - w)]
    crops = [image[..., y:y + h, x:x + w, :].copy() for y, x in corners]
    crops.append(center_crop(image, h, w))
    return crops


def _blend(image, ref, factor):
    return image * factor + ref * (1 - factor)


def _gray(image):
    if image.shape[-1] != 3:
        return image
    return (image @ _LUMA.astype(image.dtype))[..., None]


def adjust_brightness(image, factor):
    if factor == 1.0:
        return image
    return image * image.dtype.type(factor)


def adjust_contrast(image, factor):
    if factor == 1.0:
        return image
    mean = _gray(image).mean(axis=(-3, -2, -1), keepdims=True)
    return _blend(image, mean, image.dtype.type(factor))


def adjust_saturation(image, factor):
    if factor == 1.0 or image.shape[-1] != 3:
        return image
    return _blend(image, _gray(image), image.dtype.type(factor))


def color_jitter(image, scope: float, rng):
    """Scale brightness, contrast and saturation by factors from U[1-scope, 1+scope]."""
    image = np.asarray(image)
    if not 0.0 <= scope <= 1.0:
        raise ConfigError("jitter scope must lie in [0, 1]")
    b, c, s = (rng.uniform(1.0 - scope, 1.0 + scope) for _ in range(3))
    out = adjust_saturation(adjust_contrast(adjust_brightness(image, b), c), s)
    return np.clip(out, 0.0, 1.0)


def posterize(image, bits: int):
    levels = 2**int(bits) - 1
    return np.floor(image * levels + 0.5) / levels


# --------------------------------------------------------------------------
# RandAugment


def op_parameter(op: str, magnitude: float, image_size: int = 32, negate: bool = False) -> float:
    """Physical strength of a RandAugment op at ``magnitude`` on the 0-10 scale.

    rotate: degrees; translate: pixels; enhance ops: multiplicative factor;
    posterize: bits kept. ``negate`` flips the sign of signed ops.
    """
    frac = magnitude / 10.0
    sign = -1.0 if negate else 1.0
    if op == "rotate":
        return sign * frac * MAX_ROTATE_DEG
    if op in ("translate_x", "translate_y"):
        return sign * frac * MAX_TRANSLATE_FRAC * image_size
    if op in ("brightness", "contrast", "saturation"):
        return 1.0 + sign * frac * MAX_ENHANCE
    if op == "posterize":
        return float(8 - int(round(frac * 4)))
    return 0.0


def _apply_op(image, op, param):
    if op == "identity":
        return image
    if op == "hflip":
        return hflip(image)
    if op == "rotate":
        return rotate(image, param)
    if op == "translate_x":
        return translate(image, 0.0, param)
    if op == "translate_y":
        return translate(image, param, 0.0)
    if op == "brightness":
        return adjust_brightness(image, param)
    if op == "contrast":
        return adjust_contrast(image, param)
    if op == "saturation":
        return adjust_saturation(image, param)
    if op == "posterize":
        return posterize(image, int(param))
    raise ConfigError(f"unknown op {op!r}")


def rand_augment(image, config: RandAugConfig, rng, return_ops: bool = False):
    """Apply ``num_ops`` ops drawn uniformly with replacement from ``op_set``.

    Each op gets its own magnitude ``clip(magnitude + N(0, magnitude_std), 0, 10)``
    and a random sign for signed ops. With ``return_ops`` the list of
    ``(op, magnitude, parameter)`` actually applied is returned too.
    """
    image = np.asarray(image)
    out = image
    applied = []
    size = image.shape[-3]
    for _ in range(config.num_ops):
        op = config.op_set[int(rng.integers(len(config.op_set)))]
        mag = float(np.clip(config.magnitude + rng.normal(0.0, config.magnitude_std), 0.0, 10.0))
        negate = bool(rng.random() < 0.5)
        param = op_parameter(op, mag, size, negate)
        out = _apply_op(out, op, param)
        applied.append((op, mag, param))
    out = np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)
    if return_ops:
        return out, applied
    return out


# --------------------------------------------------------------------------
# full training-batch pipeline


def augment_batch(images, fine_labels, coarse_labels, policy: AugmentPolicy, n_fine, n_coarse, rng,
                  dtype=np.float64) -> AugmentedBatch:
    """Per-image flip and RandAugment, label smoothing, then the batch mix."""
    images = np.asarray(images)
    out = images.copy()
    for i in range(len(out)):
        if policy.hflip_prob > 0 and rng.random() < policy.hflip_prob:
            out[i] = hflip(out[i])
        if policy.randaug is not None:
            out[i] = rand_augment(out[i], policy.randaug, rng)
    fine = smooth_targets(fine_labels, policy.label_smoothing, n_fine, dtype)
    coarse = smooth_targets(coarse_labels, policy.label_smoothing, n_coarse, dtype)
    if policy.mix is not None and policy.mix.enabled and len(out) >= 2:
        return apply_mix_policy(out, fine, coarse, policy.mix, rng)
    return AugmentedBatch(out, fine, coarse, MixProvenance("none", 1.0, permutation=tuple(range(len(out)))))
