"""Inference: TTA views, per-scale logit fusion and weighted Top-5 voting.

For every model the fine-head logits of all TTA views at one input scale are
averaged into one vector per scale. The per-scale vectors are fused either
uniformly ("aw") or with softmax weights over each scale's maximum logit
("sw"). Across models, each fused vector contributes its five best classes
with weights 1, 1/2, 1/3, 1/4, 1/5 and the class with the largest total wins.
All ties resolve to the lower class index.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .augment import center_crop, color_jitter, five_crop, hflip, resize_bilinear
from .errors import ConfigError, DatasetFormatError
from .nnet.model import forward
from .rng import make_rng

VOTE_WEIGHTS = (1.0, 1 / 2, 1 / 3, 1 / 4, 1 / 5)
# tallies are kept in integer units of 1/60 so that exact ties stay exact
_VOTE_UNITS = (60, 30, 20, 15, 12)
_VOTE_DENOM = 60
FUSIONS = ("aw", "sw")


@dataclass
class TtaPolicy:
    resize_extension: int = 8
    center_crop_extension: int = 8
    five_crop_extension: int = 4
    use_center_crop: bool = True
    use_five_crop: bool = False
    use_hflip: bool = False
    jitter_scope: float = 0.0
    deterministic: bool = True
    jitter_seed: int = 0

    def __post_init__(self):
        if min(self.resize_extension, self.center_crop_extension, self.five_crop_extension) < 0:
            raise ConfigError("TTA extensions must be >= 0")
        if not 0.0 <= self.jitter_scope <= 1.0:
            raise ConfigError("jitter_scope must lie in [0, 1]")

    @classmethod
    def minimal(cls) -> "TtaPolicy":
        """A single view: the image resized to the inference scale."""
        return cls(resize_extension=0, center_crop_extension=0, five_crop_extension=0)


@dataclass(frozen=True)
class FusedLogits:
    values: np.ndarray
    method: str
    weights: np.ndarray


@dataclass(frozen=True)
class VoteTally:
    scores: dict
    winner: int


@dataclass(frozen=True)
class Prediction:
    label: int
    fused: list
    tally: VoteTally


@dataclass
class MetricsReport:
    top1: float
    n_samples: int
    per_class: dict
    per_domain: dict
    members: list = field(default_factory=list)
    fusion: str = "aw"
    scales: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d) -> "MetricsReport":
        return cls(**d)


# --------------------------------------------------------------------------
# TTA


def tta_views(image, base_size: int, policy: TtaPolicy, rng=None) -> list:
    """Views of ``image`` (or of each image in a batch) at ``base_size``.

    The image is resized to ``base_size + resize_extension``; the centre crop
    and/or the five crops are cut at their extended sizes and resized back to
    ``base_size``. Flipped copies of every view follow (all of them in
    deterministic mode, otherwise each view is flipped with probability 0.5),
    then one colour-jittered copy of every view when ``jitter_scope > 0``.
    """
    base = int(base_size)
    if base < 1:
        raise ConfigError("base_size must be >= 1")
    if not policy.deterministic and rng is None:
        raise ConfigError("stochastic TTA needs an rng")
    big = base + policy.resize_extension
    resized = resize_bilinear(image, big, big)
    views = []
    if policy.use_center_crop:
        views.append(resize_bilinear(center_crop(resized, base + policy.center_crop_extension,
                                                 base + policy.center_crop_extension), base, base))
    if policy.use_five_crop:
        size = base + policy.five_crop_extension
        views += [resize_bilinear(c, base, base) for c in five_crop(resized, size, size)]
    if not views:
        views.append(resize_bilinear(resized, base, base))
    if policy.use_hflip:
        if policy.deterministic:
            views += [hflip(v) for v in views]
        else:
            views = [hflip(v) if rng.random() < 0.5 else v for v in views]
    if policy.jitter_scope > 0:
        jrng = make_rng(policy.jitter_seed, 31) if policy.deterministic else rng
        views += [color_jitter(v, policy.jitter_scope, jrng) for v in views]
    return views


def aggregate_views(params, views, scale_index=None) -> np.ndarray:
    """Mean fine-head logits over ``views`` (one logit vector per image).

    ``scale_index`` is accepted for bookkeeping symmetry with the per-scale
    fusion and does not change the result.
    """
    if len(views) == 0:
        raise ConfigError("no views to aggregate")
    single = np.asarray(views[0]).ndim == 3
    stacked = np.stack([np.asarray(v) if not single else np.asarray(v)[None] for v in views])
    v, b = stacked.shape[:2]
    _, fine = forward(params, stacked.reshape((v * b,) + stacked.shape[2:]))
    fine = fine.astype(np.float64).reshape(v, b, -1)
    out = np.mean(fine, axis=0)
    return out[0] if single else out


def scale_logits(params, images, scales, policy: TtaPolicy, rng=None) -> np.ndarray:
    """Per-scale TTA-aggregated fine logits, shape ``(len(scales), B, N)``."""
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    out = np.stack([aggregate_views(params, tta_views(images, s, policy, rng), i) for i, s in enumerate(scales)])
    return out[:, 0] if single else out


# --------------------------------------------------------------------------
# fusion


def _as_scale_array(scale_logits):
    arr = [np.asarray(l, dtype=np.float64) for l in scale_logits]
    if not arr:
        raise ConfigError("need at least one scale")
    if any(a.shape != arr[0].shape for a in arr):
        raise ConfigError("per-scale logits differ in length")
    return np.stack(arr)


def fuse_average(scale_logits) -> FusedLogits:
    """Uniform weights ``1/k`` over the ``k`` per-scale logit vectors."""
    arr = _as_scale_array(scale_logits)
    k = len(arr)
    weights = np.full(arr.shape[:-1], 1.0 / k)
    return FusedLogits(arr.mean(axis=0), "aw", weights)


def fuse_softmax(scale_logits) -> FusedLogits:
    """Weights ``softmax(max(L_1), ..., max(L_k))``, maxima taken over classes."""
    arr = _as_scale_array(scale_logits)
    peaks = arr.max(axis=-1)
    e = np.exp(peaks - peaks.max(axis=0, keepdims=True))
    weights = e / e.sum(axis=0, keepdims=True)
    return FusedLogits((weights[..., None] * arr).sum(axis=0), "sw", weights)


def fuse(scale_logits, method: str) -> FusedLogits:
    if method == "aw":
        return fuse_average(scale_logits)
    if method == "sw":
        return fuse_softmax(scale_logits)
    raise ConfigError(f"unknown fusion {method!r}, expected one of {FUSIONS}")


# --------------------------------------------------------------------------
# voting


def top5(logits, k: int = 5) -> list:
    """Indices of the ``min(k, N)`` largest logits, descending, ties to lower index."""
    logits = np.asarray(logits)
    order = np.argsort(-logits, kind="stable")
    return [int(i) for i in order[:min(k, logits.shape[-1])]]


def weighted_top5_vote(per_model_top5) -> VoteTally:
    """Rank ``r`` (1-based) of each model's list adds ``1/r`` to that class."""
    if len(per_model_top5) == 0:
        raise ConfigError("no models to vote")
    units = {}
    for ranked in per_model_top5:
        for r, cls in enumerate(ranked):
            units[int(cls)] = units.get(int(cls), 0) + _VOTE_UNITS[r]
    best = max(units.values())
    winner = min(c for c, u in units.items() if u == best)
    return VoteTally({c: u / _VOTE_DENOM for c, u in units.items()}, winner)


def _vote_batch(fused_values):
    """Vectorised vote over ``(M, B, N)`` fused logits; returns winners ``(B,)``."""
    m, b, n = fused_values.shape
    k = min(5, n)
    order = np.argsort(-fused_values, axis=-1, kind="stable")[..., :k]
    units = np.zeros((b, n), dtype=np.int64)
    rows = np.arange(b)
    for mi in range(m):
        for r in range(k):
            units[rows, order[mi, :, r]] += _VOTE_UNITS[r]
    # argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(units, axis=1)


# --------------------------------------------------------------------------
# prediction and evaluation


def predict(models, image, scales, policy: TtaPolicy, fusion: str = "aw", rng=None) -> Prediction:
    if not models:
        raise ConfigError("need at least one model")
    if not scales:
        raise ConfigError("need at least one scale")
    fused = [fuse(scale_logits(p, image, scales, policy, rng), fusion) for p in models]
    tally = weighted_top5_vote([top5(f.values) for f in fused])
    return Prediction(tally.winner, fused, tally)


def collect_logits(models, images, scales, policy: TtaPolicy, rng=None, batch_size: int = 256) -> np.ndarray:
    """Logits of every model, shape ``(M, len(scales), B, N)``."""
    out = []
    for p in models:
        chunks = [scale_logits(p, images[i:i + batch_size], scales, policy, rng)
                  for i in range(0, len(images), batch_size)]
        out.append(np.concatenate(chunks, axis=1))
    return np.stack(out)


def report_from_logits(logits, fine_labels, domain_ids, fusion: str = "aw", scales=()) -> MetricsReport:
    """Ensemble metrics from ``(M, k, B, N)`` per-model per-scale logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 4:
        raise ConfigError("logits must have shape (models, scales, samples, classes)")
    labels = np.asarray(fine_labels)
    domains = np.asarray(domain_ids)
    if len(labels) == 0:
        raise ConfigError("empty test split")
    fused = np.stack([fuse(list(l), fusion).values for l in logits])
    winners = _vote_batch(fused)
    members = [float(np.mean(np.argmax(f, axis=1) == labels)) for f in fused]
    correct = winners == labels
    per_class = {str(int(c)): float(correct[labels == c].mean()) for c in np.unique(labels)}
    per_domain = {str(int(d)): float(correct[domains == d].mean()) for d in np.unique(domains)}
    return MetricsReport(float(correct.mean()), int(len(labels)), per_class, per_domain, members, fusion,
                         [int(s) for s in scales])


def evaluate(models, dataset, scales, policy: TtaPolicy, fusion: str = "aw", rng=None) -> MetricsReport:
    """Top-1 of the voted ensemble overall, per fine class and per domain.

    ``members`` holds each model's own Top-1 after scale fusion.
    """
    if len(dataset) == 0:
        raise ConfigError("empty test split")
    logits = collect_logits(models, dataset.images, scales, policy, rng)
    return report_from_logits(logits, dataset.fine_labels, dataset.domain_ids, fusion, scales)


# --------------------------------------------------------------------------
# logits CSV


def write_logits_csv(path, logits, scales, sample_ids=None) -> None:
    """Write ``(k, B, N)`` per-scale logits of one model, one row per (sample, scale)."""
    logits = np.asarray(logits, dtype=np.float64)
    k, b, n = logits.shape
    if len(scales) != k:
        raise ConfigError("one scale value per logit block is required")
    sample_ids = range(b) if sample_ids is None else sample_ids
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "scale"] + [f"class_{c}" for c in range(n)])
        for i, sid in enumerate(sample_ids):
            for j, s in enumerate(scales):
                w.writerow([sid, int(s)] + [repr(float(x)) for x in logits[j, i]])


def read_logits_csv(path):
    """Inverse of :func:`write_logits_csv`: returns ``(logits, scales, sample_ids)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["sample_id", "scale"]:
        raise DatasetFormatError(f"{path}: missing sample_id,scale header")
    n = len(rows[0]) - 2
    if rows[0][2:] != [f"class_{c}" for c in range(n)]:
        raise DatasetFormatError(f"{path}: class columns must be class_0..class_{n - 1}")
    sample_ids, scales, values = [], [], {}
    try:
        for row in rows[1:]:
            if len(row) != n + 2:
                raise DatasetFormatError(f"{path}: row with {len(row)} fields, expected {n + 2}")
            sid, s = row[0], int(row[1])
            if sid not in values:
                sample_ids.append(sid)
                values[sid] = {}
            if s not in scales:
                scales.append(s)
            values[sid][s] = [float(x) for x in row[2:]]
        logits = np.array([[values[sid][s] for sid in sample_ids] for s in scales], dtype=np.float64)
    except (ValueError, KeyError) as exc:
        raise DatasetFormatError(f"{path}: malformed logits ({exc})") from exc
    return logits.reshape(len(scales), len(sample_ids), n), scales, sample_ids
