"""Procedural multi-domain image dataset with a fine -> coarse class hierarchy.

Each fine class is a (foreground shape, fill texture) pair; the coarse class
is the shape family. Domains differ only in their background style, so the
foreground semantics are identical in every domain and a held-out set of
domains measures out-of-distribution accuracy.

Datasets are stored as a directory holding ``manifest.json`` and a raw
little-endian float32 ``pixels.bin`` with samples concatenated in index order
(HWC layout).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    ConfigError,
    FormatVersionError,
    ManifestError,
    PayloadSizeError,
    SplitError,
)

FORMAT_VERSION = 1
MIN_RESOLUTION = 8

SHAPES = ("circle", "square", "triangle", "cross", "ring", "bar")
TEXTURES = ("solid", "hstripes", "checker", "dots", "vstripes", "diagonal")
BACKGROUNDS = ("solid", "gradient", "noise", "stripes", "checker", "rings", "blobs", "grid")

# area of each shape at unit half-size, and the radius bounding it under rotation
_SHAPE_AREA = {
    "circle": np.pi,
    "square": 2.56,
    "triangle": 3 * np.sqrt(3) / 4,
    "cross": 2.04,
    "ring": np.pi * (1 - 0.55**2),
    "bar": 1.4,
}
_SHAPE_EXTENT = {"circle": 1.0, "square": 1.14, "triangle": 1.0, "cross": 1.05, "ring": 1.0, "bar": 1.06}


@dataclass(frozen=True)
class ClassSpec:
    fine_id: int
    coarse_id: int
    shape_kind: str
    texture_kind: str


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    background_kind: str
    palette_seed: int


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    fine_label: int
    coarse_label: int
    domain_id: int


@dataclass
class GenerationConfig:
    """Parameters of :func:`generate_dataset`.

    ``domains`` may be left empty, in which case ``n_domains`` domains are
    built with :func:`default_domains`. ``coarse_map`` overrides the
    round-robin fine -> coarse assignment.
    """

    n_fine: int = 8
    n_coarse: int = 4
    n_domains: int = 8
    domains: list = field(default_factory=list)
    samples_per_cell: int = 10
    resolution: int = 32
    seed: int = 0
    coarse_map: list | None = None
    area_range: tuple = (0.10, 0.60)
    occlusion_prob: float = 0.0
    channels: int = 3


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable labelled image collection plus the metadata that produced it."""

    n_fine: int
    n_coarse: int
    domains: tuple
    class_specs: tuple
    resolution: int
    generator_seed: int
    images: np.ndarray
    fine_labels: np.ndarray
    coarse_labels: np.ndarray
    domain_ids: np.ndarray

    def __post_init__(self):
        for arr in (self.images, self.fine_labels, self.coarse_labels, self.domain_ids):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.fine_labels)

    def __getitem__(self, i) -> Sample:
        return Sample(
            self.images[i], int(self.fine_labels[i]), int(self.coarse_labels[i]), int(self.domain_ids[i])
        )

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def channels(self) -> int:
        return self.images.shape[-1]

    def coarse_of(self, fine_label: int) -> int:
        return self.class_specs[fine_label].coarse_id

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.n_fine, self.n_coarse, self.domains, self.class_specs, self.resolution,
            self.generator_seed, self.images[indices], self.fine_labels[indices],
            self.coarse_labels[indices], self.domain_ids[indices],
        )

    def equals(self, other: "Dataset") -> bool:
        """Field-by-field equality, pixel bytes included."""
        return (
            self.n_fine == other.n_fine
            and self.n_coarse == other.n_coarse
            and self.domains == other.domains
            and self.class_specs == other.class_specs
            and self.resolution == other.resolution
            and self.generator_seed == other.generator_seed
            and self.images.dtype == other.images.dtype
            and self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
            and np.array_equal(self.fine_labels, other.fine_labels)
            and np.array_equal(self.coarse_labels, other.coarse_labels)
            and np.array_equal(self.domain_ids, other.domain_ids)
        )


# --------------------------------------------------------------------------
# class / domain specs


def default_coarse_map(n_fine: int, n_coarse: int) -> list:
    """Round-robin assignment: fine class ``i`` goes to coarse class ``i % n_coarse``."""
    return [i % n_coarse for i in range(n_fine)]


def build_class_specs(n_fine: int, n_coarse: int, coarse_map=None) -> tuple:
    if n_coarse < 1 or n_fine < n_coarse:
        raise ConfigError(f"need n_fine >= n_coarse >= 1, got n_fine={n_fine}, n_coarse={n_coarse}")
    if n_coarse > len(SHAPES):
        raise ConfigError(f"at most {len(SHAPES)} coarse classes are supported")
    if coarse_map is None:
        coarse_map = default_coarse_map(n_fine, n_coarse)
    coarse_map = [int(c) for c in coarse_map]
    if len(coarse_map) != n_fine:
        raise ConfigError("coarse_map must have one entry per fine class")
    if any(c < 0 or c >= n_coarse for c in coarse_map):
        raise ConfigError("coarse_map entries must lie in [0, n_coarse)")
    if set(coarse_map) != set(range(n_coarse)):
        raise ConfigError("coarse_map must use every coarse class")
    specs = []
    rank = [0] * n_coarse
    for fine_id, coarse_id in enumerate(coarse_map):
        if rank[coarse_id] >= len(TEXTURES):
            raise ConfigError(f"coarse class {coarse_id} has more than {len(TEXTURES)} fine classes")
        specs.append(ClassSpec(fine_id, coarse_id, SHAPES[coarse_id], TEXTURES[rank[coarse_id]]))
        rank[coarse_id] += 1
    return tuple(specs)


def default_domains(n_domains: int) -> tuple:
    return tuple(
        DomainSpec(d, BACKGROUNDS[d % len(BACKGROUNDS)], d) for d in range(n_domains)
    )


def _coerce_domains(domains) -> tuple:
    out = []
    for d in domains:
        if isinstance(d, DomainSpec):
            out.append(d)
        else:
            out.append(DomainSpec(int(d["domain_id"]), str(d["background_kind"]), int(d["palette_seed"])))
    ids = [d.domain_id for d in out]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate domain ids")
    styles = [(d.background_kind, d.palette_seed) for d in out]
    if len(set(styles)) != len(styles):
        raise ConfigError("two domains share (background_kind, palette_seed)")
    for d in out:
        if d.background_kind not in BACKGROUNDS:
            raise ConfigError(f"unknown background kind {d.background_kind!r}")
    return tuple(out)


# --------------------------------------------------------------------------
# rendering


def _pixel_grid(res):
    c = (np.arange(res) + 0.5) / res
    return np.meshgrid(c, c, indexing="ij")  # (y, x) in [0, 1]


def _shape_mask(kind, yy, xx, cy, cx, half, angle):
    u, v = _local_coords(yy, xx, cy, cx, half, angle)
    if kind == "circle":
        return u * u + v * v <= 1.0
    if kind == "square":
        return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)
    if kind == "triangle":
        # upward equilateral triangle inscribed in the unit circle
        s3 = np.sqrt(3.0)
        return (v <= 0.5) & (s3 * u - v <= 1.0) & (-s3 * u - v <= 1.0)
    if kind == "cross":
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 1.0))
    if kind == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.55**2)
    if kind == "bar":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.35)
    raise ConfigError(f"unknown shape kind {kind!r}")


def _local_coords(yy, xx, cy, cx, half, angle):
    cos, sin = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    return (cos * dx + sin * dy) / half, (-sin * dx + cos * dy) / half


def _texture(kind, u, v, rng):
    """Binary fill pattern in object-local units, so it scales with the object."""
    band = 0.4
    pu, pv = rng.uniform(0, 2 * band, size=2)
    iu = np.floor((u + pu) / band)
    iv = np.floor((v + pv) / band)
    if kind == "solid":
        return np.ones_like(u)
    if kind == "hstripes":
        return (iv % 2).astype(float)
    if kind == "vstripes":
        return (iu % 2).astype(float)
    if kind == "checker":
        return ((iu + iv) % 2).astype(float)
    if kind == "dots":
        return ((iu % 2 == 0) & (iv % 2 == 0)).astype(float)
    if kind == "diagonal":
        return (np.floor((u + v + pu) / band) % 2).astype(float)
    raise ConfigError(f"unknown texture kind {kind!r}")


def _palette(domain: DomainSpec, channels: int):
    prng = np.random.default_rng([domain.palette_seed, 7919])
    c0 = prng.uniform(0.2, 0.8, size=channels)
    c1 = np.clip(c0 + prng.choice([-1.0, 1.0], size=channels) * prng.uniform(0.15, 0.35, size=channels), 0, 1)
    params = {
        "angle": prng.uniform(0, np.pi),
        "freq": prng.uniform(3.0, 6.0),
        "cell": int(prng.integers(3, 7)),
        "center": prng.uniform(0.0, 1.0, size=2),
    }
    return c0, c1, params


def _background(domain: DomainSpec, res, channels, rng):
    c0, c1, p = _palette(domain, channels)
    yy, xx = _pixel_grid(res)
    kind = domain.background_kind
    shift = rng.uniform(0, 1)
    if kind == "solid":
        t = np.zeros((res, res))
    elif kind == "gradient":
        t = np.cos(p["angle"]) * xx + np.sin(p["angle"]) * yy
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    elif kind == "noise":
        coarse = rng.uniform(0, 1, size=(5, 5))
        iy = yy * 4
        ix = xx * 4
        y0, x0 = np.floor(iy).astype(int), np.floor(ix).astype(int)
        y1, x1 = np.minimum(y0 + 1, 4), np.minimum(x0 + 1, 4)
        fy, fx = iy - y0, ix - x0
        t = (coarse[y0, x0] * (1 - fy) * (1 - fx) + coarse[y1, x0] * fy * (1 - fx)
             + coarse[y0, x1] * (1 - fy) * fx + coarse[y1, x1] * fy * fx)
    elif kind == "stripes":
        proj = np.cos(p["angle"]) * xx + np.sin(p["angle"]) * yy
        t = (np.sin(2 * np.pi * (p["freq"] * proj + shift)) > 0).astype(float)
    elif kind == "checker":
        cell = p["cell"]
        iy, ix = np.mgrid[0:res, 0:res]
        off = int(shift * cell)
        t = ((((iy + off) // cell) + ((ix + off) // cell)) % 2).astype(float)
    elif kind == "rings":
        r = np.hypot(yy - p["center"][0], xx - p["center"][1])
        t = 0.5 + 0.5 * np.sin(2 * np.pi * (p["freq"] * r + shift))
    elif kind == "blobs":
        t = np.zeros((res, res))
        for _ in range(int(rng.integers(3, 7))):
            cy, cx = rng.uniform(0, 1, size=2)
            r = rng.uniform(0.06, 0.18)
            t = np.maximum(t, ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(float))
    elif kind == "grid":
        iy, ix = np.mgrid[0:res, 0:res]
        cell = p["cell"] + 2
        off = int(shift * cell)
        t = (((iy + off) % cell == 0) | ((ix + off) % cell == 0)).astype(float)
    else:
        raise ConfigError(f"unknown background kind {kind!r}")
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    img = img + rng.uniform(-0.05, 0.05)
    return img


def render_sample(
    class_spec: ClassSpec,
    domain: DomainSpec,
    jitter_seed: int,
    resolution: int,
    area_range=(0.10, 0.60),
    occlusion_prob: float = 0.0,
    channels: int = 3,
    return_mask: bool = False,
):
    """Draw one image of ``class_spec`` over ``domain``'s background.

    Position, size, rotation, foreground colour and texture phase are jittered
    from ``jitter_seed``. The visible foreground covers a fraction of the
    canvas inside ``area_range``. With ``return_mask=True`` the boolean
    foreground mask is returned as a second value.
    """
    res = int(resolution)
    if res < MIN_RESOLUTION:
        raise ConfigError(f"resolution must be >= {MIN_RESOLUTION}")
    lo, hi = area_range
    rng = np.random.default_rng([int(jitter_seed) & 0xFFFFFFFFFFFFFFFF, 104729])
    kind = class_spec.shape_kind
    yy, xx = _pixel_grid(res)

    k_area = _SHAPE_AREA[kind]
    extent = _SHAPE_EXTENT[kind]
    half_max = 0.5 / extent - 1.0 / res
    a_max = min(hi, k_area * half_max**2)
    a_lo = lo + 0.02
    a_hi = max(a_lo, 0.9 * a_max)
    target = rng.uniform(a_lo, a_hi)
    half = min(np.sqrt(target / k_area), half_max)
    angle = 0.0 if kind == "circle" else rng.uniform(-np.pi / 6, np.pi / 6)
    margin = extent * half
    cy, cx = rng.uniform(margin, 1 - margin, size=2)

    mask = _shape_mask(kind, yy, xx, cy, cx, half, angle)
    # discretisation can push small canvases off target; rescale until inside
    for _ in range(40):
        frac = mask.mean()
        if lo <= frac <= hi:
            break
        half *= np.sqrt(target / max(frac, 1e-6))
        half = min(half, half_max)
        margin = extent * half
        cy, cx = np.clip([cy, cx], margin, 1 - margin)
        mask = _shape_mask(kind, yy, xx, cy, cx, half, angle)

    outline = _shape_mask(kind, yy, xx, cy, cx, half * 1.15 + 0.6 / res, angle) & ~mask

    hue = rng.uniform(0.55, 1.0, size=channels)
    dark = hue * 0.25
    tex = _texture(class_spec.texture_kind, *_local_coords(yy, xx, cy, cx, half, angle), rng)[..., None]
    fg = hue * tex + dark * (1 - tex)

    img = _background(domain, res, channels, rng)
    img = np.where(outline[..., None], 0.05, img)
    img = np.where(mask[..., None], fg, img)

    if occlusion_prob > 0 and rng.uniform() < occlusion_prob:
        oh, ow = (rng.uniform(0.15, 0.35, size=2) * res).astype(int) + 1
        oy, ox = rng.integers(0, res - oh + 1), rng.integers(0, res - ow + 1)
        occ = np.zeros((res, res), dtype=bool)
        occ[oy:oy + oh, ox:ox + ow] = True
        img = np.where(occ[..., None], _background(domain, res, channels, rng), img)
        mask = mask & ~occ

    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    sample = Sample(img, class_spec.fine_id, class_spec.coarse_id, domain.domain_id)
    if return_mask:
        return sample, mask
    return sample


def jitter_seed_for(seed: int, fine_id: int, domain_id: int, k: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(fine_id), int(domain_id), int(k)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_dataset(config: GenerationConfig) -> Dataset:
    """Render ``n_fine * len(domains) * samples_per_cell`` samples.

    Samples are ordered by domain, then fine class, then draw index. The
    result is a pure function of ``config``.
    """
    if config.resolution < MIN_RESOLUTION:
        raise ConfigError(f"resolution must be >= {MIN_RESOLUTION}, got {config.resolution}")
    if config.samples_per_cell < 1:
        raise ConfigError("samples_per_cell must be >= 1")
    if config.channels not in (1, 3):
        raise ConfigError("channels must be 1 or 3")
    lo, hi = config.area_range
    if not 0 < lo < hi <= 1:
        raise ConfigError("area_range must satisfy 0 < lo < hi <= 1")
    specs = build_class_specs(config.n_fine, config.n_coarse, config.coarse_map)
    domains = _coerce_domains(config.domains) if config.domains else default_domains(config.n_domains)
    if not domains:
        raise ConfigError("at least one domain is required")

    res, ch = config.resolution, config.channels
    n = len(specs) * len(domains) * config.samples_per_cell
    images = np.empty((n, res, res, ch), dtype=np.float32)
    fine = np.empty(n, dtype=np.int64)
    coarse = np.empty(n, dtype=np.int64)
    dom = np.empty(n, dtype=np.int64)
    i = 0
    for d in domains:
        for spec in specs:
            for k in range(config.samples_per_cell):
                s = render_sample(
                    spec, d, jitter_seed_for(config.seed, spec.fine_id, d.domain_id, k), res,
                    area_range=config.area_range, occlusion_prob=config.occlusion_prob, channels=ch,
                )
                images[i] = s.image
                fine[i], coarse[i], dom[i] = s.fine_label, s.coarse_label, s.domain_id
                i += 1
    return Dataset(config.n_fine, config.n_coarse, domains, specs, res, int(config.seed),
                   images, fine, coarse, dom)


def split_by_domain(dataset: Dataset, train_domain_ids: Sequence[int], test_domain_ids: Sequence[int]):
    """Partition ``dataset`` into (train, test) by domain id."""
    train_ids, test_ids = set(map(int, train_domain_ids)), set(map(int, test_domain_ids))
    overlap = train_ids & test_ids
    if overlap:
        raise SplitError(f"domains {sorted(overlap)} are in both splits")
    known = {d.domain_id for d in dataset.domains}
    unknown = (train_ids | test_ids) - known
    if unknown:
        raise SplitError(f"unknown domain ids {sorted(unknown)}")
    in_train = np.isin(dataset.domain_ids, sorted(train_ids))
    in_test = np.isin(dataset.domain_ids, sorted(test_ids))
    return dataset.subset(np.flatnonzero(in_train)), dataset.subset(np.flatnonzero(in_test))


# --------------------------------------------------------------------------
# persistence


def _manifest(dataset: Dataset) -> dict:
    stride = dataset.resolution * dataset.resolution * dataset.channels * 4
    return {
        "format_version": FORMAT_VERSION,
        "dtype": "f32le",
        "layout": "HWC",
        "n_fine": dataset.n_fine,
        "n_coarse": dataset.n_coarse,
        "n_samples": len(dataset),
        "channels": dataset.channels,
        "base_resolution": dataset.resolution,
        "generator_seed": dataset.generator_seed,
        "domains": [
            {"domain_id": d.domain_id, "background_kind": d.background_kind, "palette_seed": d.palette_seed}
            for d in dataset.domains
        ],
        "class_specs": [
            {"fine_id": c.fine_id, "coarse_id": c.coarse_id, "shape_kind": c.shape_kind,
             "texture_kind": c.texture_kind}
            for c in dataset.class_specs
        ],
        "sample_index": [
            [i * stride, int(f), int(c), int(d)]
            for i, (f, c, d) in enumerate(zip(dataset.fine_labels, dataset.coarse_labels, dataset.domain_ids))
        ],
    }


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(_manifest(dataset), fh, indent=1)
    dataset.images.astype("<f4").tofile(path / "pixels.bin")


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        with open(path / "manifest.json", encoding="utf-8") as fh:
            m = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(m, dict):
        raise ManifestError("manifest must be a JSON object")
    if m.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported format_version {m.get('format_version')!r}")
    try:
        if m["dtype"] != "f32le" or m["layout"] != "HWC":
            raise ManifestError("only dtype f32le with HWC layout is supported")
        res, ch = int(m["base_resolution"]), int(m["channels"])
        index = np.asarray(m["sample_index"], dtype=np.int64).reshape(-1, 4)
        domains = _coerce_domains(m["domains"])
        specs = tuple(
            ClassSpec(int(c["fine_id"]), int(c["coarse_id"]), str(c["shape_kind"]), str(c["texture_kind"]))
            for c in m["class_specs"]
        )
        n_fine, n_coarse, seed = int(m["n_fine"]), int(m["n_coarse"]), int(m["generator_seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed manifest: {exc}") from exc

    n = len(index)
    if m.get("n_samples", n) != n:
        raise ManifestError("n_samples disagrees with sample_index")
    stride = res * res * ch * 4
    if n > 1 and np.any(np.diff(index[:, 0]) <= 0):
        raise ManifestError("sample_index offsets must be strictly increasing")
    if not np.array_equal(index[:, 0], np.arange(n, dtype=np.int64) * stride):
        raise ManifestError("sample_index offsets do not match a concatenated payload")
    size = os.path.getsize(path / "pixels.bin")
    if size != n * stride:
        raise PayloadSizeError(f"pixels.bin holds {size} bytes, manifest implies {n * stride}")
    images = np.fromfile(path / "pixels.bin", dtype="<f4").astype(np.float32).reshape(n, res, res, ch)
    return Dataset(n_fine, n_coarse, domains, specs, res, seed, images,
                   index[:, 1].copy(), index[:, 2].copy(), index[:, 3].copy())
