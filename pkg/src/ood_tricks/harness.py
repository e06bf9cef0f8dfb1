"""Experiment configuration, single runs, multi-seed summaries and the ablation runner.

An experiment is a dataset recipe, a domain split, a set of trick toggles and
the settings each trick uses when switched on. Every run writes its resolved
configuration next to its artifacts, so the echo alone reproduces it.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentPolicy, MixConfig, RandAugConfig
from .ensemble import (
    FUSIONS,
    MetricsReport,
    TtaPolicy,
    collect_logits,
    read_logits_csv,
    report_from_logits,
    write_logits_csv,
)
from .errors import ConfigError, DatasetFormatError, NumericError, OodTricksError
from .nnet import ScaleCycle, TrainConfig, load_checkpoint, save_checkpoint, train
from .synthgen import GenerationConfig, generate_dataset, load_dataset, split_by_domain

TOGGLES = ("multi_scale", "cutmix_mixup", "rand_augment", "label_smoothing", "tta", "multi_objective", "ensemble")

ROW_NAMES = {
    "baseline": "Baseline",
    "multi_scale": "+Multi-scale",
    "cutmix_mixup": "+Cutmix and Mixup",
    "rand_augment": "+Random Augmentation",
    "label_smoothing": "+Label Smoothing",
    "tta": "+Test-time Augmentation",
    "multi_objective": "+Multi-objective Framework",
    "ensemble": "+Model Ensemble",
}

DEFAULT_SEQUENCE = ["baseline", "multi_scale", "cutmix_mixup", "rand_augment", "label_smoothing", "tta",
                    "multi_objective", "ensemble"]

# seeds of ensemble members are spaced so they never collide with the run seeds
MEMBER_SEED_STRIDE = 1000


def _build(cls, data, where):
    """Instantiate dataclass ``cls`` from a dict, rejecting unknown keys."""
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _plain(obj):
    """Recursively convert dataclasses, tuples and numpy scalars to JSON types."""
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class ExperimentConfig:
    """Everything one experiment needs.

    ``dataset`` is either ``{"generate": {...GenerationConfig...}}`` or
    ``{"path": "<dataset dir>"}``. Trick settings (``multi_scale``, ``mix``,
    ``randaug``, ``label_smoothing``, ``loss_alpha``, ``tta``) only take effect
    when the matching toggle is on; ``train`` holds the remaining optimizer
    and loop settings and its ``scale_cycle``/``loss_alpha``/``seed`` fields
    are overwritten per run.
    """

    dataset: dict = field(default_factory=lambda: {"generate": {}})
    train_domains: list = field(default_factory=lambda: [0, 1, 2, 3, 4, 5])
    test_domains: list = field(default_factory=lambda: [6, 7])
    toggles: dict = field(default_factory=lambda: {t: False for t in TOGGLES})
    # 70 epochs = 14 five-epoch blocks, so the [40, 32, 24] cycle ends on a 32 px block
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=70, lr_max=3e-3, channels=(16, 32, 64)))
    hflip_prob: float = 0.5
    multi_scale: ScaleCycle = field(default_factory=lambda: ScaleCycle([40, 32, 24], 5))
    mix: MixConfig = field(default_factory=MixConfig)
    # magnitude 9 over-regularises the small network within 40 epochs
    randaug: RandAugConfig = field(default_factory=lambda: RandAugConfig(magnitude=5))
    label_smoothing: float = 0.1
    loss_alpha: float = 0.5
    tta: TtaPolicy = field(default_factory=lambda: TtaPolicy(use_hflip=True))
    fusion: str = "aw"
    ensemble_size: int = 3
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs"
    deterministic: bool = True

    def __post_init__(self):
        self.train = _build(TrainConfig, self.train, "train")
        self.multi_scale = _build(ScaleCycle, self.multi_scale, "multi_scale")
        self.mix = _build(MixConfig, self.mix, "mix")
        self.randaug = _build(RandAugConfig, self.randaug, "randaug")
        self.tta = _build(TtaPolicy, self.tta, "tta")
        unknown = set(self.toggles) - set(TOGGLES)
        if unknown:
            raise ConfigError(f"unknown toggles {sorted(unknown)}; known: {list(TOGGLES)}")
        self.toggles = {t: bool(self.toggles.get(t, False)) for t in TOGGLES}
        if not isinstance(self.dataset, dict) or len(set(self.dataset) & {"generate", "path"}) != 1 \
                or set(self.dataset) - {"generate", "path"}:
            raise ConfigError('dataset must be {"generate": {...}} or {"path": "..."}')
        if "generate" in self.dataset:
            _build(GenerationConfig, self.dataset["generate"], "dataset.generate")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}")
        if self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.loss_alpha < 0:
            raise ConfigError("loss_alpha must be >= 0")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError("hflip_prob must lie in [0, 1]")

    @classmethod
    def from_dict(cls, data) -> "ExperimentConfig":
        return _build(cls, copy.deepcopy(data), "config")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return _plain(self)

    # resolved views used by the runner

    def train_config(self, seed: int, resolution: int) -> TrainConfig:
        """Training settings for one model; without multi-scale it trains at ``resolution``."""
        cfg = copy.deepcopy(self.train)
        cfg.seed = int(seed)
        cfg.loss_alpha = self.loss_alpha if self.toggles["multi_objective"] else 0.0
        if self.toggles["multi_scale"]:
            cfg.scale_cycle = copy.deepcopy(self.multi_scale)
        else:
            cfg.scale_cycle = ScaleCycle([int(resolution)], self.multi_scale.period_epochs)
        return cfg

    def augment_policy(self) -> AugmentPolicy:
        t = self.toggles
        return AugmentPolicy(
            hflip_prob=self.hflip_prob,
            randaug=self.randaug if t["rand_augment"] else None,
            label_smoothing=self.label_smoothing if t["label_smoothing"] else 0.0,
            mix=self.mix if t["cutmix_mixup"] else None,
        )

    def eval_scales(self, resolution: int) -> list:
        """Without TTA: the native size only. With TTA: every training scale, fused."""
        if self.toggles["tta"] and self.toggles["multi_scale"]:
            return list(self.multi_scale.scales)
        return [int(resolution)]

    def tta_policy(self) -> TtaPolicy:
        if not self.toggles["tta"]:
            return TtaPolicy.minimal()
        pol = copy.deepcopy(self.tta)
        pol.deterministic = self.deterministic and pol.deterministic
        return pol

    def member_seeds(self, seed: int) -> list:
        n = self.ensemble_size if self.toggles["ensemble"] else 1
        return [int(seed) + MEMBER_SEED_STRIDE * j for j in range(n)]


def resolved_config(config: ExperimentConfig, seed: int) -> dict:
    """The configuration echo written next to a run's artifacts."""
    d = config.to_dict()
    d["seeds"] = [int(seed)]
    return d


# --------------------------------------------------------------------------
# data

_DATA_CACHE: dict = {}


def load_data(config: ExperimentConfig):
    """Return ``(train_split, test_split)`` for ``config``.

    Generated datasets are cached per process, keyed by their recipe.
    """
    if "path" in config.dataset:
        full = load_dataset(config.dataset["path"])
    else:
        gen = _build(GenerationConfig, config.dataset["generate"], "dataset.generate")
        key = json.dumps(_plain(gen), sort_keys=True)
        if key not in _DATA_CACHE:
            _DATA_CACHE[key] = generate_dataset(gen)
        full = _DATA_CACHE[key]
    return split_by_domain(full, config.train_domains, config.test_domains)


# --------------------------------------------------------------------------
# single experiment


@dataclass
class ExperimentResult:
    seed: int
    report: MetricsReport
    models: list
    output_dir: Path
    wall_time: float
    trainings: int


def _train_key(train_cfg: TrainConfig, policy: AugmentPolicy, config: ExperimentConfig) -> str:
    return json.dumps({"train": _plain(train_cfg), "policy": _plain(policy), "dataset": config.dataset,
                       "domains": config.train_domains}, sort_keys=True)


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def run_experiment(config: ExperimentConfig, seed: int, output_dir=None, model_cache: dict | None = None):
    """Train and evaluate one seed; returns an :class:`ExperimentResult`.

    Artifacts under ``output_dir`` (default ``<config.output_dir>/seed_<seed>``):
    ``config.json`` (resolved echo), ``checkpoint/member_<j>/`` per model,
    ``train_log_<j>.jsonl``, ``logits_<j>.csv`` and ``metrics.json``. On any
    library error an ``error.json`` record is written before re-raising.

    ``model_cache`` maps training recipes to trained parameters; identical
    recipes inside one process then train once.
    """
    start = time.perf_counter()
    out = Path(output_dir) if output_dir is not None else Path(config.output_dir) / f"seed_{seed}"
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", resolved_config(config, seed))
    trainings = 0
    try:
        train_split, test_split = load_data(config)
        policy = config.augment_policy()
        models = []
        for j, member_seed in enumerate(config.member_seeds(seed)):
            tcfg = config.train_config(member_seed, train_split.resolution)
            key = _train_key(tcfg, policy, config)
            if model_cache is not None and key in model_cache:
                params, log = model_cache[key]
            else:
                params, log = train(train_split, tcfg, policy)
                trainings += 1
                if model_cache is not None:
                    model_cache[key] = (params, log)
            save_checkpoint(params, out / "checkpoint" / f"member_{j}")
            log.write(out / f"train_log_{j}.jsonl")
            models.append(params)

        scales = config.eval_scales(test_split.resolution)
        pol = config.tta_policy()
        rng = None if pol.deterministic else np.random.default_rng()
        logits = collect_logits(models, test_split.images, scales, pol, rng)
        for j, member_logits in enumerate(logits):
            write_logits_csv(out / f"logits_{j}.csv", member_logits, scales)
        report = report_from_logits(logits, test_split.fine_labels, test_split.domain_ids, config.fusion, scales)
        (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    except OodTricksError as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "seed": int(seed)}
        if isinstance(exc, NumericError):
            record.update(epoch=exc.epoch, batch=exc.batch)
        _write_json(out / "error.json", record)
        raise
    return ExperimentResult(int(seed), report, models, out, time.perf_counter() - start, trainings)


def _mean_std(values):
    mean = float(statistics.fmean(values))
    std = float(statistics.stdev(values)) if len(values) > 1 else 0.0
    return mean, std


def run_seeds(config: ExperimentConfig, output_dir=None, model_cache: dict | None = None) -> dict:
    """Run every seed of ``config`` and write ``summary.json``; returns the summary."""
    out = Path(output_dir) if output_dir is not None else Path(config.output_dir)
    results = [run_experiment(config, s, out / f"seed_{s}", model_cache) for s in config.seeds]
    top1 = [r.report.top1 for r in results]
    mean, std = _mean_std(top1)
    summary = {
        "toggles": config.toggles,
        "seeds": config.seeds,
        "top1": top1,
        "mean": mean,
        "std": std,
        "members": [r.report.members for r in results],
        "wall_time": sum(r.wall_time for r in results),
    }
    if config.deterministic:
        summary.pop("wall_time")
    _write_json(out / "summary.json", summary)
    return summary


# --------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    name: str
    toggles: dict
    mean: float
    std: float
    per_seed: list
    delta: float | None
    wall_time: float
    members: list = field(default_factory=list)


@dataclass
class AblationReport:
    rows: list
    seeds: list
    runs: int
    trainings: int

    def to_dict(self) -> dict:
        return _plain(self)

    def to_json(self, include_timing: bool = True) -> str:
        d = self.to_dict()
        if not include_timing:
            for row in d["rows"]:
                row.pop("wall_time")
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d) -> "AblationReport":
        rows = [AblationRow(**{"wall_time": 0.0, **r}) for r in d["rows"]]
        return cls(rows, d["seeds"], d["runs"], d["trainings"])

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def render(self) -> str:
        return render_table(self)


def render_table(report: AblationReport) -> str:
    """Markdown table: method, mean Top-1 (%), std, delta to the previous row, wall time."""
    lines = ["| Method | Top-1 (%) | Std | Delta | Time (s) |", "|---|---:|---:|---:|---:|"]
    for r in report.rows:
        delta = "" if r.delta is None else f"{100 * r.delta:+.2f}"
        lines.append(f"| {r.name} | {100 * r.mean:.2f} | {100 * r.std:.2f} | {delta} | {r.wall_time:.1f} |")
    return "\n".join(lines) + "\n"


def cumulative_toggles(sequence) -> list:
    """Toggle dicts for each row: row k has the first k tricks of ``sequence`` on."""
    if len(sequence) < 2:
        raise ConfigError("an ablation needs at least two configurations")
    rows = []
    on = {t: False for t in TOGGLES}
    for i, step in enumerate(sequence):
        if step == "baseline":
            if i != 0:
                raise ConfigError("'baseline' may only open the sequence")
        elif step in TOGGLES:
            if on[step]:
                raise ConfigError(f"{step!r} appears twice in the sequence")
            on = {**on, step: True}
        else:
            raise ConfigError(f"unknown ablation step {step!r}; known: baseline, {', '.join(TOGGLES)}")
        rows.append((ROW_NAMES[step], dict(on)))
    return rows


def run_ablation(config: ExperimentConfig, sequence=None, output_dir=None, progress=None) -> AblationReport:
    """Run each cumulative configuration of ``sequence`` over every seed.

    Row ``k`` switches on the first ``k`` tricks (``baseline`` turns nothing
    on). The toggles already set in ``config`` are ignored. Models whose
    training recipe repeats an earlier row are reused rather than retrained;
    ``runs`` counts experiments and ``trainings`` counts actual fits. Writes
    ``ablation.json`` and ``ablation.md`` under ``output_dir``.
    """
    sequence = list(sequence or DEFAULT_SEQUENCE)
    out = Path(output_dir) if output_dir is not None else Path(config.output_dir)
    cache: dict = {}
    rows = []
    runs = trainings = 0
    prev_mean = None
    for i, (name, toggles) in enumerate(cumulative_toggles(sequence)):
        cfg = copy.deepcopy(config)
        cfg.toggles = toggles
        per_seed, members = [], []
        start = time.perf_counter()
        for s in cfg.seeds:
            res = run_experiment(cfg, s, out / f"row_{i}" / f"seed_{s}", cache)
            runs += 1
            trainings += res.trainings
            per_seed.append(res.report.top1)
            members.append(res.report.members)
            if progress:
                progress(name, s, res.report.top1)
        mean, std = _mean_std(per_seed)
        rows.append(AblationRow(name, toggles, mean, std, per_seed, None if prev_mean is None else mean - prev_mean,
                                time.perf_counter() - start, members))
        prev_mean = mean
    report = AblationReport(rows, list(config.seeds), runs, trainings)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(report.to_json(include_timing=not config.deterministic), encoding="utf-8")
    (out / "ablation.md").write_text(render_table(report), encoding="utf-8")
    return report


# --------------------------------------------------------------------------
# ensembles from saved artifacts


def run_ensemble(sources, test_split, fusion: str = "aw", scales=None, policy: TtaPolicy | None = None,
                 rng=None) -> MetricsReport:
    """Voted ensemble over checkpoint directories or per-model logits CSVs.

    Checkpoints are evaluated at ``scales`` under ``policy``; CSV sources carry
    their own scales and must list the test samples by index.
    """
    if not sources:
        raise ConfigError("need at least one model or logits source")
    blocks, used_scales = [], None
    models = []
    for src in sources:
        src = Path(src)
        if src.is_dir():
            models.append(load_checkpoint(src))
        elif src.suffix == ".csv":
            logits, csv_scales, ids = read_logits_csv(src)
            if len(ids) != len(test_split):
                raise DatasetFormatError(f"{src}: {len(ids)} samples, test split has {len(test_split)}")
            order = np.argsort([int(i) for i in ids], kind="stable")
            blocks.append(logits[:, order])
            used_scales = used_scales or csv_scales
        else:
            raise DatasetFormatError(f"{src}: neither a checkpoint directory nor a .csv file")
    if models:
        if not scales:
            raise ConfigError("scales are required to evaluate checkpoints")
        blocks += list(collect_logits(models, test_split.images, scales, policy or TtaPolicy.minimal(), rng))
        used_scales = used_scales or list(scales)
    n_classes = {b.shape[-1] for b in blocks}
    if len(n_classes) != 1:
        raise ConfigError(f"sources disagree on the number of classes: {sorted(n_classes)}")
    if len({b.shape[0] for b in blocks}) != 1:
        raise ConfigError("sources disagree on the number of scales")
    return report_from_logits(np.stack(blocks), test_split.fine_labels, test_split.domain_ids, fusion, used_scales)


def member_table(report: MetricsReport) -> str:
    """Single-model and ensemble Top-1 side by side."""
    lines = ["| Model | Top-1 (%) |", "|---|---:|"]
    lines += [f"| model {j} | {100 * t:.2f} |" for j, t in enumerate(report.members)]
    lines.append(f"| ensemble | {100 * report.top1:.2f} |")
    return "\n".join(lines) + "\n"
