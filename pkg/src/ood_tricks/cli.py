"""Command-line entry point: ``ood-tricks <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 I/O or file
format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .ensemble import FUSIONS, MetricsReport, TtaPolicy
from .errors import ConfigError, DatasetFormatError, NumericError, OodTricksError
from .harness import (
    DEFAULT_SEQUENCE,
    AblationReport,
    ExperimentConfig,
    _build,
    load_data,
    member_table,
    render_table,
    run_ablation,
    run_ensemble,
    run_experiment,
)
from .synthgen import GenerationConfig, generate_dataset, load_dataset, save_dataset

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "out", None):
        cfg.output_dir = str(args.out)
    if getattr(args, "deterministic", None) is not None:
        cfg.deterministic = args.deterministic
    return cfg


def _test_split(args):
    """Held-out samples from ``--data`` (optionally ``--domains``) or from the config."""
    if args.data:
        ds = load_dataset(args.data)
        if args.domains:
            ds = ds.subset([i for i, d in enumerate(ds.domain_ids) if int(d) in set(args.domains)])
        return ds
    cfg = _config(args)
    if args.domains:
        cfg.test_domains = args.domains
        cfg.train_domains = [d for d in cfg.train_domains if d not in set(args.domains)]
    return load_data(cfg)[1]


def _tta(value) -> TtaPolicy:
    if value in (None, "off"):
        return TtaPolicy.minimal()
    if value == "on":
        return TtaPolicy(use_hflip=True)
    with open(value, encoding="utf-8") as fh:
        return _build(TtaPolicy, json.load(fh), "tta")


def _emit(report, out):
    text = report.to_json()
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    sys.stdout.write(member_table(report) if len(report.members) > 1 else text)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if "generate" not in cfg.dataset:
        raise ConfigError("gen-data needs a dataset.generate block")
    gen = dict(cfg.dataset["generate"])
    if args.seed is not None:
        gen["seed"] = args.seed
    ds = generate_dataset(_build(GenerationConfig, gen, "dataset.generate"))
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    for seed in cfg.seeds:
        res = run_experiment(cfg, seed, out / f"seed_{seed}")
        print(f"seed {seed}: held-out top-1 {res.report.top1:.4f} -> {res.output_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    test = _test_split(args)
    report = run_ensemble(args.models, test, args.fusion, args.scales or [test.resolution], _tta(args.tta))
    _emit(report, args.out)
    return EXIT_OK


def cmd_ensemble(args) -> int:
    test = _test_split(args)
    sources = (args.models or []) + (args.logits or [])
    report = run_ensemble(sources, test, args.fusion, args.scales or [test.resolution], _tta(args.tta))
    _emit(report, args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    if args.seeds:
        cfg.seeds = args.seeds
    sequence = args.sequence.split(",") if args.sequence else None
    report = run_ablation(cfg, sequence, cfg.output_dir,
                          progress=lambda name, s, v: print(f"{name} seed {s}: {v:.4f}", file=sys.stderr))
    sys.stdout.write(render_table(report))
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    if run.is_dir():
        found = [run / n for n in ("ablation.json", "summary.json", "metrics.json") if (run / n).is_file()]
        if not found:
            raise DatasetFormatError(f"{run}: no ablation.json, summary.json or metrics.json")
        path = found[0]
    else:
        path = run
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: invalid JSON ({exc})") from exc
    if "rows" in data:
        sys.stdout.write(render_table(AblationReport.from_dict(data)))
    elif "mean" in data:
        print(f"top-1 mean {100 * data['mean']:.2f}% std {100 * data['std']:.2f}% over seeds {data['seeds']}")
    else:
        rep = MetricsReport.from_dict(data)
        sys.stdout.write(member_table(rep))
        for d, acc in sorted(rep.per_domain.items(), key=lambda kv: int(kv[0])):
            print(f"domain {d}: {100 * acc:.2f}%")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ood-tricks", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, help="override the config's seeds with a single seed")
        sp.add_argument("--out", required=out_required, help="output path")
        sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)

    def eval_args(sp):
        sp.add_argument("--data", help="dataset directory written by gen-data")
        sp.add_argument("--domains", type=int, nargs="+", help="held-out domain ids")
        sp.add_argument("--scales", type=int, nargs="+", help="inference sizes (default: native)")
        sp.add_argument("--fusion", choices=FUSIONS, default="aw")
        sp.add_argument("--tta", default="off", help="off, on, or a JSON file of TTA settings")

    sp = sub.add_parser("gen-data", help="render a synthetic dataset to disk")
    common(sp, out_required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train and evaluate per the config's toggles")
    common(sp, out_required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate checkpoints on held-out data")
    common(sp)
    sp.add_argument("--models", nargs="+", required=True, help="checkpoint directories")
    eval_args(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ensemble", help="weighted top-5 vote over checkpoints or logits CSVs")
    common(sp)
    sp.add_argument("--models", nargs="+", help="checkpoint directories")
    sp.add_argument("--logits", nargs="+", help="per-model logits CSV files")
    eval_args(sp)
    sp.set_defaults(func=cmd_ensemble)

    sp = sub.add_parser("ablate", help="add tricks one at a time over all seeds")
    common(sp, out_required=True)
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--sequence", help=f"comma-separated steps (default: {','.join(DEFAULT_SEQUENCE)})")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="print a finished run as a table")
    sp.add_argument("run", help="run directory or JSON file")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OodTricksError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
