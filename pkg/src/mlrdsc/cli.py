"""Command-line entry point (``mlrdsc``)."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import datasets, experiments as ex
from .classic import ClassicConfig
from .network import init_params, save_model
from .trainer import pretrain, resume


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = ex.parse_value(key.strip(), value)
    return out


def _config(args, dataset: str | None = None, **extra) -> ex.ExperimentConfig:
    overrides = _overrides(args)
    overrides.update(extra)
    if getattr(args, "output_dir", None):
        overrides["output_dir"] = args.output_dir
    if args.config:
        if dataset:
            overrides["dataset"] = dataset
        return ex.load_config(args.config, overrides)
    dataset = dataset or overrides.pop("dataset", "yaleb")
    overrides.pop("dataset", None)
    return ex.ExperimentConfig.preset(dataset, **overrides)


def _starts(text: str | None):
    return None if not text else [int(s) for s in text.split(",")]


def cmd_prepare_data(args):
    cfg = _config(args, args.dataset, **({"subject_count": args.subjects} if args.subjects else {}))
    print(ex.prepare_data(cfg, args.data_root))


def cmd_pretrain(args):
    cfg = _config(args, args.dataset)
    samples = ex.load_samples(cfg, args.data_root)
    dtype = {"float64": torch.float64, "float32": torch.float32}[cfg.dtype]
    model = init_params(cfg.arch(), samples.n, cfg.seed, dtype=dtype)
    pretrain(samples.X, model, cfg.train_config())
    out = Path(args.out or cfg.run_dir() / "pretrained.mlrd")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out, cfg.seed)
    print(out)


def cmd_train(args):
    if args.resume:
        state = resume(args.resume, checkpoint_every=args.checkpoint_every)
        print(f"epoch {state.epoch} finished={state.finished}")
        return
    cfg = _config(args, args.dataset)
    samples = ex.load_samples(cfg, args.data_root)
    row = ex.run_trial(cfg, samples, 0, samples.name)
    report = ex.TrialReport(name=f"{samples.name}_{cfg.variant}", config_hash=cfg.config_hash(), rows=[row])
    ex.emit_report([report], cfg.run_dir())
    print(f"{samples.name}: clustering error {row.error:.2f}% ({row.status})")


def cmd_sweep(args):
    cfg = _config(args, "yaleb", subject_count=args.subjects)
    report = ex.run_yaleb_sweep(args.subjects, cfg, args.data_root, args.workers, _starts(args.starts),
                                exclude_failed=args.exclude_failed)
    ex.emit_report([report], cfg.run_dir())
    sys.stdout.write(ex.format_table([report]))


def cmd_run(args):
    cfg = _config(args, args.dataset, variant=args.variant)
    report = ex.run_dataset(args.dataset, cfg, args.data_root)
    ex.emit_report([report], cfg.run_dir())
    sys.stdout.write(ex.format_table([report]))


def cmd_sensitivity(args):
    cfg = _config(args, "yaleb", subject_count=args.subjects)
    grid = ex.run_sensitivity(args.subjects, cfg, args.data_root, args.workers, _starts(args.starts))
    ex.emit_report([r for _, r in grid], cfg.run_dir() / "sensitivity")
    table = ex.sensitivity_table(grid)
    (cfg.run_dir() / "sensitivity" / "sensitivity.txt").write_text(table)
    sys.stdout.write(table)


def cmd_baseline(args):
    ccfg = ClassicConfig(args.regularizer, args.lam, not args.no_diag, args.max_iter, args.tol)
    if args.dataset == "synthetic":
        samples = datasets.synth_union_of_subspaces(datasets.SyntheticSpec(
            args.K, args.ambient, args.dim, args.points, args.noise, args.seed))
    else:
        samples = ex.load_samples(_config(args, args.dataset), args.data_root)
    err = ex.run_classic_baseline(samples, ccfg, args.seed)
    print(f"{samples.name}: {args.regularizer} self-expression baseline error {err:.2f}%")


def cmd_report(args):
    reports = [ex.read_report_csv(p) for p in args.csv]
    ex.emit_report(reports, args.out, plots=not args.no_plots)
    sys.stdout.write(ex.format_table(reports))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlrdsc", description="Multi-level deep subspace clustering experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        sp.add_argument("--data-root", help=f"dataset root (default ${ex.DATA_ROOT_ENV})")
        sp.add_argument("--output-dir")
        if dataset:
            sp.add_argument("--dataset", choices=list(ex.DATASET_DIRS), help="default yaleb")

    sp = sub.add_parser("prepare-data", help="load a dataset and write its cache file")
    common(sp)
    sp.add_argument("--subjects", type=int)
    sp.set_defaults(func=cmd_prepare_data)

    sp = sub.add_parser("pretrain", help="pretrain the autoencoder with shortcut connections")
    common(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="run one full trial, or resume a checkpoint")
    common(sp)
    sp.add_argument("--resume", help="checkpoint to continue")
    sp.add_argument("--checkpoint-every", type=int, default=50)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep-yaleb", help="all K-consecutive-subject trials on Extended Yale B")
    common(sp, dataset=False)
    sp.add_argument("--subjects", type=int, required=True)
    sp.add_argument("--starts", help="comma-separated subset of first subjects")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--exclude-failed", action="store_true")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("run", help="single trial on ORL or COIL")
    common(sp, dataset=False)
    sp.add_argument("--dataset", required=True, choices=["orl", "coil20", "coil100"])
    sp.add_argument("--variant", default="mlrdsc", choices=ex.VARIANTS)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sensitivity", help="loss-weight sensitivity grid on Extended Yale B")
    common(sp, dataset=False)
    sp.add_argument("--subjects", type=int, required=True)
    sp.add_argument("--starts")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sensitivity)

    sp = sub.add_parser("baseline-classic", help="closed-form/proximal self-expression baseline")
    common(sp, dataset=False)
    sp.add_argument("--dataset", default="synthetic", choices=["synthetic", *ex.DATASET_DIRS])
    sp.add_argument("--regularizer", default="l1", choices=["l1", "frobenius"])
    sp.add_argument("--lam", type=float, default=0.01)
    sp.add_argument("--no-diag", action="store_true")
    sp.add_argument("--max-iter", type=int, default=5000)
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--K", type=int, default=3)
    sp.add_argument("--ambient", type=int, default=30)
    sp.add_argument("--dim", type=int, default=3)
    sp.add_argument("--points", type=int, default=40)
    sp.add_argument("--noise", type=float, default=0.0)
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("report", help="re-emit tables and plots from report CSVs")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--out", default="report")
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (datasets.IngestionError, datasets.DecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
