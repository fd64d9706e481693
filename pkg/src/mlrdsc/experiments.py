"""Experiment configuration, trial execution, sweeps and report emission.

Config files are plain ``key = value`` lines (``#`` starts a comment). Keys:

==================  =======================================================
dataset             yaleb | orl | coil20 | coil100
subject_start       first Yale B subject (1-based)
subject_count       number of consecutive Yale B subjects (K)
layers              encoder layers as ``filters x kernel`` list, e.g. ``10x5,20x3,30x3``
variant             mlrdsc | mlrdsc_l1 | dsc_l1 | dsc_l2
lambda1..lambda3    loss weights
T, max_iter         Q refresh period and epoch budget
lr, adam_beta1, adam_beta2, adam_eps, seed, pretrain_epochs, stabilize,
aggregation, keep_top, dtype (float64 | float32), output_dir
==================  =======================================================

Every emitted artifact lives under ``output_dir/<config hash>/``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import container, datasets
from .classic import ClassicConfig, solve_iterative
from .network import ArchitectureSpec, init_params
from .selfexpress import LossWeights, SelfExpressionParams
from .spectral import build_affinity, clustering_error, spectral_cluster
from .trainer import TrainConfig, TrainingError, pretrain, train

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "MLRDSC_DATA_ROOT"
VARIANTS = ("mlrdsc", "mlrdsc_l1", "dsc_l1", "dsc_l2")
DATASET_DIRS = {"yaleb": "CroppedYale", "orl": "orl", "coil20": "coil-20-proc", "coil100": "coil-100"}

# reference settings per dataset
PRESETS = {
    "yaleb": dict(layers=((10, 5), (20, 3), (30, 3)), input_shape=(48, 42, 1),
                  lambda2=40.0, lambda3=10.0, T=100, max_iter=900),
    "orl": dict(layers=((3, 3), (3, 3), (5, 3)), input_shape=(32, 32, 1),
                lambda1=5.0, lambda2=0.5, lambda3=1.0, T=10, max_iter=420),
    "coil20": dict(layers=((5, 3), (10, 3)), input_shape=(32, 32, 1),
                   lambda1=20.0, lambda2=20.0, lambda3=5.0, T=5, max_iter=50),
    "coil100": dict(layers=((20, 3), (30, 3)), input_shape=(32, 32, 1),
                    lambda1=20.0, lambda2=40.0, lambda3=10.0, T=50, max_iter=350),
}

# (lambda1, lambda2, lambda3) multipliers of the sensitivity grid
SENSITIVITY_GRID = ((1, 1, 1), (1, 0.1, 1), (1, 100, 1), (1, 1, 0.1), (1, 1, 100), (0.1, 1, 1), (10, 1, 1))


def yaleb_lambda1(K: int) -> float:
    return 10.0 ** (K / 10.0 - 1.0)


@dataclass
class ExperimentConfig:
    dataset: str = "yaleb"
    subject_start: int = 1
    subject_count: int = 10
    layers: tuple[tuple[int, int], ...] = ((10, 5), (20, 3), (30, 3))
    input_shape: tuple[int, int, int] = (48, 42, 1)
    variant: str = "mlrdsc"
    lambda1: float = 1.0
    lambda2: float = 40.0
    lambda3: float = 10.0
    T: int = 100
    max_iter: int = 900
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    pretrain_epochs: int = 2000
    stabilize: bool = False
    aggregation: str = "literal"
    keep_top: int | None = None
    dtype: str = "float64"
    output_dir: str = "runs"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        self.layers = tuple(tuple(int(v) for v in l) for l in self.layers)
        self.input_shape = tuple(int(v) for v in self.input_shape)

    @classmethod
    def preset(cls, dataset: str, **overrides) -> "ExperimentConfig":
        base = dict(PRESETS.get(dataset, {}))
        base["dataset"] = dataset
        base.update(overrides)
        if dataset == "yaleb" and "lambda1" not in overrides:
            base["lambda1"] = yaleb_lambda1(int(base.get("subject_count", 10)))
        return cls(**base)

    def arch(self) -> ArchitectureSpec:
        single = self.variant.startswith("dsc_")
        return ArchitectureSpec(self.layers, self.input_shape,
                                connections="bottleneck" if single else "all",
                                learn_distinctive=not single)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        reg = {"mlrdsc": "membership", "mlrdsc_l1": "l1", "dsc_l1": "l1", "dsc_l2": "l2"}[self.variant]
        return TrainConfig(weights=LossWeights(self.lambda1, self.lambda2, self.lambda3), T=self.T,
                           max_iter=self.max_iter, lr=self.lr, adam_beta1=self.adam_beta1,
                           adam_beta2=self.adam_beta2, adam_eps=self.adam_eps,
                           seed=self.seed if seed is None else seed, pretrain_epochs=self.pretrain_epochs,
                           stabilize=self.stabilize, regularizer=reg, aggregation=self.aggregation,
                           keep_top=self.keep_top)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [list(l) for l in self.layers]
        d["input_shape"] = list(self.input_shape)
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.config_hash()


# ---------------------------------------------------------------------------
# config files and overrides

_FIELD_TYPES = {f: type(v) for f, v in asdict(ExperimentConfig()).items()}


def _parse_shape(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.lower().split("x"))


def parse_value(key: str, text: str):
    text = text.strip()
    if key not in _FIELD_TYPES:
        raise KeyError(f"unknown config key {key!r}")
    if key == "layers":
        return tuple(_parse_shape(tok) for tok in text.split(","))
    if key == "input_shape":
        return _parse_shape(text)
    if key == "keep_top":
        return None if text.lower() in ("", "none") else int(text)
    kind = _FIELD_TYPES[key]
    if kind is bool:
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: expected a boolean, got {text!r}")
        return text.lower() in ("true", "1", "yes")
    return kind(text)


def format_value(key: str, value) -> str:
    if key == "layers":
        return ",".join(f"{f}x{k}" for f, k in value)
    if key == "input_shape":
        return "x".join(str(v) for v in value)
    return "none" if value is None else str(value)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text())
    values.update(overrides or {})
    dataset = values.pop("dataset", "yaleb")
    return ExperimentConfig.preset(dataset, **values)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = [f"# config hash {cfg.config_hash()}"]
    lines += [f"{k} = {format_value(k, v)}" for k, v in asdict(cfg).items()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data access


def data_root(root=None) -> Path:
    root = root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise datasets.IngestionError(f"no dataset root given; set ${DATA_ROOT_ENV} or pass --data-root")
    return Path(root)


def cache_path(root: Path, cfg: ExperimentConfig) -> Path:
    tag = cfg.dataset
    if cfg.dataset == "yaleb":
        tag = f"yaleb_{cfg.subject_start}_{cfg.subject_count}"
    return root / "cache" / f"{tag}.mlrd"


def load_samples(cfg: ExperimentConfig, root=None, use_cache: bool = True) -> datasets.SampleSet:
    root = data_root(root)
    cached = cache_path(root, cfg)
    if use_cache and cached.is_file():
        return datasets.load_cache(cached)
    sub = root / DATASET_DIRS[cfg.dataset]
    if cfg.dataset == "yaleb":
        return datasets.load_yaleb(sub, cfg.subject_start, cfg.subject_count)
    if cfg.dataset == "orl":
        return datasets.load_orl(sub)
    if cfg.dataset in ("coil20", "coil100"):
        return datasets.load_coil(sub, int(cfg.dataset[4:]))
    raise ValueError(f"unknown dataset {cfg.dataset!r}")


def prepare_data(cfg: ExperimentConfig, root=None) -> Path:
    root = data_root(root)
    samples = load_samples(cfg, root, use_cache=False)
    out = cache_path(root, cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    datasets.save_cache(samples, out)
    return out


# ---------------------------------------------------------------------------
# trials


def trial_seed(config_hash: str, index: int) -> int:
    return int(hashlib.sha256(f"{config_hash}:{index}".encode()).hexdigest()[:8], 16)


@dataclass
class TrialRow:
    index: int
    label: str
    error: float
    runtime: float
    seed: int
    status: str = "ok"
    artifact_dir: str = ""


@dataclass
class TrialReport:
    name: str
    config_hash: str
    rows: list[TrialRow] = field(default_factory=list)
    exclude_failed: bool = False

    def _errors(self) -> list[float]:
        failed = [r for r in self.rows if r.status != "ok"]
        if failed and not self.exclude_failed:
            return [math.nan]
        return [r.error for r in self.rows if r.status == "ok"]

    @property
    def mean(self) -> float:
        e = self._errors()
        return statistics.fmean(e) if e else math.nan

    @property
    def median(self) -> float:
        e = self._errors()
        return statistics.median(e) if e else math.nan

    @property
    def runtime(self) -> float:
        return sum(r.runtime for r in self.rows)


def run_trial(cfg: ExperimentConfig, samples: datasets.SampleSet, index: int = 0, label: str = "",
              out_dir=None, checkpoint_every: int | None = 50) -> TrialRow:
    """Pretrain, train and score one run; artifacts go to ``out_dir``.

    The training state is checkpointed to ``state.mlrd`` every ``checkpoint_every``
    epochs and at the end (``None`` disables checkpoints).
    """
    chash = cfg.config_hash()
    seed = trial_seed(chash, index)
    out = Path(out_dir) if out_dir is not None else cfg.run_dir() / f"trial_{index:03d}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    dtype = {"float64": torch.float64, "float32": torch.float32}[cfg.dtype]
    t0 = time.time()
    try:
        model = init_params(cfg.arch(), samples.n, seed, dtype=dtype)
        tcfg = cfg.train_config(seed)
        pretrain(samples.X, model, tcfg)
        loss_csv = out / "loss.csv"
        if loss_csv.exists():
            loss_csv.unlink()
        ckpt = out / "state.mlrd" if checkpoint_every else None
        result, state = train(samples.X, samples.K, tcfg, model, loss_csv=loss_csv, checkpoint_path=ckpt,
                              checkpoint_every=checkpoint_every)
        with torch.no_grad():
            W = build_affinity(state.model.selfexpr.params(), keep_top=tcfg.keep_top)
        container.write(out / "affinity.mlrd", "affinity", {"W": W}, {"config_hash": chash})
        np.savetxt(out / "labels.txt", result.labels, fmt="%d")
        error = clustering_error(samples.labels, result.labels)
        status = "ok"
    except (TrainingError, ValueError, np.linalg.LinAlgError) as exc:
        log.error("trial %d (%s) aborted: %s", index, label, exc)
        error, status = math.nan, f"aborted: {exc}"
    return TrialRow(index=index, label=label, error=error, runtime=time.time() - t0, seed=seed,
                    status=status, artifact_dir=str(out))


def _trial_job(args):
    cfg, root, index, label = args
    samples = load_samples(cfg, root)
    return run_trial(cfg, samples, index, label, cfg.run_dir() / f"trial_{index:03d}")


def _run_jobs(jobs: list, workers: int) -> list[TrialRow]:
    if workers <= 1:
        return [_trial_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_trial_job, jobs))


def run_yaleb_sweep(K: int, template: ExperimentConfig | None = None, root=None, workers: int = 1,
                    starts: list[int] | None = None, exclude_failed: bool = False) -> TrialReport:
    """Run one trial per block of K consecutive subjects (39 - K trials unless ``starts`` is given)."""
    if not 10 <= K <= 38:
        raise ValueError("K must lie in 10..38")
    template = template or ExperimentConfig.preset("yaleb", subject_count=K)
    base = replace(template, dataset="yaleb", subject_count=K)
    all_starts = list(range(1, 40 - K))
    starts = all_starts if starts is None else starts
    if any(s not in all_starts for s in starts):
        raise ValueError(f"subject starts must lie in 1..{39 - K}")
    jobs = []
    for s in starts:
        cfg = replace(base, subject_start=s)
        jobs.append((cfg, root, s - 1, f"subjects {s}-{s + K - 1}"))
    rows = _run_jobs(jobs, workers)
    return TrialReport(name=f"yaleb_K{K}_{base.variant}", config_hash=replace(base, subject_start=1).config_hash(),
                       rows=rows, exclude_failed=exclude_failed)


def run_dataset(name: str, cfg: ExperimentConfig | None = None, root=None) -> TrialReport:
    if name not in ("orl", "coil20", "coil100"):
        raise ValueError("dataset must be orl, coil20 or coil100")
    cfg = cfg or ExperimentConfig.preset(name)
    row = _trial_job((cfg, root, 0, name))
    return TrialReport(name=f"{name}_{cfg.variant}", config_hash=cfg.config_hash(), rows=[row])


def run_sensitivity(K: int, template: ExperimentConfig | None = None, root=None, workers: int = 1,
                    starts: list[int] | None = None) -> list[tuple[str, TrialReport]]:
    template = template or ExperimentConfig.preset("yaleb", subject_count=K)
    out = []
    for s1, s2, s3 in SENSITIVITY_GRID:
        cfg = replace(template, lambda1=template.lambda1 * s1, lambda2=template.lambda2 * s2,
                      lambda3=template.lambda3 * s3)
        label = f"({s1:g}, {s2:g}, {s3:g})"
        out.append((label, run_yaleb_sweep(K, cfg, root, workers, starts)))
    return out


def sensitivity_table(grid: list[tuple[str, TrialReport]]) -> str:
    head = "scale (l1, l2, l3) | " + " | ".join(label for label, _ in grid)
    mean = "mean               | " + " | ".join(f"{r.mean:.2f}" for _, r in grid)
    median = "median             | " + " | ".join(f"{r.median:.2f}" for _, r in grid)
    return "\n".join([head, mean, median]) + "\n"


# ---------------------------------------------------------------------------
# baselines

def run_classic_baseline(samples: datasets.SampleSet, cfg: ClassicConfig, seed: int = 0) -> float:
    C = solve_iterative(samples.X, cfg)
    W = build_affinity(SelfExpressionParams(C, [np.zeros_like(C)]))
    return clustering_error(samples.labels, spectral_cluster(W, samples.K, seed).labels)


# ---------------------------------------------------------------------------
# reports

CSV_FIELDS = ("index", "label", "error", "runtime", "seed", "status", "artifact_dir")


def write_report_csv(report: TrialReport, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# report {report.name} config_hash {report.config_hash} exclude_failed {int(report.exclude_failed)}\n")
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in report.rows:
            w.writerow([r.index, r.label, repr(float(r.error)), repr(float(r.runtime)), r.seed, r.status, r.artifact_dir])


def read_report_csv(path) -> TrialReport:
    with open(path, newline="") as fh:
        header = fh.readline().split()
        name, chash, excl = header[2], header[4], bool(int(header[6]))
        rows = [TrialRow(index=int(r["index"]), label=r["label"], error=float(r["error"]),
                         runtime=float(r["runtime"]), seed=int(r["seed"]), status=r["status"],
                         artifact_dir=r["artifact_dir"]) for r in csv.DictReader(fh)]
    return TrialReport(name=name, config_hash=chash, rows=rows, exclude_failed=excl)


def format_table(reports: list[TrialReport]) -> str:
    lines = [f"{'report':<28} {'hash':<12} {'trials':>6} {'mean %':>8} {'median %':>9} {'runtime s':>10}"]
    for r in reports:
        lines.append(f"{r.name:<28} {r.config_hash:<12} {len(r.rows):>6} {r.mean:>8.2f} {r.median:>9.2f} "
                     f"{r.runtime:>10.1f}")
    return "\n".join(lines) + "\n"


def _plot_trial(row: TrialRow) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = []
    d = Path(row.artifact_dir)
    loss_csv = d / "loss.csv"
    if loss_csv.is_file():
        data = np.genfromtxt(loss_csv, delimiter=",", names=True)
        data = np.atleast_1d(data)
        fig, ax = plt.subplots(figsize=(6, 4))
        for name in ("recon", "exp", "lc", "ld", "total"):
            ax.plot(data["epoch"], data[name], label=name)
        for e in data["epoch"][data["q_updated"] > 0]:
            ax.axvline(e, color="grey", lw=0.5, ls=":")
        ax.set_yscale("symlog")
        ax.set_xlabel("epoch")
        ax.legend()
        ax.set_title(row.label or f"trial {row.index}")
        fig.tight_layout()
        fig.savefig(d / "loss.png", dpi=100)
        plt.close(fig)
        out.append(d / "loss.png")
    aff = d / "affinity.mlrd"
    if aff.is_file():
        W = container.read(aff, "affinity")[0]["W"]
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.imshow(W, cmap="viridis", interpolation="nearest")
        ax.set_title("affinity")
        fig.tight_layout()
        fig.savefig(d / "affinity.png", dpi=100)
        plt.close(fig)
        out.append(d / "affinity.png")
    return out


def emit_report(reports: list[TrialReport], out_dir, plots: bool = True) -> list[Path]:
    """Write one CSV per report, a combined text table, and per-trial plots."""
    if not reports:
        raise ValueError("emit_report needs at least one report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for r in reports:
        p = out_dir / f"{r.name}_{r.config_hash}.csv"
        write_report_csv(r, p)
        written.append(p)
        if plots:
            for row in r.rows:
                written.extend(_plot_trial(row))
    table = out_dir / "summary.txt"
    table.write_text(format_table(reports))
    written.append(table)
    return written
