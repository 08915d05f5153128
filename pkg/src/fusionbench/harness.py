"""End-to-end experiment pipeline: load data, optionally tune, run the protocol, report.

Configuration is a YAML document; see README.md for the full schema.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import yaml
from filelock import FileLock

from . import hpo
from .data import (
    ContainerError,
    GeneratorSpec,
    MultimodalDataset,
    SplitSpec,
    generate,
    read_dataset,
    split,
    write_dataset,
)
from .encoders import EncoderConfig
from .fusion import ARCHITECTURES, FusionConfig, FusionModel, check_arity
from .metrics import METRICS, PERCENT_METRICS
from .training import (
    ExperimentRecord,
    TrainConfig,
    config_hash,
    run_protocol,
    train,
)

log = logging.getLogger(__name__)

RESULTS_FILE = "results.jsonl"
VAL_IS_TEST_MARK = "†"


class HarnessError(Exception):
    code = "E_RUNTIME"
    exit_status = 1

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class ConfigError(HarnessError):
    code = "E_CONFIG"
    exit_status = 2


@dataclass
class ExperimentConfig:
    name: str = "synthetic"
    dataset_path: str | None = None
    generator: GeneratorSpec | None = None
    split: SplitSpec = field(default_factory=SplitSpec)
    val_is_test: bool = False
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    space: hpo.SearchSpace | None = None
    n_trials: int = 10
    sampler: str = "tpe"
    output: str = "results"
    sweep_redundancy: list[float] = field(default_factory=lambda: [0.0, 0.5, 1.0])
    sweep_architectures: list[str] = field(default_factory=lambda: ["concat", "caf"])
    raw: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.train.seed

    def echo(self) -> dict:
        """Canonical, JSON-serializable view used for hashing and records."""
        return {
            "name": self.name,
            "dataset_path": self.dataset_path,
            "generator": self.generator.to_dict() if self.generator else None,
            "split": asdict(self.split),
            "val_is_test": self.val_is_test,
            "fusion": asdict(self.fusion),
            "train": asdict(self.train),
            "space": self.space.to_dict() if self.space else None,
            "n_trials": self.n_trials if self.space else None,
            "sampler": self.sampler if self.space else None,
        }


def _section(cfg: dict, key: str) -> dict:
    value = cfg.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"config section {key!r} must be a mapping")
    return value


def parse_config(cfg: dict) -> ExperimentConfig:
    try:
        return _parse_config(cfg)
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, HarnessError):
            raise
        raise ConfigError(f"invalid config: {exc}") from exc


def _parse_config(cfg: dict) -> ExperimentConfig:
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    ds = _section(cfg, "dataset")
    if "path" in ds and "generator" in ds:
        raise ConfigError("dataset: give either 'path' or 'generator', not both")
    generator = GeneratorSpec.from_dict(ds["generator"]) if "generator" in ds else None
    split_cfg = dict(_section(cfg, "split"))
    val_is_test = bool(split_cfg.pop("val_is_test", False))
    if "fractions" in split_cfg:
        split_cfg["fractions"] = tuple(split_cfg["fractions"])
    model = dict(_section(cfg, "model"))
    arch = model.pop("architecture", "concat")
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHITECTURES)}")
    n_classes = model.pop("n_classes", None) or (generator.n_classes if generator else 2)
    kernel_size = model.pop("kernel_size", 3)
    enc = {k: model.pop(k) for k in ("d_model", "n_heads", "ff_mult", "dropout",
                                     "max_seq_len", "positional") if k in model}
    modality_layers = model.pop("modality_layers", 1)
    fusion_layers = model.pop("fusion_layers", 2)
    if model:
        raise ConfigError(f"model: unknown keys {sorted(model)}")
    base = EncoderConfig(**enc)
    fusion = FusionConfig(arch, n_classes, replace(base, n_layers=modality_layers),
                          replace(base, n_layers=fusion_layers), kernel_size)

    train_cfg = dict(_section(cfg, "train"))
    if "metrics" in cfg:
        train_cfg["metrics"] = tuple(cfg["metrics"])
    for m in train_cfg.get("metrics", ()):
        if m not in METRICS:
            raise ConfigError(f"unknown metric {m!r}; choose from {', '.join(METRICS)}")
    if "seed" in cfg:
        train_cfg["seed"] = int(cfg["seed"])
    train_cfg = TrainConfig(**train_cfg)

    space, n_trials, sampler = None, 10, "tpe"
    if cfg.get("search"):
        search = dict(cfg["search"])
        n_trials = int(search.pop("n_trials", 10))
        sampler = search.pop("sampler", "tpe")
        if sampler not in ("tpe", "random"):
            raise ConfigError(f"search.sampler must be 'tpe' or 'random', got {sampler!r}")
        s = search.pop("space", {}) or {}
        space = hpo.SearchSpace.default(
            search_freeze=bool(s.get("freeze_encoders", False)),
            lr=tuple(s.get("lr", (1e-5, 1e-3))),
            weight_decay=tuple(s.get("weight_decay", (1e-6, 1e-2))),
            optimizers=tuple(s.get("optimizer", ("adamw", "rmsprop", "adam"))))
        if search:
            raise ConfigError(f"search: unknown keys {sorted(search)}")

    sweep = _section(cfg, "sweep")
    out = ExperimentConfig(
        name=cfg.get("name", "synthetic"),
        dataset_path=ds.get("path"),
        generator=generator,
        split=SplitSpec(**split_cfg),
        val_is_test=val_is_test,
        fusion=fusion,
        train=train_cfg,
        space=space,
        n_trials=n_trials,
        sampler=sampler,
        output=cfg.get("output", "results"),
        raw=copy.deepcopy(cfg),
    )
    if "redundancy" in sweep:
        out.sweep_redundancy = [float(r) for r in sweep["redundancy"]]
    if "architectures" in sweep:
        out.sweep_architectures = list(sweep["architectures"])
    return out


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found", code="E_NOFILE")
    try:
        cfg = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}".replace("\n", " ")) from exc
    return parse_config(cfg)


def output_dir(cfg: ExperimentConfig, override: str | None = None) -> Path:
    return Path(override or os.environ.get("MBPP_OUT") or cfg.output)


def load_dataset(cfg: ExperimentConfig) -> MultimodalDataset:
    if cfg.dataset_path:
        try:
            return read_dataset(cfg.dataset_path)
        except FileNotFoundError as exc:
            raise ConfigError(str(exc), code="E_DATASET") from exc
        except ContainerError as exc:
            raise HarnessError(str(exc), code="E_DATASET") from exc
    if cfg.generator is None:
        raise ConfigError("dataset: need 'path' or 'generator'", code="E_DATASET")
    return generate(cfg.generator)


# ---------------------------------------------------------------------------
# result store
# ---------------------------------------------------------------------------

def append_record(store: Path, record: ExperimentRecord) -> None:
    store.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps(record.to_dict(), sort_keys=True) + "\n"
    with FileLock(str(store) + ".lock"):
        with open(store, "a") as fh:
            fh.write(line)


def read_records(store) -> list[ExperimentRecord]:
    store = Path(store)
    if not store.exists():
        return []
    return [ExperimentRecord.from_dict(json.loads(line))
            for line in store.read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, out_path, force: bool = False) -> MultimodalDataset:
    if cfg.generator is None:
        raise ConfigError("gen-data needs dataset.generator in the config")
    out_path = Path(out_path)
    if out_path.exists() and any(out_path.iterdir()) and not force:
        raise ConfigError(f"{out_path} exists; pass --force to overwrite", code="E_EXISTS")
    ds = generate(cfg.generator)
    write_dataset(ds, out_path)
    return ds


def _tune(cfg: ExperimentConfig, ds: MultimodalDataset, store_dir: Path) -> TrainConfig:
    splits = split(ds, cfg.split)
    if cfg.val_is_test:
        splits = (splits[0], splits[2], splits[2])

    def objective(trial: hpo.Trial) -> float:
        tcfg = replace(cfg.train, **trial.params)
        # fresh model per trial: no state carried over from earlier trials
        model = FusionModel(cfg.fusion, ds.shapes, seed=cfg.train.seed)

        def report(epoch, value):
            trial.report(value, epoch)
            if trial.should_prune():
                raise hpo.TrialPruned()

        model, res = train(model, splits, tcfg, report=report)
        trial.set_checkpoint({k: v.detach().cpu().numpy() for k, v in model.state_dict().items()})
        return -res.best_val if tcfg.val_metric == "mse" else res.best_val

    sampler = (hpo.TPESampler(seed=cfg.train.seed) if cfg.sampler == "tpe"
               else hpo.RandomSampler(seed=cfg.train.seed))
    result = hpo.run_study(objective, cfg.space, cfg.n_trials, sampler, hpo.MedianPruner(), store_dir)
    if result.best is None:
        raise HarnessError("no trial completed", code="E_STUDY")
    log.info("best trial %d: %s (%.4f)", result.best_trial, result.best_params, result.best_value)
    return replace(cfg.train, **result.best_params)


def cmd_run(cfg: ExperimentConfig, out: str | None = None,
            dataset: MultimodalDataset | None = None) -> ExperimentRecord:
    ds = dataset if dataset is not None else load_dataset(cfg)
    check_arity(cfg.fusion.architecture, ds.n_modalities)
    if cfg.fusion.n_classes != ds.n_classes:
        raise ConfigError(f"model.n_classes={cfg.fusion.n_classes} but dataset has {ds.n_classes}")
    outdir = output_dir(cfg, out)
    echo = cfg.echo()
    h = config_hash(echo)
    train_cfg = cfg.train
    study_dir = None
    if cfg.space is not None:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
        study_dir = outdir / "studies" / f"{h[:12]}-{stamp}"
        train_cfg = _tune(cfg, ds, study_dir)
    record = run_protocol(cfg.fusion, ds, train_cfg, cfg.split, dataset_name=cfg.name,
                          val_is_test=cfg.val_is_test, config=echo)
    record.config_hash = h
    if study_dir is not None:
        record.config = {**echo, "selected_train": asdict(train_cfg), "study": str(study_dir)}
    append_record(outdir / RESULTS_FILE, record)
    return record


def format_cell(metric: str, mean: float, std: float) -> str:
    if metric in PERCENT_METRICS:
        return f"{100 * mean:.2f} ({100 * std:.2f})"
    return f"{mean:.4f} ({std:.4f})"


def report_rows(records: list[ExperimentRecord]):
    latest: dict[tuple[str, str], ExperimentRecord] = {}
    for r in records:
        latest[(r.dataset, r.architecture)] = r
    metrics = [m for m in METRICS if any(m in r.aggregate for r in latest.values())]
    return metrics, list(latest.values())


def cmd_report(store, fmt: str = "md") -> str:
    if fmt not in ("md", "csv"):
        raise ConfigError(f"unknown format {fmt!r}; use md or csv")
    metrics, rows = report_rows(read_records(store))
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "architecture", "val_is_test"]
                   + [c for m in metrics for c in (m, f"{m}_mean", f"{m}_std")])
        for r in rows:
            cells = []
            for m in metrics:
                if m in r.aggregate:
                    mean, std = r.aggregate[m]
                    cells += [format_cell(m, mean, std), repr(mean), repr(std)]
                else:
                    cells += ["", "", ""]
            w.writerow([r.dataset, r.architecture, int(r.val_is_test)] + cells)
        return buf.getvalue()
    lines = ["| " + " | ".join(["dataset", "architecture", *metrics]) + " |",
             "|" + "---|" * (2 + len(metrics))]
    for r in rows:
        cells = [format_cell(m, *r.aggregate[m]) if m in r.aggregate else "" for m in metrics]
        name = f"{r.dataset}{VAL_IS_TEST_MARK if r.val_is_test else ''}"
        lines.append("| " + " | ".join([name, r.architecture, *cells]) + " |")
    notes = []
    if any(r.val_is_test for r in rows):
        notes.append(f"{VAL_IS_TEST_MARK} validation set aliased to the test set (model selection saw test data).")
    if "macro_f1" in metrics:
        notes.append("macro_f1 averages per-class F1 over classes present in predictions or targets; "
                     "auprc is macro one-vs-rest over classes with positives.")
    if notes and rows:
        lines += [""] + notes
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> dict[tuple[str, str], dict[str, tuple[float, float]]]:
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        agg = {}
        for key, value in row.items():
            if key.endswith("_mean") and value:
                m = key[: -len("_mean")]
                agg[m] = (float(value), float(row[f"{m}_std"]))
        out[(row["dataset"], row["architecture"])] = agg
    return out


@dataclass
class SweepReport:
    redundancy: list[float]
    architectures: list[str]
    records: list[ExperimentRecord]
    accuracy: dict[tuple[float, str], tuple[float, float]]

    def delta(self, rho: float, arch: str) -> float:
        return self.accuracy[(rho, arch)][0] - self.accuracy[(rho, "concat")][0]

    def table(self) -> str:
        fusers = [a for a in self.architectures if a != "concat"]
        head = ["redundancy", *self.architectures, *(f"delta({a} - concat)" for a in fusers)]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for rho in self.redundancy:
            cells = [f"{rho:g}"]
            cells += [format_cell("accuracy", *self.accuracy[(rho, a)]) for a in self.architectures]
            cells += [f"{100 * self.delta(rho, a):+.2f}" for a in fusers]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def cmd_redundancy_sweep(cfg: ExperimentConfig, redundancy=None, architectures=None,
                         out: str | None = None) -> SweepReport:
    if cfg.generator is None:
        raise ConfigError("sweep-redundancy needs dataset.generator in the config")
    redundancy = list(cfg.sweep_redundancy if redundancy is None else redundancy)
    architectures = list(cfg.sweep_architectures if architectures is None else architectures)
    for a in architectures:
        if a not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {a!r}")
        check_arity(a, len(cfg.generator.modalities))
    if "concat" not in architectures:
        architectures = ["concat", *architectures]
    records, acc = [], {}
    for rho in redundancy:
        gen = replace(cfg.generator, redundancy=rho)
        ds = generate(gen)
        for arch in architectures:
            run_cfg = replace(cfg, name=f"{cfg.name}-rho{rho:g}", generator=gen,
                              fusion=replace(cfg.fusion, architecture=arch))
            rec = cmd_run(run_cfg, out=out, dataset=ds)
            records.append(rec)
            acc[(rho, arch)] = rec.aggregate["accuracy"]
    return SweepReport(redundancy, architectures, records, acc)
