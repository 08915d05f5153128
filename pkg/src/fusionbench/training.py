"""Training loop, evaluation, and the three-seed evaluation protocol."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Callable

import numpy as np
import torch

from .data import MultimodalDataset, SplitSpec, split
from .fusion import FusionConfig, FusionModel
from .metrics import METRICS, compute_metric

log = logging.getLogger(__name__)

OPTIMIZERS = ("adamw", "rmsprop", "adam")
N_PROTOCOL_SEEDS = 3


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    optimizer: str = "adamw"
    epochs: int = 30
    batch_size: int = 64
    freeze_encoders: bool = False
    seed: int = 0
    early_stop_patience: int = 5
    val_metric: str = "accuracy"
    metrics: tuple = ("accuracy", "macro_f1", "auprc")

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {', '.join(OPTIMIZERS)}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        for m in (self.val_metric, *self.metrics):
            if m not in METRICS:
                raise ValueError(f"unknown metric {m!r}")
        object.__setattr__(self, "metrics", tuple(self.metrics))


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8,
                                weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8,
                                 weight_decay=cfg.weight_decay)
    return torch.optim.RMSprop(params, lr=cfg.lr, alpha=0.99, eps=1e-8,
                               weight_decay=cfg.weight_decay)


@dataclass
class RunResult:
    seed: int
    train_loss: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("nan")
    test_metrics: dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0


def to_tensors(ds: MultimodalDataset) -> list[torch.Tensor]:
    return [torch.from_numpy(np.ascontiguousarray(a)) for a in ds.arrays]


@torch.no_grad()
def predict_proba(model: FusionModel, ds: MultimodalDataset, batch_size: int = 512) -> np.ndarray:
    was_training = model.training
    model.eval()
    xs = to_tensors(ds)
    out = [model.predict_proba([x[i:i + batch_size] for x in xs])
           for i in range(0, ds.n_samples, batch_size)]
    model.train(was_training)
    return np.concatenate(out)


def evaluate(model: FusionModel, ds: MultimodalDataset, metrics=("accuracy",)) -> dict[str, float]:
    probs = predict_proba(model, ds)
    out = {}
    for name in metrics:
        if name == "mse":
            onehot = np.eye(probs.shape[1])[ds.labels]
            out[name] = compute_metric(name, probs, onehot)
        else:
            out[name] = compute_metric(name, probs, ds.labels)
    return out


def _better(a: float, b: float, metric: str) -> bool:
    return a < b if metric == "mse" else a > b


def train(model: FusionModel, splits, cfg: TrainConfig,
          report: Callable[[int, float], None] | None = None):
    """Train ``model`` in place on ``splits = (train, val, test)``.

    ``report(epoch, val_value)`` is called after each epoch; it may raise to
    abort (this is how pruning stops a trial). The parameters of the best
    validation epoch are restored before test evaluation.
    """
    train_ds, val_ds, test_ds = splits
    for name, ds in zip(("train", "val", "test"), splits):
        if ds.n_samples == 0:
            raise TrainingError(f"empty {name} split")
    start = time.perf_counter()
    result = RunResult(seed=cfg.seed)

    frozen = model.encoder_parameters() if cfg.freeze_encoders else []
    trainable = model.head_parameters() if cfg.freeze_encoders else list(model.parameters())
    for p in frozen:
        p.requires_grad_(False)

    xs = to_tensors(train_ds)
    y = torch.from_numpy(train_ds.labels)
    rng = np.random.default_rng(cfg.seed)
    best_state, stale = None, 0
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            opt = make_optimizer(trainable, cfg)
            for epoch in range(cfg.epochs):
                model.train()
                order = rng.permutation(train_ds.n_samples)
                total, count = 0.0, 0
                for i in range(0, len(order), cfg.batch_size):
                    idx = torch.from_numpy(order[i:i + cfg.batch_size])
                    loss = model.loss([x[idx] for x in xs], y[idx])
                    if not torch.isfinite(loss):
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch}, batch {i // cfg.batch_size} "
                            f"(optimizer={cfg.optimizer}, lr={cfg.lr:g})")
                    opt.zero_grad(set_to_none=True)
                    loss.backward()
                    opt.step()
                    total += loss.item() * len(idx)
                    count += len(idx)
                result.train_loss.append(total / count)

                val = evaluate(model, val_ds, (cfg.val_metric,))[cfg.val_metric]
                result.val_history.append(val)
                if best_state is None or _better(val, result.best_val, cfg.val_metric):
                    result.best_val, result.best_epoch = val, epoch
                    best_state, stale = copy.deepcopy(model.state_dict()), 0
                else:
                    stale += 1
                if report is not None:
                    report(epoch, val)
                if stale >= cfg.early_stop_patience:
                    log.debug("early stop at epoch %d", epoch)
                    break
    finally:
        for p in frozen:
            p.requires_grad_(True)

    model.load_state_dict(best_state)
    model.eval()
    result.test_metrics = evaluate(model, test_ds, cfg.metrics)
    result.wall_time = time.perf_counter() - start
    return model, result


def aggregate_runs(results) -> dict[str, tuple[float, float]]:
    """Mean and population standard deviation (divisor n) per metric."""
    per_run = [r.test_metrics if isinstance(r, RunResult) else r for r in results]
    if not per_run:
        raise ValueError("no runs to aggregate")
    out = {}
    for name in per_run[0]:
        values = np.array([m[name] for m in per_run], dtype=np.float64)
        out[name] = (float(values.mean()), float(np.sqrt(np.mean((values - values.mean()) ** 2))))
    return out


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha1(blob.encode()).hexdigest()


@dataclass
class ExperimentRecord:
    dataset: str
    architecture: str
    config: dict
    seeds: list[int]
    per_seed: list[dict[str, float]]
    aggregate: dict[str, tuple[float, float]]
    config_hash: str = ""
    started: str = ""
    finished: str = ""
    val_is_test: bool = False
    runs: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aggregate"] = {k: {"mean": m, "std": s} for k, (m, s) in self.aggregate.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        d = dict(d)
        d["aggregate"] = {k: (v["mean"], v["std"]) for k, v in d["aggregate"].items()}
        return cls(**d)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def run_protocol(fusion_cfg: FusionConfig, dataset: MultimodalDataset, base: TrainConfig,
                 split_spec: SplitSpec = SplitSpec(), dataset_name: str = "dataset",
                 val_is_test: bool = False, config: dict | None = None) -> ExperimentRecord:
    """Train and test with seeds ``base.seed + 0, 1, 2``; aggregate mean and population std."""
    train_ds, val_ds, test_ds = split(dataset, split_spec)
    if val_is_test:
        val_ds = test_ds
    started = _now()
    seeds = [base.seed + i for i in range(N_PROTOCOL_SEEDS)]
    results = []
    for seed in seeds:
        cfg = TrainConfig(**{**asdict(base), "seed": seed})
        model = FusionModel(fusion_cfg, dataset.shapes, seed=seed)
        _, res = train(model, (train_ds, val_ds, test_ds), cfg)
        log.info("%s seed=%d %s", fusion_cfg.architecture, seed, res.test_metrics)
        results.append(res)
    config = config if config is not None else {
        "fusion": asdict(fusion_cfg), "train": asdict(base), "split": asdict(split_spec)}
    return ExperimentRecord(
        dataset=dataset_name,
        architecture=fusion_cfg.architecture,
        config=config,
        seeds=seeds,
        per_seed=[r.test_metrics for r in results],
        aggregate=aggregate_runs(results),
        config_hash=config_hash(config),
        started=started,
        finished=_now(),
        val_is_test=val_is_test,
        runs=[{"seed": r.seed, "train_loss": r.train_loss, "val_history": r.val_history,
               "best_epoch": r.best_epoch, "wall_time": r.wall_time} for r in results],
    )
