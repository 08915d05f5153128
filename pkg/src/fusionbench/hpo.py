"""Hyper-parameter search: samplers (random, TPE), median pruning, studies and checkpoints.

Objectives are maximized. An objective receives a :class:`Trial`, reads the
sampled values from ``trial.params``, reports intermediate values with
``trial.report(value, step)`` and raises :class:`TrialPruned` when
``trial.should_prune()`` says so.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.special import ndtr
from scipy.stats import truncnorm

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MBCK"
CHECKPOINT_VERSION = 1


class TrialPruned(Exception):
    """Raised inside an objective to stop an unpromising trial."""


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# search space
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def __post_init__(self):
        if not 0 < self.low < self.high:
            raise ValueError(f"log-uniform bounds need 0 < low < high, got ({self.low}, {self.high})")

    def clip(self, v: float) -> float:
        return float(min(max(v, self.low), self.high))


@dataclass(frozen=True)
class Categorical:
    choices: tuple

    def __post_init__(self):
        if not self.choices:
            raise ValueError("categorical dimension needs at least one choice")
        object.__setattr__(self, "choices", tuple(self.choices))


@dataclass(frozen=True)
class SearchSpace:
    dims: Mapping[str, LogUniform | Categorical]

    @classmethod
    def default(cls, search_freeze: bool = False, lr=(1e-5, 1e-3), weight_decay=(1e-6, 1e-2),
                optimizers=("adamw", "rmsprop", "adam")) -> "SearchSpace":
        dims = {"lr": LogUniform(*lr), "weight_decay": LogUniform(*weight_decay),
                "optimizer": Categorical(tuple(optimizers))}
        if search_freeze:
            dims["freeze_encoders"] = Categorical((True, False))
        return cls(dims)

    def contains(self, params: Mapping) -> bool:
        for name, d in self.dims.items():
            v = params[name]
            if isinstance(d, LogUniform) and not d.low <= v <= d.high:
                return False
            if isinstance(d, Categorical) and v not in d.choices:
                return False
        return True

    def to_dict(self) -> dict:
        return {name: ({"log_uniform": [d.low, d.high]} if isinstance(d, LogUniform)
                       else {"categorical": list(d.choices)})
                for name, d in self.dims.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SearchSpace":
        dims = {}
        for name, spec in d.items():
            if "log_uniform" in spec:
                dims[name] = LogUniform(*spec["log_uniform"])
            elif "categorical" in spec:
                dims[name] = Categorical(tuple(spec["categorical"]))
            else:
                raise ValueError(f"search space dimension {name!r}: unknown kind")
        return cls(dims)


def _check_space(space: SearchSpace):
    if not space.dims:
        raise ValueError("search space is empty")


def sample_independent(space: SearchSpace, rng: np.random.Generator) -> dict:
    _check_space(space)
    params = {}
    for name, d in space.dims.items():
        if isinstance(d, LogUniform):
            params[name] = d.clip(math.exp(rng.uniform(math.log(d.low), math.log(d.high))))
        else:
            params[name] = d.choices[int(rng.integers(len(d.choices)))]
    return params


# ---------------------------------------------------------------------------
# TPE
# ---------------------------------------------------------------------------

@dataclass
class _Parzen:
    """Truncated Gaussian mixture on [low, high] (log space for log-uniform dims)."""

    mus: np.ndarray
    sigmas: np.ndarray
    weights: np.ndarray
    low: float
    high: float

    @classmethod
    def fit(cls, points, low: float, high: float, prior_weight: float) -> "_Parzen":
        width = high - low
        prior_mu = 0.5 * (low + high)
        mus = np.r_[np.asarray(points, dtype=np.float64), prior_mu]
        order = np.argsort(mus)
        srt = np.r_[low, mus[order], high]
        gaps = np.maximum(srt[1:-1] - srt[:-2], srt[2:] - srt[1:-1])
        sigmas = np.empty_like(mus)
        sigmas[order] = gaps
        sigmas = np.clip(sigmas, width / min(100.0, 1.0 + len(mus)), width)
        sigmas[-1] = width
        weights = np.r_[np.ones(len(points)), prior_weight]
        return cls(mus, sigmas, weights / weights.sum(), low, high)

    def _mass(self):
        return ndtr((self.high - self.mus) / self.sigmas) - ndtr((self.low - self.mus) / self.sigmas)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        comp = rng.choice(len(self.mus), size=size, p=self.weights)
        mu, sd = self.mus[comp], self.sigmas[comp]
        a, b = (self.low - mu) / sd, (self.high - mu) / sd
        return truncnorm.rvs(a, b, loc=mu, scale=sd, random_state=rng)

    def log_pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[:, None]
        z = (x - self.mus) / self.sigmas
        dens = np.exp(-0.5 * z**2) / (math.sqrt(2 * math.pi) * self.sigmas) / self._mass()
        return np.log(np.maximum(dens @ self.weights, 1e-300))


def _categorical_probs(values, choices, prior_weight: float) -> np.ndarray:
    counts = np.array([sum(v == c for v in values) for c in choices], dtype=np.float64)
    p = counts + prior_weight / len(choices)
    return p / p.sum()


def tpe_propose(history, space: SearchSpace, gamma: float = 0.25, n_candidates: int = 24,
                rng: np.random.Generator | None = None, prior_weight: float = 1.0) -> dict:
    """Propose the candidate with the best good/bad density ratio.

    ``history`` is a sequence of ``(params, value)`` for completed trials.
    """
    _check_space(space)
    rng = rng if rng is not None else np.random.default_rng()
    if len(history) < 2:
        return sample_independent(space, rng)
    ranked = sorted(range(len(history)), key=lambda i: -history[i][1])  # stable: ties keep order
    n_good = max(1, math.ceil(gamma * len(history)))
    good = [history[i][0] for i in ranked[:n_good]]
    bad = [history[i][0] for i in ranked[n_good:]]

    candidates = [{} for _ in range(n_candidates)]
    score = np.zeros(n_candidates)
    for name, d in space.dims.items():
        if isinstance(d, LogUniform):
            lo, hi = math.log(d.low), math.log(d.high)
            l = _Parzen.fit([math.log(p[name]) for p in good], lo, hi, prior_weight)
            g = _Parzen.fit([math.log(p[name]) for p in bad], lo, hi, prior_weight)
            xs = l.sample(rng, n_candidates)
            score += l.log_pdf(xs) - g.log_pdf(xs)
            for c, x in zip(candidates, xs):
                c[name] = d.clip(math.exp(x))
        else:
            pl = _categorical_probs([p[name] for p in good], d.choices, prior_weight)
            pg = _categorical_probs([p[name] for p in bad], d.choices, prior_weight)
            idx = rng.choice(len(d.choices), size=n_candidates, p=pl)
            score += np.log(pl[idx]) - np.log(pg[idx])
            for c, i in zip(candidates, idx):
                c[name] = d.choices[int(i)]
    return candidates[int(np.argmax(score))]


class RandomSampler:
    def __init__(self, seed: int | None = None):
        self.rng = np.random.default_rng(seed)

    def sample(self, space: SearchSpace, history=()) -> dict:
        return sample_independent(space, self.rng)


class TPESampler:
    def __init__(self, seed: int | None = None, gamma: float = 0.25, n_startup_trials: int = 10,
                 n_candidates: int = 24, prior_weight: float = 1.0):
        self.rng = np.random.default_rng(seed)
        self.gamma, self.n_startup_trials = gamma, n_startup_trials
        self.n_candidates, self.prior_weight = n_candidates, prior_weight

    def sample(self, space: SearchSpace, history=()) -> dict:
        if len(history) < self.n_startup_trials:
            return sample_independent(space, self.rng)
        return tpe_propose(history, space, self.gamma, self.n_candidates, self.rng, self.prior_weight)


def sample(space: SearchSpace, sampler, history=()) -> dict:
    return sampler.sample(space, history)


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------

def should_prune(value: float, completed_values, step: int, warmup: int = 3) -> bool:
    """Median rule: prune when ``value`` is below the median of completed trials at ``step``."""
    if step < warmup:
        return False
    others = [v for v in completed_values if v is not None and not math.isnan(v)]
    if not others:
        return False
    return value < float(np.median(others))


class MedianPruner:
    def __init__(self, warmup_steps: int = 3):
        self.warmup_steps = warmup_steps

    def prune(self, trial: "TrialConfig", completed: list["TrialConfig"]) -> bool:
        if not trial.intermediate:
            return False
        step = max(trial.intermediate)
        others = [t.intermediate[step] for t in completed if step in t.intermediate]
        return should_prune(trial.intermediate[step], others, step, self.warmup_steps)


class NopPruner:
    def prune(self, trial, completed) -> bool:
        return False


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, tensors: Mapping[str, np.ndarray], trial_config: dict) -> None:
    cfg = json.dumps(trial_config, sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg,
           struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        key = name.encode()
        out.append(struct.pack("<I", len(key)) + key)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    version, cfg_len = take("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version {version} != {CHECKPOINT_VERSION}")
    cfg = json.loads(raw[pos:pos + cfg_len].decode())
    pos += cfg_len
    (n,) = take("<I")
    tensors = {}
    for _ in range(n):
        (klen,) = take("<I")
        name = raw[pos:pos + klen].decode()
        pos += klen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        nbytes = 4 * math.prod(shape)
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated tensor {name!r}")
        tensors[name] = np.frombuffer(raw[pos:pos + nbytes], dtype="<f4").reshape(shape).copy()
        pos += nbytes
    return tensors, cfg


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

@dataclass
class TrialConfig:
    trial_id: int
    params: dict
    state: str = "running"
    intermediate: dict[int, float] = field(default_factory=dict)
    value: float | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {"trial_id": self.trial_id, "params": self.params, "state": self.state,
                "value": self.value}


class Trial:
    """Handle passed to the objective for one trial."""

    def __init__(self, record: TrialConfig, study: "Study"):
        self._record, self._study = record, study
        self.checkpoint: dict[str, np.ndarray] | None = None

    @property
    def number(self) -> int:
        return self._record.trial_id

    @property
    def params(self) -> dict:
        return dict(self._record.params)

    def report(self, value: float, step: int) -> None:
        self._record.intermediate[step] = float(value)
        self._study._event("reported", self._record, step=step, value=float(value))

    def should_prune(self) -> bool:
        return self._study.pruner.prune(self._record, self._study.completed())

    def set_checkpoint(self, tensors: Mapping[str, np.ndarray]) -> None:
        self.checkpoint = {k: np.asarray(v, dtype=np.float32) for k, v in tensors.items()}


@dataclass
class StudyResult:
    trials: list[TrialConfig]
    best_trial: int | None
    best_checkpoint: str | None = None

    @property
    def best(self) -> TrialConfig | None:
        return None if self.best_trial is None else self.trials[self.best_trial]

    @property
    def best_value(self) -> float | None:
        return None if self.best is None else self.best.value

    @property
    def best_params(self) -> dict | None:
        return None if self.best is None else self.best.params


def _best_of(trials) -> int | None:
    best = None
    for t in trials:
        # strict > keeps the earliest trial on ties
        if t.state == "complete" and (best is None or t.value > trials[best].value):
            best = t.trial_id
    return best


class Study:
    """Sequential trial loop with an append-only JSON-lines event store.

    ``store`` is a directory; events go to ``trials.jsonl`` and the best
    checkpoint to ``checkpoints/trial_<id>.mbck``.
    """

    def __init__(self, space: SearchSpace, sampler=None, pruner=None, store=None):
        _check_space(space)
        self.space = space
        self.sampler = sampler if sampler is not None else TPESampler()
        self.pruner = pruner if pruner is not None else MedianPruner()
        self.store = Path(store) if store is not None else None
        self.trials: list[TrialConfig] = []
        self.best_checkpoint: str | None = None
        if self.store is not None:
            (self.store / "checkpoints").mkdir(parents=True, exist_ok=True)

    def completed(self) -> list[TrialConfig]:
        return [t for t in self.trials if t.state == "complete"]

    def _event(self, kind: str, t: TrialConfig, **extra):
        if self.store is None:
            return
        rec = {"event": kind, "trial": t.trial_id, **extra}
        with open(self.store / "trials.jsonl", "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def _save_best(self, t: TrialConfig, checkpoint):
        if self.store is None or checkpoint is None:
            return
        path = self.store / "checkpoints" / f"trial_{t.trial_id:04d}.mbck"
        save_checkpoint(path, checkpoint, t.to_dict())
        if self.best_checkpoint and self.best_checkpoint != str(path):
            Path(self.best_checkpoint).unlink(missing_ok=True)
        self.best_checkpoint = str(path)

    def optimize(self, objective: Callable[[Trial], float], n_trials: int = 10) -> StudyResult:
        if n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        for _ in range(n_trials):
            history = [(t.params, t.value) for t in self.completed()]
            rec = TrialConfig(len(self.trials), sample(self.space, self.sampler, history))
            self.trials.append(rec)
            self._event("sampled", rec, config=rec.params)
            trial = Trial(rec, self)
            try:
                value = float(objective(trial))
                if math.isnan(value):
                    raise ValueError("objective returned NaN")
            except TrialPruned:
                rec.state = "pruned"
                self._event("pruned", rec, step=max(rec.intermediate, default=None))
                continue
            except Exception as exc:  # noqa: BLE001 - a failing trial must not stop the study
                rec.state, rec.error = "failed", f"{type(exc).__name__}: {exc}"
                log.warning("trial %d failed: %s", rec.trial_id, rec.error)
                self._event("failed", rec, error=rec.error)
                continue
            prev_best = _best_of(self.trials[:-1])
            rec.state, rec.value = "complete", value
            self._event("complete", rec, value=value, config=rec.params)
            if prev_best is None or value > self.trials[prev_best].value:
                self._save_best(rec, trial.checkpoint)
        return self.result()

    def result(self) -> StudyResult:
        return StudyResult(list(self.trials), _best_of(self.trials), self.best_checkpoint)


def run_study(objective, space: SearchSpace, n_trials: int = 10, sampler=None, pruner=None,
              store=None) -> StudyResult:
    return Study(space, sampler, pruner, store).optimize(objective, n_trials)


def replay_study(store) -> StudyResult:
    """Rebuild the trial ledger from a study store."""
    store = Path(store)
    trials: dict[int, TrialConfig] = {}
    for line in (store / "trials.jsonl").read_text().splitlines():
        ev = json.loads(line)
        tid = ev["trial"]
        if ev["event"] == "sampled":
            trials[tid] = TrialConfig(tid, ev["config"])
        elif ev["event"] == "reported":
            trials[tid].intermediate[ev["step"]] = ev["value"]
        elif ev["event"] == "complete":
            trials[tid].state, trials[tid].value = "complete", ev["value"]
        elif ev["event"] == "pruned":
            trials[tid].state = "pruned"
        elif ev["event"] == "failed":
            trials[tid].state, trials[tid].error = "failed", ev.get("error")
    ordered = [trials[i] for i in sorted(trials)]
    best = _best_of(ordered)
    ckpt = None
    if best is not None:
        path = store / "checkpoints" / f"trial_{best:04d}.mbck"
        ckpt = str(path) if path.exists() else None
    return StudyResult(ordered, best, ckpt)
