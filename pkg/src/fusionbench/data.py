"""Synthetic multimodal datasets, the on-disk container, and deterministic splits.

The generator exposes a single redundancy knob ``redundancy`` in [0, 1]:

* the *redundant* part of the class signal is the same latent class vector
  for every modality, seen through a modality-specific random linear view
  and present at every sequence position;
* the *unique* part is a disjoint block of the latent class vector, one
  block per modality, carried by a single salient position per sample
  (marked by a fixed cue direction).

At ``redundancy=1`` every modality carries the full class vector; at
``redundancy=0`` each modality only sees its own block, so no modality
alone is sufficient.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"MBPP"
VERSION = 1


class DatasetError(ValueError):
    """Invalid generator spec, split spec or dataset contents."""


class ContainerError(ValueError):
    """Base class for container parse failures."""


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    seq_len: int
    feat_dim: int


@dataclass
class GeneratorSpec:
    n_samples: int
    n_classes: int
    modalities: Sequence[ModalitySpec | tuple]
    redundancy: float = 1.0
    label_noise: float = 0.0
    missing_rate: float | Sequence[float] = 0.0
    seed: int = 0
    # knobs beyond the redundancy contract; defaults tuned for desk-scale runs
    noise_std: float = 1.0
    share_dim: int = 4
    shared_gain: float = 1.5
    salient_gain: float = 2.5
    cue_gain: float = 4.0

    def __post_init__(self):
        self.modalities = [m if isinstance(m, ModalitySpec) else ModalitySpec(*m)
                           for m in self.modalities]
        self.validate()

    def validate(self):
        if self.n_samples < 1:
            raise DatasetError("n_samples must be >= 1")
        if self.n_classes < 2:
            raise DatasetError("n_classes must be >= 2")
        if not self.modalities:
            raise DatasetError("modalities: at least one modality is required")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise DatasetError("modalities: names must be unique")
        for m in self.modalities:
            if m.seq_len < 1:
                raise DatasetError(f"modalities: seq_len of {m.name!r} must be >= 1")
            if m.feat_dim < 1:
                raise DatasetError(f"modalities: feat_dim of {m.name!r} must be >= 1")
        if not 0.0 <= self.redundancy <= 1.0:
            raise DatasetError("redundancy must lie in [0, 1]")
        if not 0.0 <= self.label_noise < 1.0:
            raise DatasetError("label_noise must lie in [0, 1)")
        for rate in self.missing_rates:
            if not 0.0 <= rate < 1.0:
                raise DatasetError("missing_rate must lie in [0, 1)")
        if not 0 <= self.seed < 2**64:
            raise DatasetError("seed must be a 64-bit unsigned integer")
        if self.noise_std < 0:
            raise DatasetError("noise_std must be >= 0")
        if self.share_dim < 1:
            raise DatasetError("share_dim must be >= 1")

    @property
    def missing_rates(self) -> list[float]:
        if isinstance(self.missing_rate, (int, float)):
            return [float(self.missing_rate)] * len(self.modalities)
        rates = [float(r) for r in self.missing_rate]
        if len(rates) != len(self.modalities):
            raise DatasetError("missing_rate: need one rate per modality")
        return rates

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = [asdict(m) for m in self.modalities]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        d["modalities"] = [ModalitySpec(**m) if isinstance(m, dict) else ModalitySpec(*m)
                           for m in d["modalities"]]
        return cls(**d)


@dataclass
class MultimodalDataset:
    names: list[str]
    arrays: list[np.ndarray]
    labels: np.ndarray
    mask: np.ndarray
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.labels)
        if len(self.names) != len(self.arrays):
            raise DatasetError("one name per modality array is required")
        for name, a in zip(self.names, self.arrays):
            if a.ndim != 3 or a.shape[0] != n:
                raise DatasetError(f"modality {name!r}: expected [n_samples, seq_len, feat_dim]")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetError("labels out of range")
        if self.mask.shape != (n, len(self.arrays)):
            raise DatasetError("mask must be [n_samples, n_modalities]")

    @property
    def n_samples(self) -> int:
        return len(self.labels)

    @property
    def n_modalities(self) -> int:
        return len(self.arrays)

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [a.shape[1:] for a in self.arrays]

    def subset(self, idx) -> "MultimodalDataset":
        idx = np.asarray(idx)
        return MultimodalDataset(list(self.names), [a[idx] for a in self.arrays],
                                 self.labels[idx], self.mask[idx], self.n_classes, dict(self.meta))

    def __eq__(self, other):
        if not isinstance(other, MultimodalDataset):
            return NotImplemented
        return (self.names == other.names and self.n_classes == other.n_classes
                and len(self.arrays) == len(other.arrays)
                and all(np.array_equal(a, b) for a, b in zip(self.arrays, other.arrays))
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.mask, other.mask))


def _unit(v, axis=-1):
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def generate(spec: GeneratorSpec) -> MultimodalDataset:
    """Draw a dataset; a pure function of ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, K, k = spec.n_samples, spec.n_classes, len(spec.modalities)
    q = spec.share_dim
    r = k * q
    rho = spec.redundancy

    prototypes = rng.standard_normal((K, r))
    prototypes -= prototypes.mean(axis=0)
    # every modality's block carries the same class separation energy
    for m in range(k):
        blk = prototypes[:, m * q:(m + 1) * q]
        blk *= math.sqrt(q) / np.sqrt(np.mean(np.sum(blk**2, axis=1)))
    # balanced classes, random order
    labels = rng.permutation(np.arange(n) % K)
    z = prototypes[labels]

    arrays, mask = [], np.ones((n, k), dtype=bool)
    for m, (mod, rate) in enumerate(zip(spec.modalities, spec.missing_rates)):
        L, D = mod.seq_len, mod.feat_dim
        view = rng.standard_normal((r, D)) / math.sqrt(r)
        nuisance_view = rng.standard_normal((q, D)) / math.sqrt(q)
        cue = _unit(rng.standard_normal(D))

        block = np.zeros(r)
        block[m * q:(m + 1) * q] = 1.0
        shared = math.sqrt(rho) * z
        unique = math.sqrt((1.0 - rho) * k) * z * block

        x = spec.noise_std * rng.standard_normal((n, L, D))
        x += spec.shared_gain * (shared @ view)[:, None, :]
        x += (rng.standard_normal((n, q)) @ nuisance_view)[:, None, :]
        salient = rng.integers(0, L, size=n)
        rows = np.arange(n)
        x[rows, salient] += spec.salient_gain * (unique @ view) + spec.cue_gain * cue

        if rate > 0:
            missing = rng.random(n) < rate
            x[missing] = 0.0
            mask[missing, m] = False
        arrays.append(x.astype(np.float32))

    observed = labels.copy()
    if spec.label_noise > 0:
        flip = rng.random(n) < spec.label_noise
        observed[flip] = rng.integers(0, K, size=int(flip.sum()))

    meta = {"generator": spec.to_dict()}
    return MultimodalDataset([m.name for m in spec.modalities], arrays,
                             observed.astype(np.int64), mask, K, meta)


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

def _write_bin(path: Path, dims: Sequence[int], payload: bytes):
    header = MAGIC + struct.pack("<I", VERSION) + struct.pack(f"<{len(dims)}I", *dims)
    path.write_bytes(header + payload)


def _read_bin(path: Path, n_dims: int, itemsize: int) -> tuple[tuple[int, ...], bytes]:
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path.name}: bad magic")
    if len(raw) < 8:
        raise TruncatedPayloadError(f"{path.name}: truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{path.name}: version {version} != {VERSION}")
    hdr = 8 + 4 * n_dims
    if len(raw) < hdr:
        raise TruncatedPayloadError(f"{path.name}: truncated header")
    dims = struct.unpack_from(f"<{n_dims}I", raw, 8)
    expected = math.prod(dims) * itemsize
    payload = raw[hdr:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path.name}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise ContainerError(f"{path.name}: {len(payload) - expected} trailing bytes")
    return dims, payload


def write_dataset(ds: MultimodalDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "names": ds.names,
        "shapes": [list(s) for s in ds.shapes],
        "n_samples": ds.n_samples,
        "n_classes": ds.n_classes,
        **ds.meta,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for name, a in zip(ds.names, ds.arrays):
        _write_bin(path / f"mod_{name}.bin", a.shape, a.astype("<f4").tobytes(order="C"))
    _write_bin(path / "labels.bin", [ds.n_samples], ds.labels.astype("<u4").tobytes())
    _write_bin(path / "mask.bin", ds.mask.shape, ds.mask.astype("u1").tobytes(order="C"))


def read_dataset(path) -> MultimodalDataset:
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.exists():
        raise FileNotFoundError(f"no dataset at {path}")
    meta = json.loads(meta_file.read_text())
    names, n_classes = meta.pop("names"), meta.pop("n_classes")
    meta.pop("shapes", None)
    meta.pop("n_samples", None)

    (n,), payload = _read_bin(path / "labels.bin", 1, 4)
    labels = np.frombuffer(payload, dtype="<u4").astype(np.int64)
    arrays = []
    for name in names:
        dims, payload = _read_bin(path / f"mod_{name}.bin", 3, 4)
        if dims[0] != n:
            raise ContainerError(f"mod_{name}.bin: n_samples {dims[0]} != {n}")
        arrays.append(np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32))
    if (path / "mask.bin").exists():
        dims, payload = _read_bin(path / "mask.bin", 2, 1)
        if tuple(dims) != (n, len(names)):
            raise ContainerError("mask.bin: shape does not match dataset")
        mask = np.frombuffer(payload, dtype="u1").reshape(dims).astype(bool)
    else:
        mask = np.ones((n, len(names)), dtype=bool)
    return MultimodalDataset(names, arrays, labels, mask, n_classes, meta)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    mode: str = "sequential"
    seed: int = 42

    def __post_init__(self):
        if len(self.fractions) != 3:
            raise DatasetError("fractions: need (train, val, test)")
        if any(not 0.0 <= f <= 1.0 for f in self.fractions):
            raise DatasetError("fractions must each lie in [0, 1]")
        if not math.isclose(sum(self.fractions), 1.0, abs_tol=1e-9):
            raise DatasetError("fractions must sum to 1")
        if self.mode not in ("sequential", "shuffled"):
            raise DatasetError("mode must be 'sequential' or 'shuffled'")


def split_sizes(n: int, fractions) -> tuple[int, int, int]:
    # the epsilon guards against 0.7 * 100 = 69.999... style round-off
    n_train = math.floor(n * fractions[0] + 1e-9)
    n_val = math.floor(n * fractions[1] + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split_indices(n: int, s: SplitSpec):
    order = np.arange(n)
    if s.mode == "shuffled":
        order = np.random.default_rng(s.seed).permutation(n)
    n_train, n_val, n_test = split_sizes(n, s.fractions)
    for name, size in (("train", n_train), ("val", n_val), ("test", n_test)):
        if size == 0:
            raise DatasetError(f"split produces an empty {name} set")
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def split(ds: MultimodalDataset, s: SplitSpec = SplitSpec()):
    """Return (train, val, test) datasets."""
    return tuple(ds.subset(idx) for idx in split_indices(ds.n_samples, s))
