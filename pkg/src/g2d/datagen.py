"""Synthetic multimodal datasets with a dominant modality known by construction.

Classification: every modality observes ``strength * prototype[y] + noise * N(0, I)``
with its own per-class prototypes, so the modality with the larger strength is
the one a unimodal model finds easiest. Regression: every modality is a noisy
linear view of a shared latent vector and the target is a squashed linear
function of that latent.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, PipelineError

SPLITS = ("train", "val", "test")
DATASET_FORMAT = "g2d-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    feature_dim: int
    signal_strength: float
    noise_scale: float = 1.0


@dataclass(frozen=True)
class DatasetSpec:
    """Everything needed to regenerate a dataset bit-for-bit.

    ``num_classes=None`` marks a regression dataset.
    """

    modalities: tuple[ModalitySpec, ...]
    num_classes: int | None = 4
    n_train: int = 600
    n_val: int = 300
    n_test: int = 1000
    seed: int = 0
    latent_dim: int = 4
    latent_scale: float = 1.0
    target_noise: float = 0.0

    @property
    def k(self) -> int:
        return len(self.modalities)

    @property
    def task(self) -> str:
        return "regress" if self.num_classes is None else "classify"

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]

    def validate(self) -> None:
        if self.k < 2:
            raise ConfigError(f"need at least 2 modalities, got {self.k}")
        if len(set(self.names)) != self.k:
            raise ConfigError(f"modality names must be unique: {self.names}")
        if self.num_classes is not None and self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        for split in SPLITS:
            if self.split_size(split) <= 0:
                raise ConfigError(f"{split} split size must be positive")
        for m in self.modalities:
            if m.feature_dim <= 0:
                raise ConfigError(f"modality {m.name}: feature_dim must be positive")
            if not 0 < m.signal_strength <= 1:
                raise ConfigError(f"modality {m.name}: signal_strength must lie in (0, 1]")
            if m.noise_scale < 0:
                raise ConfigError(f"modality {m.name}: noise_scale must be nonnegative")
        if self.task == "regress":
            if self.latent_dim <= 0:
                raise ConfigError("latent_dim must be positive")
            if self.latent_scale < 0 or self.target_noise < 0:
                raise ConfigError("latent_scale and target_noise must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = [asdict(m) for m in self.modalities]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        try:
            mods = tuple(ModalitySpec(**m) for m in d.pop("modalities"))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad modality list: {exc}") from exc
        unknown = set(d) - {f for f in cls.__dataclass_fields__ if f != "modalities"}
        if unknown:
            raise ConfigError(f"unknown dataset spec keys: {sorted(unknown)}")
        return cls(modalities=mods, **d)


@dataclass
class MultimodalBatch:
    xs: list[np.ndarray]
    y: np.ndarray
    presence: np.ndarray
    index: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class Split:
    xs: list[np.ndarray]
    y: np.ndarray
    presence: np.ndarray = None

    def __post_init__(self):
        n = len(self.y)
        if any(x.shape[0] != n for x in self.xs):
            raise ConfigError("all modalities must have the same number of samples")
        if self.presence is None:
            self.presence = np.ones((n, len(self.xs)), dtype=bool)

    def __len__(self):
        return len(self.y)

    def batch(self, index) -> MultimodalBatch:
        index = np.asarray(index)
        return MultimodalBatch([x[index] for x in self.xs], self.y[index], self.presence[index], index)

    def full(self) -> MultimodalBatch:
        return self.batch(np.arange(len(self)))


@dataclass
class MultimodalDataset:
    spec: DatasetSpec
    splits: dict[str, Split]
    bayes_accuracy: list[float] = field(default_factory=list)
    miss_rate: float = 0.0

    @property
    def train(self) -> Split:
        return self.splits["train"]

    @property
    def val(self) -> Split:
        return self.splits["val"]

    @property
    def test(self) -> Split:
        return self.splits["test"]

    @property
    def task(self) -> str:
        return self.spec.task

    @property
    def k(self) -> int:
        return self.spec.k

    @property
    def num_outputs(self) -> int:
        return 1 if self.spec.num_classes is None else self.spec.num_classes

    def content_hash(self) -> str:
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(repr(self.miss_rate).encode())
        for name in SPLITS:
            s = self.splits[name]
            for x in s.xs:
                h.update(np.ascontiguousarray(x).tobytes())
            h.update(np.ascontiguousarray(s.y).tobytes())
            h.update(np.ascontiguousarray(s.presence).tobytes())
        return h.hexdigest()


def _balanced_labels(rng: np.random.Generator, n: int, c: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % c)


def gen_classification(spec: DatasetSpec) -> MultimodalDataset:
    """Gaussian class-prototype dataset; per-class counts differ by at most one."""
    spec.validate()
    if spec.num_classes is None:
        raise ConfigError("gen_classification needs num_classes")
    c = spec.num_classes
    rng = np.random.default_rng(spec.seed)
    prototypes = [rng.standard_normal((c, m.feature_dim)) for m in spec.modalities]
    splits = {}
    for name in SPLITS:
        n = spec.split_size(name)
        y = _balanced_labels(rng, n, c)
        xs = [
            m.signal_strength * protos[y] + m.noise_scale * rng.standard_normal((n, m.feature_dim))
            for m, protos in zip(spec.modalities, prototypes)
        ]
        splits[name] = Split(xs, y.astype(np.int64))
    bayes = _nearest_prototype_accuracy(spec, prototypes)
    return MultimodalDataset(spec, splits, bayes)


def _nearest_prototype_accuracy(spec: DatasetSpec, prototypes, n: int = 20000) -> list[float]:
    # equal priors + isotropic noise: nearest scaled prototype is Bayes optimal
    rng = np.random.default_rng([spec.seed, 7919])
    out = []
    for m, protos in zip(spec.modalities, prototypes):
        y = rng.integers(0, len(protos), n)
        centers = m.signal_strength * protos
        x = centers[y] + m.noise_scale * rng.standard_normal((n, m.feature_dim))
        d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        out.append(float((d.argmin(1) == y).mean()))
    return out


def gen_regression(spec: DatasetSpec) -> MultimodalDataset:
    """Targets ``0.1 + 0.8 * sigmoid(w . u + eps)`` of a latent ``u``; each modality sees ``s * u A + noise``."""
    spec.validate()
    if spec.num_classes is not None:
        raise ConfigError("gen_regression needs a spec with num_classes=None")
    rng = np.random.default_rng(spec.seed)
    L = spec.latent_dim
    w = rng.standard_normal(L) / np.sqrt(L)
    mixing = [rng.standard_normal((L, m.feature_dim)) / np.sqrt(L) for m in spec.modalities]
    splits = {}
    for name in SPLITS:
        n = spec.split_size(name)
        u = spec.latent_scale * rng.standard_normal((n, L))
        z = u @ w * 2.0 + spec.target_noise * rng.standard_normal(n)
        y = 0.1 + 0.8 / (1.0 + np.exp(-z))
        if np.var(y) == 0:
            raise ConfigError("degenerate regression spec: target has zero variance")
        xs = [
            m.signal_strength * (u @ a) + m.noise_scale * rng.standard_normal((n, m.feature_dim))
            for m, a in zip(spec.modalities, mixing)
        ]
        splits[name] = Split(xs, y)
    return MultimodalDataset(spec, splits, [])


def generate(spec: DatasetSpec) -> MultimodalDataset:
    return gen_regression(spec) if spec.task == "regress" else gen_classification(spec)


def missing_expectation(miss_rate: float, k: int) -> float:
    """Per-cell absence probability under the redraw-until-one-present rule."""
    q = miss_rate
    return (q - q**k) / (1.0 - q**k)


def apply_missing_mask(ds: MultimodalDataset, miss_rate: float, seed: int,
                       splits=SPLITS) -> MultimodalDataset:
    """Drop each (sample, modality) cell with probability ``miss_rate``.

    A sample whose draw removes every modality is redrawn. Absent inputs are
    zeroed and flagged in ``presence``.
    """
    if not 0 <= miss_rate < 1:
        raise ConfigError(f"miss_rate must lie in [0, 1), got {miss_rate}")
    rng = np.random.default_rng([seed, 104729])
    out = {}
    for name, split in ds.splits.items():
        if name not in splits or miss_rate == 0:
            out[name] = Split([x.copy() for x in split.xs], split.y.copy(), split.presence.copy())
            continue
        n, k = len(split), len(split.xs)
        presence = rng.random((n, k)) >= miss_rate
        empty = ~presence.any(axis=1)
        while empty.any():
            presence[empty] = rng.random((int(empty.sum()), k)) >= miss_rate
            empty = ~presence.any(axis=1)
        xs = [np.where(presence[:, [m]], x, 0.0) for m, x in enumerate(split.xs)]
        out[name] = Split(xs, split.y.copy(), presence)
    return replace(ds, splits=out, miss_rate=miss_rate)


# -- file format ---------------------------------------------------------
# Line 1: "# g2d-dataset v1"; line 2: "# " + JSON header (spec, miss_rate,
# bayes_accuracy); then CSV with columns split, label, p_<m>..., <m>_<j>...
# Floats are written with repr() so the round trip is exact.

def save_dataset(ds: MultimodalDataset, path) -> str:
    header = {"spec": ds.spec.to_dict(), "miss_rate": ds.miss_rate, "bayes_accuracy": ds.bayes_accuracy}
    buf = io.StringIO()
    buf.write(f"# {DATASET_FORMAT} v{DATASET_VERSION}\n")
    buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    names = ds.spec.names
    cols = ["split", "label"] + [f"p_{n}" for n in names]
    for m in ds.spec.modalities:
        cols += [f"{m.name}_{j}" for j in range(m.feature_dim)]
    writer.writerow(cols)
    for split_name in SPLITS:
        s = ds.splits[split_name]
        for i in range(len(s)):
            row = [split_name, repr(s.y[i].item())] + [str(int(p)) for p in s.presence[i]]
            for x in s.xs:
                row += [repr(v) for v in x[i].tolist()]
            writer.writerow(row)
    text = buf.getvalue()
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_dataset(path) -> MultimodalDataset:
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"dataset file not found: {path}")
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != f"# {DATASET_FORMAT} v{DATASET_VERSION}":
            raise PipelineError(f"{path}: not a {DATASET_FORMAT} v{DATASET_VERSION} file")
        header = json.loads(fh.readline()[2:])
        spec = DatasetSpec.from_dict(header["spec"])
        reader = csv.reader(fh)
        next(reader)
        rows = {s: [] for s in SPLITS}
        for row in reader:
            rows[row[0]].append(row)
    k = spec.k
    dims = [m.feature_dim for m in spec.modalities]
    offsets = [2 + k + o for o in itertools.accumulate([0] + dims[:-1])]
    splits = {}
    for name in SPLITS:
        r = rows[name]
        if spec.task == "classify":
            y = np.array([int(row[1]) for row in r], dtype=np.int64)
        else:
            y = np.array([float(row[1]) for row in r], dtype=np.float64)
        presence = np.array([[row[2 + m] == "1" for m in range(k)] for row in r], dtype=bool).reshape(len(r), k)
        xs = [
            np.array([[float(v) for v in row[o:o + d]] for row in r], dtype=np.float64).reshape(len(r), d)
            for o, d in zip(offsets, dims)
        ]
        splits[name] = Split(xs, y, presence)
    return MultimodalDataset(spec, splits, header.get("bayes_accuracy", []), header.get("miss_rate", 0.0))
