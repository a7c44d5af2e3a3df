"""Unimodal teachers and the multimodal student.

Encoders are affine+relu stacks. The student owns one encoder per modality, a
fusion module and either a shared classifier or (late fusion) one head per
modality whose logits are averaged.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .diffcore import Graph, ParamGroup, Role, Tensor, xavier_uniform
from .errors import ConfigError, DimensionError


class FusionStrategy(str, Enum):
    SUM = "sum"
    CONCAT = "concat"
    FILM = "film"
    BIGATED = "bigated"
    LATE = "late"

    @classmethod
    def parse(cls, value) -> "FusionStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("_", "").replace("-", "").replace("fusion", ""))
        except ValueError:
            raise ConfigError(f"unknown fusion strategy {value!r}; expected one of {[s.value for s in cls]}") from None

    @property
    def needs_conditioning(self) -> bool:
        return self in (FusionStrategy.FILM, FusionStrategy.BIGATED)


def _affine_params(rng, fan_in, fan_out) -> list[Tensor]:
    return [Tensor(xavier_uniform(rng, fan_in, fan_out)), Tensor(np.zeros(fan_out))]


class Encoder:
    """Stack of affine+relu layers; the last relu output is the feature vector."""

    def __init__(self, layers: Sequence[tuple[Tensor, Tensor]]):
        self.layers = list(layers)

    @classmethod
    def build(cls, rng, in_dim: int, hidden: int, out_dim: int, n_layers: int = 2) -> "Encoder":
        dims = [in_dim] + [hidden] * (n_layers - 1) + [out_dim]
        return cls([tuple(_affine_params(rng, a, b)) for a, b in zip(dims[:-1], dims[1:])])

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def tensors(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]

    def forward(self, g: Graph, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"encoder expects input dim {self.in_dim}, got {x.shape[-1]}")
        h = x
        for w, b in self.layers:
            h = g.relu(g.affine(h, w, b))
        return h


class Teacher:
    """Unimodal model: encoder followed by a linear head."""

    def __init__(self, modality: int, encoder: Encoder, head: Sequence[Tensor], name: str | None = None):
        self.modality = modality
        self.encoder = encoder
        self.head = list(head)
        self.group = ParamGroup(name or f"teacher_{modality}", Role("teacher", modality),
                                encoder.tensors() + self.head)

    @classmethod
    def build(cls, rng, modality: int, in_dim: int, hidden: int, feature_dim: int, num_outputs: int,
              n_layers: int = 2) -> "Teacher":
        enc = Encoder.build(rng, in_dim, hidden, feature_dim, n_layers)
        return cls(modality, enc, _affine_params(rng, feature_dim, num_outputs))

    @classmethod
    def from_group(cls, group: ParamGroup) -> "Teacher":
        """Rebuild a teacher from a checkpointed group (encoder layers, then the head)."""
        if group.role.kind != "teacher":
            raise ConfigError(f"group {group.name!r} has role {group.role}, not a teacher role")
        ts = group.tensors
        if len(ts) < 4 or len(ts) % 2:
            raise DimensionError(f"group {group.name!r} does not hold (weight, bias) pairs")
        enc = Encoder([(ts[i], ts[i + 1]) for i in range(0, len(ts) - 2, 2)])
        return cls(group.role.modality, enc, ts[-2:], group.name)

    @property
    def feature_dim(self) -> int:
        return self.encoder.out_dim

    def forward(self, g: Graph, x) -> tuple[Tensor, Tensor]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        f = self.encoder.forward(g, x)
        return f, g.affine(f, *self.head)

    def predict(self, x) -> tuple[np.ndarray, np.ndarray]:
        f, logits = self.forward(Graph(track=False), x)
        return f.data, logits.data


def teacher_forward(t: Teacher, x_m) -> tuple[np.ndarray, np.ndarray]:
    return t.predict(x_m)


@dataclass
class StudentOutput:
    features: list[Tensor]
    logits: Tensor
    head_logits: list[Tensor] | None = None


class Student:
    """Per-modality encoders + fusion + classifier.

    ``cond`` names the conditioning modality for FiLM and BiGated.
    """

    def __init__(self, encoders: list[Encoder], strategy: FusionStrategy, fusion: dict,
                 classifier: list[Tensor] | None, heads: list[list[Tensor]] | None,
                 cond: int | None, names: Sequence[str] | None = None):
        self.encoders = encoders
        self.strategy = strategy
        self.fusion = fusion
        self.classifier = classifier
        self.heads = heads
        self.cond = cond
        self.names = list(names) if names else [str(m) for m in range(len(encoders))]
        self.groups = self._make_groups()

    @property
    def k(self) -> int:
        return len(self.encoders)

    def _make_groups(self) -> list[ParamGroup]:
        groups = [ParamGroup(f"enc_{self.names[m]}", Role("modality", m), e.tensors())
                  for m, e in enumerate(self.encoders)]
        if self.heads is not None:
            # late-fusion heads form the classifier; like any classifier they are never masked
            groups += [ParamGroup(f"head_{self.names[m]}", Role("classifier"), h)
                       for m, h in enumerate(self.heads)]
        fusion_tensors = [t for key in sorted(self.fusion) for t in self.fusion[key]]
        if fusion_tensors:
            groups.append(ParamGroup("fusion", Role("fusion"), fusion_tensors))
        if self.classifier is not None:
            groups.append(ParamGroup("classifier", Role("classifier"), self.classifier))
        return groups

    def all_tensors(self) -> list[Tensor]:
        out = [t for e in self.encoders for t in e.tensors()]
        out += [t for params in self.fusion.values() for t in params]
        if self.classifier is not None:
            out += self.classifier
        if self.heads is not None:
            out += [t for h in self.heads for t in h]
        return out

    def groups_for(self, modality: int) -> list[ParamGroup]:
        return [g for g in self.groups if g.role.kind == "modality" and g.role.modality == modality]

    def forward(self, g: Graph, xs: Sequence, presence: np.ndarray | None = None,
                only: int | None = None) -> StudentOutput:
        if len(xs) != self.k:
            raise DimensionError(f"student expects {self.k} modalities, got {len(xs)}")
        feats = []
        for m, (enc, x) in enumerate(zip(self.encoders, xs)):
            x = x if isinstance(x, Tensor) else Tensor(x)
            if only is not None and m != only:
                feats.append(Tensor(np.zeros((x.shape[0], enc.out_dim))))
                continue
            f = enc.forward(g, x)
            if presence is not None and not presence[:, m].all():
                f = g.mul(f, presence[:, [m]].astype(np.float64))
            feats.append(f)
        if self.strategy is FusionStrategy.LATE:
            heads = [g.affine(f, *h) for f, h in zip(feats, self.heads)]
            logits = heads[only] if only is not None else g.scale(g.add_n(heads), 1.0 / self.k)
            return StudentOutput(feats, logits, heads)
        z = fuse(g, feats, self.strategy, self.fusion, self.cond)
        return StudentOutput(feats, g.affine(z, *self.classifier), None)

    def predict(self, xs, presence=None, only=None) -> StudentOutput:
        return self.forward(Graph(track=False), xs, presence, only)


def fuse(g: Graph, features: Sequence[Tensor], strategy: FusionStrategy, params: dict,
         cond: int | None = None) -> Tensor:
    """Fused representation fed to the shared classifier.

    Sum: sum of per-modality projections. Concat: feature concatenation.
    FiLM: the conditioning modality emits (gamma, delta) per target modality;
    targets become ``gamma * f + delta`` and are concatenated. BiGated: the
    conditioning modality's projection plus sigmoid-gated projections of the
    others. Late fusion has no shared representation and is handled by
    :meth:`Student.forward`.
    """
    strategy = FusionStrategy.parse(strategy)
    if len(features) < 2:
        raise ConfigError("fusion needs at least two feature tensors")
    if strategy.needs_conditioning and cond is None:
        raise ConfigError(f"{strategy.value} fusion needs a designated conditioning modality")
    if strategy is FusionStrategy.SUM:
        return g.add_n([g.affine(f, *params[f"proj_{m}"]) for m, f in enumerate(features)])
    if strategy is FusionStrategy.CONCAT:
        return g.concat(features, axis=1)
    if strategy is FusionStrategy.FILM:
        fc = features[cond]
        parts = []
        for m, f in enumerate(features):
            if m == cond:
                continue
            gamma = g.affine(fc, *params[f"gamma_{m}"])
            delta = g.affine(fc, *params[f"delta_{m}"])
            parts.append(g.add(g.mul(gamma, f), delta))
        return parts[0] if len(parts) == 1 else g.concat(parts, axis=1)
    if strategy is FusionStrategy.BIGATED:
        gate = g.sigmoid(g.affine(features[cond], *params["gate"]))
        terms = [g.affine(features[cond], *params[f"proj_{cond}"])]
        for m, f in enumerate(features):
            if m != cond:
                terms.append(g.mul(gate, g.affine(f, *params[f"proj_{m}"])))
        return g.add_n(terms)
    raise ConfigError(f"fuse() does not handle {strategy.value}")


def build_student(rng: np.random.Generator, in_dims: Sequence[int], feature_dims: Sequence[int],
                  num_outputs: int, strategy="late", hidden: int = 64, fused_dim: int = 32,
                  cond: int | None = None, n_layers: int = 2, names: Sequence[str] | None = None,
                  teacher_feature_dims: Sequence[int] | None = None) -> Student:
    """Construct a student; feature dims must match the teachers' when given."""
    strategy = FusionStrategy.parse(strategy)
    k = len(in_dims)
    if len(feature_dims) != k:
        raise DimensionError("one feature dim per modality required")
    if teacher_feature_dims is not None and list(teacher_feature_dims) != list(feature_dims):
        raise DimensionError(f"student feature dims {list(feature_dims)} must equal teacher feature dims "
                             f"{list(teacher_feature_dims)}")
    if strategy.needs_conditioning:
        if cond is None:
            raise ConfigError(f"{strategy.value} fusion needs a designated conditioning modality")
        if not 0 <= cond < k:
            raise ConfigError(f"conditioning modality {cond} out of range")
    if strategy is not FusionStrategy.LATE and k < 2:
        raise ConfigError(f"{strategy.value} fusion needs at least two modalities")
    encoders = [Encoder.build(rng, d, hidden, f, n_layers) for d, f in zip(in_dims, feature_dims)]
    fusion: dict[str, list[Tensor]] = {}
    classifier = heads = None
    if strategy is FusionStrategy.LATE:
        heads = [_affine_params(rng, f, num_outputs) for f in feature_dims]
    elif strategy is FusionStrategy.SUM:
        for m, f in enumerate(feature_dims):
            fusion[f"proj_{m}"] = _affine_params(rng, f, fused_dim)
        classifier = _affine_params(rng, fused_dim, num_outputs)
    elif strategy is FusionStrategy.CONCAT:
        classifier = _affine_params(rng, sum(feature_dims), num_outputs)
    elif strategy is FusionStrategy.FILM:
        fc = feature_dims[cond]
        total = 0
        for m, f in enumerate(feature_dims):
            if m == cond:
                continue
            gamma = _affine_params(rng, fc, f)
            gamma[1] = Tensor(np.ones(f))
            fusion[f"gamma_{m}"] = gamma
            fusion[f"delta_{m}"] = _affine_params(rng, fc, f)
            total += f
        classifier = _affine_params(rng, total, num_outputs)
    elif strategy is FusionStrategy.BIGATED:
        fusion["gate"] = _affine_params(rng, feature_dims[cond], fused_dim)
        for m, f in enumerate(feature_dims):
            fusion[f"proj_{m}"] = _affine_params(rng, f, fused_dim)
        classifier = _affine_params(rng, fused_dim, num_outputs)
    return Student(encoders, strategy, fusion, classifier, heads, cond, names)


def audit_groups(student: Student) -> None:
    """Raise unless every trainable tensor sits in exactly one parameter group."""
    counts: dict[int, int] = {}
    for group in student.groups:
        for t in group.tensors:
            counts[id(t)] = counts.get(id(t), 0) + 1
    expected = {id(t) for t in student.all_tensors()}
    if set(counts) != expected:
        raise ConfigError("parameter groups do not cover the student's tensors exactly")
    dupes = [k for k, c in counts.items() if c != 1]
    if dupes:
        raise ConfigError(f"{len(dupes)} tensors appear in more than one parameter group")
