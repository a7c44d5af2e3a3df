"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Graph` records every op applied during a forward pass; :func:`backward`
replays the tape in reverse to produce exact gradients for the parameters held
in :class:`ParamGroup` objects. :func:`finite_diff_grad` is the independent
central-difference oracle used by the gradient tests.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericalError, PipelineError

CHECKPOINT_VERSION = 1


class Tensor:
    """Dense row-major float64 array."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@dataclass(frozen=True)
class Role:
    """What a parameter group belongs to; SMP masks by ``kind == "modality"``."""

    kind: str
    modality: int | None = None

    KINDS = ("modality", "fusion", "classifier", "teacher")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown role kind {self.kind!r}")
        if (self.kind in ("modality", "teacher")) != (self.modality is not None):
            raise ConfigError(f"role {self.kind!r} requires exactly one modality index")

    def __str__(self):
        return self.kind if self.modality is None else f"{self.kind}:{self.modality}"

    @classmethod
    def parse(cls, text: str) -> "Role":
        kind, _, mod = text.partition(":")
        return cls(kind, int(mod) if mod else None)


class ParamGroup:
    """Named, role-tagged list of trainable tensors plus momentum buffers."""

    def __init__(self, name: str, role: Role, tensors: Sequence[Tensor]):
        self.name = name
        self._role = role
        self.tensors = list(tensors)
        self.velocity = [np.zeros_like(t.data) for t in self.tensors]

    @property
    def role(self) -> Role:
        return self._role

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors]

    def copy_values(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.tensors]

    def load_values(self, values: Sequence[np.ndarray]) -> None:
        if len(values) != len(self.tensors):
            raise DimensionError(f"group {self.name}: expected {len(self.tensors)} tensors, got {len(values)}")
        for t, v in zip(self.tensors, values):
            if t.data.shape != np.shape(v):
                raise DimensionError(f"group {self.name}: shape {t.data.shape} vs {np.shape(v)}")
            t.data = np.array(v, dtype=np.float64)

    def __repr__(self):
        return f"ParamGroup({self.name!r}, {self.role}, {[t.shape for t in self.tensors]})"


_Record = tuple[Tensor, tuple, Callable[[np.ndarray], tuple]]


class Graph:
    """Tape of recorded ops.

    With ``track=False`` ops only compute values, which is how evaluation and
    frozen-teacher inference run.
    """

    def __init__(self, track: bool = True):
        self.track = track
        self.records: list[_Record] = []

    def __len__(self):
        return len(self.records)

    def _emit(self, value: np.ndarray, inputs: tuple, grad_fn) -> Tensor:
        if not np.isfinite(value).all():
            raise NumericalError("non-finite value produced by a recorded op")
        out = Tensor.__new__(Tensor)
        out.data = value
        if self.track:
            self.records.append((out, inputs, grad_fn))
        return out

    # -- building blocks -------------------------------------------------

    def affine(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        xd, wd, bd = x.data, w.data, b.data
        if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0] or bd.shape != (wd.shape[1],):
            raise DimensionError(f"affine: x{xd.shape} @ w{wd.shape} + b{bd.shape} incompatible")

        def grad_fn(g):
            return g @ wd.T, xd.T @ g, g.sum(axis=0)

        return self._emit(xd @ wd + bd, (x, w, b), grad_fn)

    def relu(self, x: Tensor) -> Tensor:
        xd = x.data
        mask = xd > 0
        return self._emit(np.where(mask, xd, 0.0), (x,), lambda g: (g * mask,))

    def sigmoid(self, x: Tensor) -> Tensor:
        s = _sigmoid(x.data)
        return self._emit(s, (x,), lambda g: (g * s * (1.0 - s),))

    def softmax(self, x: Tensor) -> Tensor:
        p = softmax(x.data)

        def grad_fn(g):
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

        return self._emit(p, (x,), grad_fn)

    def log_softmax(self, x: Tensor) -> Tensor:
        out = log_softmax(x.data)
        p = np.exp(out)

        def grad_fn(g):
            return (g - p * g.sum(axis=-1, keepdims=True),)

        return self._emit(out, (x,), grad_fn)

    # -- elementwise -----------------------------------------------------

    def add(self, a, b) -> Tensor:
        ad, bd = _as_array(a), _as_array(b)
        out = ad + bd
        sa, sb = ad.shape, bd.shape
        return self._emit(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a, b) -> Tensor:
        ad, bd = _as_array(a), _as_array(b)
        sa, sb = ad.shape, bd.shape
        return self._emit(ad - bd, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def mul(self, a, b) -> Tensor:
        ad, bd = _as_array(a), _as_array(b)
        try:
            out = ad * bd
        except ValueError as exc:
            raise DimensionError(f"mul: shapes {ad.shape} and {bd.shape}") from exc

        def grad_fn(g):
            return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

        return self._emit(out, (a, b), grad_fn)

    def scale(self, x: Tensor, c: float) -> Tensor:
        c = float(c)
        return self._emit(x.data * c, (x,), lambda g: (g * c,))

    def square(self, x: Tensor) -> Tensor:
        xd = x.data
        return self._emit(xd * xd, (x,), lambda g: (2.0 * xd * g,))

    # -- structural ------------------------------------------------------

    def concat(self, xs: Sequence[Tensor], axis: int = 1) -> Tensor:
        arrays = [x.data for x in xs]
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise DimensionError(f"concat: shapes {[a.shape for a in arrays]}") from exc
        bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return self._emit(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))

    def pick(self, x: Tensor, index: np.ndarray) -> Tensor:
        """Row-wise gather ``x[i, index[i]]``."""
        xd = x.data
        rows = np.arange(xd.shape[0])
        index = np.asarray(index, dtype=np.int64)

        def grad_fn(g):
            out = np.zeros_like(xd)
            out[rows, index] = g
            return (out,)

        return self._emit(xd[rows, index], (x,), grad_fn)

    def column(self, x: Tensor, j: int) -> Tensor:
        xd = x.data

        def grad_fn(g):
            out = np.zeros_like(xd)
            out[:, j] = g
            return (out,)

        return self._emit(xd[:, j].copy(), (x,), grad_fn)

    def sum(self, x: Tensor, axis: int | None = None) -> Tensor:
        xd = x.data
        if axis is None:
            return self._emit(np.asarray(xd.sum()), (x,), lambda g: (np.full(xd.shape, float(g)),))
        return self._emit(xd.sum(axis=axis), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), xd.shape).copy(),))

    def mean(self, x: Tensor, axis: int | None = None) -> Tensor:
        xd = x.data
        n = xd.size if axis is None else xd.shape[axis]
        return self.scale(self.sum(x, axis), 1.0 / n)

    def add_n(self, xs: Sequence[Tensor]) -> Tensor:
        out = xs[0]
        for x in xs[1:]:
            out = self.add(out, x)
        return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form: exp never sees a positive argument
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> np.ndarray:
    return _sigmoid(_as_array(x))


def softmax(x) -> np.ndarray:
    x = _as_array(x)
    if x.shape[-1] == 0:
        raise DimensionError("softmax over an empty class axis")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def log_softmax(x) -> np.ndarray:
    x = _as_array(x)
    if x.shape[-1] == 0:
        raise DimensionError("log_softmax over an empty class axis")
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def relu(x) -> np.ndarray:
    return np.maximum(_as_array(x), 0.0)


def backward(loss: Tensor, graph: Graph, groups: Iterable[ParamGroup]) -> dict[str, list[np.ndarray]]:
    """Gradients of a scalar ``loss`` for every tensor in ``groups``.

    Tensors the loss never reached get zeros.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not graph.track:
        raise ContractError("backward on an untracked graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for out, inputs, grad_fn in reversed(graph.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, grad_fn(g)):
            if not isinstance(inp, Tensor):
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    result = {}
    for group in groups:
        result[group.name] = [
            np.array(grads[id(t)], dtype=np.float64) if id(t) in grads else np.zeros_like(t.data)
            for t in group.tensors
        ]
    return result


def finite_diff_grad(f: Callable[[], float], group: ParamGroup, eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``f`` w.r.t. every coordinate of ``group``.

    ``f`` takes no arguments and reads the group's tensors; each coordinate is
    perturbed in place and restored to its exact original value.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    out = []
    for t in group.tensors:
        flat = t.data.reshape(-1)
        est = np.zeros(flat.shape)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f()
            flat[i] = orig - eps
            down = f()
            flat[i] = orig
            est[i] = (up - down) / (2.0 * eps)
        out.append(est.reshape(t.data.shape))
    return out


def sgd_step(group: ParamGroup, grads: Sequence[np.ndarray], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, kappa: float = 1.0) -> None:
    """One masked SGD-with-momentum update, in place.

    ``kappa == 0`` leaves both parameters and velocity untouched.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if len(grads) != len(group.tensors):
        raise DimensionError(f"group {group.name}: {len(grads)} grads for {len(group.tensors)} tensors")
    if kappa == 0:
        return
    for t, v, g in zip(group.tensors, group.velocity, grads):
        if g.shape != t.data.shape:
            raise DimensionError(f"group {group.name}: grad {g.shape} vs param {t.data.shape}")
        eff = g + weight_decay * t.data if weight_decay else g
        if kappa != 1:
            eff = kappa * eff
        v *= momentum
        v += eff
        t.data -= lr * v


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


# -- checkpoints ---------------------------------------------------------

def write_npz(path, arrays: dict) -> None:
    """Like ``np.savez`` but with fixed zip timestamps, so equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def groups_hash(groups: Iterable[ParamGroup]) -> str:
    """sha256 over names, roles, shapes and raw bytes of every tensor."""
    h = hashlib.sha256()
    for group in groups:
        h.update(f"{group.name}|{group.role}".encode())
        for t in group.tensors:
            h.update(repr(t.data.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def save_checkpoint(path, groups: Sequence[ParamGroup], meta: dict | None = None) -> None:
    """Write parameter groups to an ``.npz`` with a JSON manifest entry."""
    manifest = {
        "format": "g2d-checkpoint",
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "groups": [
            {"name": g.name, "role": str(g.role), "shapes": [list(t.shape) for t in g.tensors]}
            for g in groups
        ],
    }
    arrays = {"__manifest__": np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)}
    for gi, g in enumerate(groups):
        for ti, t in enumerate(g.tensors):
            arrays[f"g{gi}_t{ti}"] = t.data
    write_npz(path, arrays)


@dataclass
class Checkpoint:
    groups: list[ParamGroup]
    meta: dict = field(default_factory=dict)

    def by_name(self) -> dict[str, ParamGroup]:
        return {g.name: g for g in self.groups}


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"checkpoint not found: {path}")
    with np.load(path) as npz:
        manifest = json.loads(npz["__manifest__"].tobytes().decode())
        if manifest.get("format") != "g2d-checkpoint":
            raise PipelineError(f"{path} is not a g2d checkpoint")
        if manifest["version"] != CHECKPOINT_VERSION:
            raise PipelineError(f"{path}: unsupported checkpoint version {manifest['version']}")
        groups = []
        for gi, entry in enumerate(manifest["groups"]):
            tensors = [Tensor(npz[f"g{gi}_t{ti}"]) for ti in range(len(entry["shapes"]))]
            groups.append(ParamGroup(entry["name"], Role.parse(entry["role"]), tensors))
    return Checkpoint(groups, manifest.get("meta", {}))
