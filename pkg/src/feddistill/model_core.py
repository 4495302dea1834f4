"""Dense tanh MLPs with hand-written backprop, split into representation and head.

Everything here is float64 and side-effect free: forward/backward/step return
new arrays and never mutate their inputs.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InputError

# loss_fn(logits) -> (scalar loss, d loss / d logits)
LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]

ACTIVATIONS = ("tanh", "identity")


class ParamSet(Mapping[str, np.ndarray]):
    """Ordered name -> float64 array mapping; the unit of averaging and checkpointing."""

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._entries: dict[str, np.ndarray] = {
            k: np.array(v, dtype=np.float64, copy=True) for k, v in items
        }

    def __getitem__(self, key: str) -> np.ndarray:
        return self._entries[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._entries.items())
        return f"ParamSet({shapes})"

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._entries.items()}

    def same_layout(self, other: "ParamSet") -> bool:
        return list(self.keys()) == list(other.keys()) and self.shapes() == other.shapes()

    def subset(self, keys: Iterable[str]) -> "ParamSet":
        wanted = set(keys)
        return ParamSet((k, v) for k, v in self._entries.items() if k in wanted)

    def with_updates(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        """Copy with some entries replaced; key order is preserved."""
        unknown = set(updates) - set(self._entries)
        if unknown:
            raise InputError(f"unknown parameter names: {sorted(unknown)}")
        for k, v in updates.items():
            if np.shape(v) != self._entries[k].shape:
                raise InputError(f"shape mismatch for {k}: {np.shape(v)} vs {self._entries[k].shape}")
        return ParamSet((k, updates[k] if k in updates else v) for k, v in self._entries.items())

    def scaled(self, factor: float) -> "ParamSet":
        return ParamSet((k, v * factor) for k, v in self._entries.items())

    def __add__(self, other: "ParamSet") -> "ParamSet":
        if not self.same_layout(other):
            raise InputError("cannot add ParamSets with different layouts")
        return ParamSet((k, v + other[k]) for k, v in self._entries.items())

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        if not self.same_layout(other):
            raise InputError("cannot subtract ParamSets with different layouts")
        return ParamSet((k, v - other[k]) for k, v in self._entries.items())

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._entries.values())

    def bit_equal(self, other: "ParamSet") -> bool:
        return self.same_layout(other) and all(
            np.array_equal(v, other[k]) for k, v in self._entries.items()
        )

    def digest(self, keys: Iterable[str] | None = None) -> str:
        """sha256 over names, shapes and little-endian payloads."""
        selected = set(self._entries) if keys is None else set(keys)
        h = hashlib.sha256()
        for k, v in self._entries.items():
            if k not in selected:
                continue
            h.update(k.encode())
            h.update(repr(v.shape).encode())
            h.update(v.astype("<f8").tobytes())
        return h.hexdigest()


def linear_combination(paramsets: Sequence[ParamSet], weights: Sequence[float]) -> ParamSet:
    """sum_i w_i * P_i, accumulated left to right in key order."""
    if not paramsets:
        raise InputError("linear_combination needs at least one ParamSet")
    if len(paramsets) != len(weights):
        raise InputError("one weight per ParamSet required")
    first = paramsets[0]
    for p in paramsets[1:]:
        if not first.same_layout(p):
            raise InputError("ParamSets have different architectures")
    out = {}
    for k in first:
        acc = np.zeros_like(first[k])
        for p, w in zip(paramsets, weights):
            acc = acc + w * p[k]
        out[k] = acc
    return ParamSet(out)


def mean_params(paramsets: Sequence[ParamSet]) -> ParamSet:
    """Element-wise mean, computed as ``P_0 + sum_i (P_i - P_0) / m`` in list order.

    Centring on the first member makes the mean of identical sets exact.
    """
    if not paramsets:
        raise InputError("cannot average an empty list of ParamSets")
    first = paramsets[0]
    for p in paramsets[1:]:
        if not first.same_layout(p):
            raise InputError("ParamSets have different architectures")
    m = len(paramsets)
    out = {}
    for k in first:
        base = first[k]
        acc = np.zeros_like(base)
        for p in paramsets[1:]:
            acc = acc + (p[k] - base)
        out[k] = base + acc / m
    return ParamSet(out)


@dataclass(frozen=True)
class Architecture:
    """Layer widths ``(input, hidden..., output)`` with one activation per hidden layer."""

    sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.sizes) < 2 or any(int(s) < 1 for s in self.sizes):
            raise ConfigError(f"invalid layer sizes {self.sizes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def layer_keys(self, i: int) -> tuple[str, str]:
        return (f"layer{i}.weight", f"layer{i}.bias")

    def to_json(self) -> str:
        return json.dumps({"sizes": list(self.sizes), "activation": self.activation}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Architecture":
        d = json.loads(text)
        return cls(tuple(d["sizes"]), d.get("activation", "tanh"))


def classifier_architecture(input_dim: int, n_classes: int, hidden=(64, 32)) -> Architecture:
    return Architecture((input_dim, *hidden, n_classes))


def generator_architecture(noise_dim: int, output_dim: int, hidden=(64, 64)) -> Architecture:
    return Architecture((noise_dim, *hidden, output_dim))


@dataclass(frozen=True)
class LayerPartition:
    representation_keys: frozenset[str]
    classification_keys: frozenset[str]

    @classmethod
    def for_architecture(cls, arch: Architecture) -> "LayerPartition":
        head = frozenset(arch.layer_keys(arch.n_layers - 1))
        rep = frozenset(k for i in range(arch.n_layers - 1) for k in arch.layer_keys(i))
        return cls(rep, head)

    def all_keys(self) -> frozenset[str]:
        return self.representation_keys | self.classification_keys


@dataclass(frozen=True)
class SGDConfig:
    learning_rate: float = 0.01
    batch_size: int = 10

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class LayeredModel:
    """Parameters plus architecture; the last affine layer is the classification head."""

    params: ParamSet
    arch: Architecture
    partition: LayerPartition = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.partition is None:
            object.__setattr__(self, "partition", LayerPartition.for_architecture(self.arch))
        expected = {k: s for k, s in _expected_shapes(self.arch).items()}
        if self.params.shapes() != expected or list(self.params) != list(expected):
            raise InputError("parameters do not match the architecture")

    def with_params(self, params: ParamSet) -> "LayeredModel":
        return LayeredModel(params, self.arch, self.partition)

    @property
    def representation(self) -> ParamSet:
        return self.params.subset(self.partition.representation_keys)

    @property
    def head(self) -> ParamSet:
        return self.params.subset(self.partition.classification_keys)


def _expected_shapes(arch: Architecture) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i in range(arch.n_layers):
        w, b = arch.layer_keys(i)
        shapes[w] = (arch.sizes[i + 1], arch.sizes[i])
        shapes[b] = (arch.sizes[i + 1],)
    return shapes


def init_model(arch: Architecture, rng: np.random.Generator | int) -> LayeredModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    rng = np.random.default_rng(rng)
    entries = {}
    for i in range(arch.n_layers):
        w, b = arch.layer_keys(i)
        fan_in = arch.sizes[i]
        bound = 1.0 / np.sqrt(fan_in)
        entries[w] = rng.uniform(-bound, bound, size=(arch.sizes[i + 1], fan_in))
        entries[b] = rng.uniform(-bound, bound, size=(arch.sizes[i + 1],))
    return LayeredModel(ParamSet(entries), arch)


def zero_model(arch: Architecture) -> LayeredModel:
    return LayeredModel(ParamSet((k, np.zeros(s)) for k, s in _expected_shapes(arch).items()), arch)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if name == "tanh" else z


def _act_grad(name: str, a: np.ndarray) -> np.ndarray:
    # derivative expressed through the activation output
    return 1.0 - a * a if name == "tanh" else np.ones_like(a)


def _as_batch(model: LayeredModel, inputs: np.ndarray, start_layer: int) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if not 0 <= start_layer < model.arch.n_layers:
        raise ConfigError(f"start_layer {start_layer} out of range for {model.arch.n_layers} layers")
    expected = model.arch.sizes[start_layer]
    if x.ndim != 2 or x.shape[1] != expected:
        raise ConfigError(f"input dimension {x.shape[-1]} does not match expected {expected}")
    return x


def forward_trace(model: LayeredModel, inputs: np.ndarray, start_layer: int = 0) -> list[np.ndarray]:
    """Activations ``[input, h_1, ..., logits]`` starting at ``start_layer``."""
    x = _as_batch(model, inputs, start_layer)
    arch, p = model.arch, model.params
    acts = [x]
    last = arch.n_layers - 1
    for i in range(start_layer, arch.n_layers):
        w, b = arch.layer_keys(i)
        z = acts[-1] @ p[w].T + p[b]
        acts.append(z if i == last else _act(arch.activation, z))
    return acts


def forward(model: LayeredModel, inputs: np.ndarray, start_layer: int = 0) -> np.ndarray:
    return forward_trace(model, inputs, start_layer)[-1]


def representation(model: LayeredModel, inputs: np.ndarray, start_layer: int = 0) -> np.ndarray:
    """Output of the last representation layer (the head's input)."""
    return forward_trace(model, inputs, start_layer)[-2]


def head_forward(model: LayeredModel, features: np.ndarray) -> np.ndarray:
    return forward(model, features, start_layer=model.arch.n_layers - 1)


def backprop(
    model: LayeredModel,
    acts: list[np.ndarray],
    grad_out: np.ndarray,
    trainable_keys: Iterable[str] | None = None,
    start_layer: int = 0,
) -> tuple[ParamSet, np.ndarray]:
    """Reverse pass given a trace from :func:`forward_trace` and d loss / d output.

    Returns gradients for ``trainable_keys`` (all keys if None) and the gradient
    with respect to the trace input.
    """
    arch, p = model.arch, model.params
    wanted = set(model.params) if trainable_keys is None else set(trainable_keys)
    grads: dict[str, np.ndarray] = {}
    delta = np.asarray(grad_out, dtype=np.float64)
    last = arch.n_layers - 1
    for i in range(last, start_layer - 1, -1):
        w, b = arch.layer_keys(i)
        a_out = acts[i - start_layer + 1]
        if i != last:
            delta = delta * _act_grad(arch.activation, a_out)
        a_in = acts[i - start_layer]
        if w in wanted:
            grads[w] = delta.T @ a_in
        if b in wanted:
            grads[b] = delta.sum(axis=0)
        delta = delta @ p[w]
    ordered = ParamSet((k, grads[k]) for k in model.params if k in grads)
    return ordered, delta


def backward(
    model: LayeredModel,
    inputs: np.ndarray,
    loss_fn: LossFn,
    trainable_keys: Iterable[str],
    start_layer: int = 0,
) -> tuple[float, ParamSet]:
    """Loss and its gradient over ``trainable_keys`` only."""
    keys = set(trainable_keys)
    if not keys:
        raise InputError("trainable key set is empty")
    unknown = keys - set(model.params)
    if unknown:
        raise InputError(f"unknown trainable keys: {sorted(unknown)}")
    acts = forward_trace(model, inputs, start_layer)
    loss, dlogits = loss_fn(acts[-1])
    grads, _ = backprop(model, acts, dlogits, keys, start_layer)
    return loss, grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise InputError("one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError(f"labels must lie in [0, {logits.shape[1]})")
    return labels.astype(np.int64)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = _check_labels(logits, labels)
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = _check_labels(logits, labels)
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def kl_divergence(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    """Batch mean of KL(softmax(p) || softmax(q))."""
    p_logits = np.atleast_2d(np.asarray(p_logits, dtype=np.float64))
    q_logits = np.atleast_2d(np.asarray(q_logits, dtype=np.float64))
    if p_logits.shape != q_logits.shape:
        raise InputError(f"shape mismatch {p_logits.shape} vs {q_logits.shape}")
    lp, lq = log_softmax(p_logits), log_softmax(q_logits)
    rows = (np.exp(lp) * (lp - lq)).sum(axis=1)
    # rounding can leave tiny negatives when p == q
    return float(max(rows.mean(), 0.0))


def kl_divergence_grad(p_logits: np.ndarray, q_logits: np.ndarray) -> np.ndarray:
    """d KL(softmax(p) || softmax(q)) / d p_logits, batch-averaged."""
    lp, lq = log_softmax(p_logits), log_softmax(q_logits)
    p = np.exp(lp)
    diff = lp - lq
    row_kl = (p * diff).sum(axis=1, keepdims=True)
    return p * (diff - row_kl) / p_logits.shape[0]


def ce_loss(labels: np.ndarray) -> LossFn:
    return lambda logits: (cross_entropy(logits, labels), cross_entropy_grad(logits, labels))


def kl_loss(teacher_logits: np.ndarray) -> LossFn:
    """Student-side KL(softmax(student) || softmax(teacher)) against fixed teacher logits."""
    return lambda logits: (kl_divergence(logits, teacher_logits), kl_divergence_grad(logits, teacher_logits))


def sgd_step(params: ParamSet, grads: Mapping[str, np.ndarray], learning_rate: float) -> ParamSet:
    if not learning_rate > 0:
        raise ConfigError(f"learning rate must be positive, got {learning_rate}")
    unknown = set(grads) - set(params)
    if unknown:
        raise InputError(f"gradient for unknown parameters: {sorted(unknown)}")
    return params.with_updates({k: params[k] - learning_rate * g for k, g in grads.items()})


def replace_representation(target: ParamSet, source: ParamSet, partition: LayerPartition) -> ParamSet:
    """``source``'s representation layers under ``target``'s head."""
    if not target.same_layout(source):
        raise InputError("architecture mismatch between source and target")
    if set(target) != partition.all_keys():
        raise InputError("partition does not cover the parameter set")
    return target.with_updates({k: source[k] for k in partition.representation_keys})


def predict(model: LayeredModel, inputs: np.ndarray) -> np.ndarray:
    return np.argmax(forward(model, inputs), axis=1)


def accuracy(model: LayeredModel, inputs: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(model, inputs) == np.asarray(labels)))


def minibatches(n: int, batch_size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    """Index batches covering ``range(n)``; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_epochs(
    model: LayeredModel,
    inputs: np.ndarray,
    labels: np.ndarray,
    trainable_keys: Iterable[str],
    epochs: int,
    sgd: SGDConfig,
    rng: np.random.Generator,
) -> tuple[LayeredModel, list[float]]:
    """Mini-batch SGD on cross-entropy; returns the model and per-epoch mean batch loss."""
    keys = frozenset(trainable_keys)
    params = model.params
    history = []
    for _ in range(epochs):
        losses = []
        for idx in minibatches(len(labels), sgd.batch_size, rng):
            loss, grads = backward(model.with_params(params), inputs[idx], ce_loss(labels[idx]), keys)
            params = sgd_step(params, grads, sgd.learning_rate)
            losses.append(loss)
        history.append(float(np.mean(losses)) if losses else float("nan"))
    return model.with_params(params), history


_ARCH_RECORD = "__architecture__"


def save_checkpoint(model: LayeredModel, path: str | Path) -> None:
    """Zip of ``.npy`` members (little-endian float64) plus an architecture JSON record."""
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo(_ARCH_RECORD + ".json"), model.arch.to_json())
        for k, v in model.params.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(v, dtype="<f8"), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(k + ".npy"), buf.getvalue())


def load_checkpoint(path: str | Path) -> LayeredModel:
    with zipfile.ZipFile(Path(path)) as zf:
        arch = Architecture.from_json(zf.read(_ARCH_RECORD + ".json").decode())
        entries = []
        for name in zf.namelist():
            if name == _ARCH_RECORD + ".json":
                continue
            arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
            entries.append((name[: -len(".npy")], arr))
    return LayeredModel(ParamSet(entries), arch)
