"""Data-free generator trained against a frozen client classifier.

The classifier acts as a fixed discriminator. The generator minimises
``L_oh + lam * L_ms``: cross-entropy of the classifier's output against its own
argmax (confident outputs), plus a mode-seeking term that rewards outputs
moving apart faster than their noise inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model_core as mc
from .errors import ConfigError, InputError, TrainingDivergenceError
from .model_core import LayeredModel


@dataclass(frozen=True)
class NoiseBatch:
    vectors: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 2:
            raise InputError("noise batch needs at least two vectors")
        object.__setattr__(self, "vectors", v)

    def __len__(self) -> int:
        return self.vectors.shape[0]


def sample_noise(n: int, noise_dim: int, seed) -> NoiseBatch:
    rng = np.random.default_rng(seed)
    return NoiseBatch(rng.standard_normal((n, noise_dim)), seed if isinstance(seed, int) else None)


@dataclass(frozen=True)
class SyntheticBatch:
    inputs: np.ndarray
    pseudo_labels: np.ndarray
    source_client_id: int
    layer: int = 0  # classifier layer index the inputs are fed into

    def __post_init__(self):
        if len(self.inputs) != len(self.pseudo_labels):
            raise InputError("inputs and pseudo-labels differ in length")
        if not np.isfinite(self.inputs).all():
            raise InputError("synthetic inputs are not finite")

    def __len__(self) -> int:
        return len(self.pseudo_labels)


@dataclass(frozen=True)
class GenTrainConfig:
    n: int = 1000
    lam: float = 1.0
    epochs: int = 6
    learning_rate: float = 0.01
    batch_size: int = 32
    noise_dim: int = 16
    distance: str = "euclidean"
    hidden: tuple[int, ...] = (64, 64)
    inject_layer: int = 0  # 0 = raw input space; k > 0 = input of classifier layer k

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError("synthetic count n must be >= 2")
        if self.epochs < 1:
            raise ConfigError("generator epochs must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("generator learning rate must be positive")
        if self.batch_size < 2:
            raise ConfigError("generator batch size must be >= 2 to form pairs")
        if self.distance != "euclidean":
            raise ConfigError(f"unsupported distance {self.distance!r}")
        object.__setattr__(self, "hidden", tuple(self.hidden))


def generate(G: LayeredModel, R: NoiseBatch | np.ndarray) -> np.ndarray:
    vectors = R.vectors if isinstance(R, NoiseBatch) else np.asarray(R, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != G.arch.input_dim:
        raise InputError(f"noise dimension {vectors.shape[-1]} != generator input {G.arch.input_dim}")
    return mc.forward(G, vectors)


def pseudo_labels(D: LayeredModel, X: np.ndarray, start_layer: int = 0) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(mc.forward(D, X, start_layer), axis=1)


def loss_oh(D: LayeredModel, X: np.ndarray, start_layer: int = 0) -> float:
    logits = mc.forward(D, X, start_layer)
    return mc.cross_entropy(logits, np.argmax(logits, axis=1))


def loss_ms(G: LayeredModel, r_a: np.ndarray, r_b: np.ndarray) -> float:
    """-||G(r_a) - G(r_b)|| / ||r_a - r_b||; always <= 0."""
    r_a, r_b = np.asarray(r_a, dtype=np.float64), np.asarray(r_b, dtype=np.float64)
    denom = np.linalg.norm(r_a - r_b)
    if denom == 0:
        raise InputError("degenerate noise pair: r_a == r_b")
    out = generate(G, np.stack([r_a, r_b]))
    return -float(np.linalg.norm(out[0] - out[1]) / denom)


def generator_objective(
    G: LayeredModel,
    D: LayeredModel,
    noise: np.ndarray,
    lam: float,
    start_layer: int = 0,
    with_grad: bool = True,
) -> tuple[float, dict, mc.ParamSet | None]:
    """``L_oh + lam * mean_pairs L_ms`` on one batch; pairs are rows (2k, 2k+1).

    Gradients flow through D into G's outputs; D's parameters receive none.
    """
    g_acts = mc.forward_trace(G, noise)
    X = g_acts[-1]
    d_acts = mc.forward_trace(D, X, start_layer)
    logits = d_acts[-1]
    labels = np.argmax(logits, axis=1)
    l_oh = mc.cross_entropy(logits, labels)

    n_pairs = len(noise) // 2
    a, b = np.arange(0, 2 * n_pairs, 2), np.arange(1, 2 * n_pairs, 2)
    diff_out = X[a] - X[b]
    out_dist = np.linalg.norm(diff_out, axis=1)
    in_dist = np.linalg.norm(noise[a] - noise[b], axis=1)
    if n_pairs and np.any(in_dist == 0):
        raise InputError("degenerate noise pair in batch")
    l_ms = -float(np.mean(out_dist / in_dist)) if n_pairs else 0.0
    total = l_oh + lam * l_ms
    parts = {"loss": total, "loss_oh": l_oh, "loss_ms": l_ms}
    if not with_grad:
        return total, parts, None

    _, dX = mc.backprop(D, d_acts, mc.cross_entropy_grad(logits, labels), trainable_keys=(), start_layer=start_layer)
    if n_pairs and lam:
        safe = np.where(out_dist > 0, out_dist, 1.0)
        coef = np.where(out_dist > 0, -lam / (n_pairs * in_dist * safe), 0.0)[:, None]
        g_pair = coef * diff_out
        dX = dX.copy()
        dX[a] += g_pair
        dX[b] -= g_pair
    grads, _ = mc.backprop(G, g_acts, dX)
    return total, parts, grads


def init_generator(D: LayeredModel, cfg: GenTrainConfig, seed) -> LayeredModel:
    out_dim = D.arch.sizes[cfg.inject_layer]
    arch = mc.generator_architecture(cfg.noise_dim, out_dim, cfg.hidden)
    return mc.init_model(arch, np.random.default_rng(seed))


def evaluate_objective(G: LayeredModel, D: LayeredModel, noise: NoiseBatch, lam: float, start_layer: int = 0) -> float:
    return generator_objective(G, D, noise.vectors, lam, start_layer, with_grad=False)[0]


def _child(seed, k: int) -> np.random.SeedSequence:
    # SeedSequence.spawn is stateful; derive children explicitly so reuse is safe
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=(*seed.spawn_key, k))
    return np.random.SeedSequence(seed, spawn_key=(k,))


def train_generator(
    D_frozen: LayeredModel,
    cfg: GenTrainConfig,
    seed,
    client_id: int = -1,
    callback=None,
) -> tuple[LayeredModel, SyntheticBatch, dict]:
    """Fit a fresh generator to ``D_frozen`` for ``cfg.epochs`` epochs of mini-batch SGD.

    The training noise set holds ``cfg.n`` vectors; each epoch shuffles it and
    pairs consecutive rows of every mini-batch for the mode-seeking term.
    ``callback(epoch, G)`` is invoked after each epoch when given.
    """
    if not 0 <= cfg.inject_layer < D_frozen.arch.n_layers:
        raise ConfigError(f"inject_layer {cfg.inject_layer} out of range")
    init_ss, noise_ss, shuffle_ss = (_child(seed, k) for k in range(3))
    G = init_generator(D_frozen, cfg, init_ss)
    R = sample_noise(cfg.n, cfg.noise_dim, noise_ss)
    rng = np.random.default_rng(shuffle_ss)
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for idx in mc.minibatches(cfg.n, cfg.batch_size, rng):
            if len(idx) < 2:
                continue
            loss, _, grads = generator_objective(G, D_frozen, R.vectors[idx], cfg.lam, cfg.inject_layer)
            if not np.isfinite(loss):
                raise TrainingDivergenceError("generator loss is not finite", epoch)
            G = G.with_params(mc.sgd_step(G.params, grads, cfg.learning_rate))
            losses.append(loss)
        if not G.params.is_finite():
            raise TrainingDivergenceError("generator parameters are not finite", epoch)
        history.append(float(np.mean(losses)))
        if callback is not None:
            callback(epoch, G)
    X = generate(G, R)
    batch = SyntheticBatch(X, pseudo_labels(D_frozen, X, cfg.inject_layer), client_id, cfg.inject_layer)
    return G, batch, {"epoch_loss": history, "final_loss": history[-1]}


def random_batch(D: LayeredModel, n: int, seed, client_id: int = -1, layer: int = 0) -> SyntheticBatch:
    """Standard-normal inputs labelled by ``D``; the "random synthetic data" ablation."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, D.arch.sizes[layer]))
    return SyntheticBatch(X, pseudo_labels(D, X, layer), client_id, layer)


def mean_pairwise_distance(X: np.ndarray) -> float:
    X = np.asarray(X, dtype=np.float64)
    sq = (X * X).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0)
    n = len(X)
    return float(np.sqrt(d2)[np.triu_indices(n, 1)].mean())


def mean_max_confidence(D: LayeredModel, X: np.ndarray, start_layer: int = 0) -> float:
    return float(mc.softmax(mc.forward(D, X, start_layer)).max(axis=1).mean())
