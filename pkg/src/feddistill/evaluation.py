"""Personalization / generalization scoring and the two diagnostics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import model_core as mc
from .datasets import ClientDataset, LabeledDataset
from .errors import InputError, ProtocolError
from .generator import SyntheticBatch
from .model_core import LayeredModel

PERSONALIZATION_WINDOW = 10
GENERALIZATION_CHECKPOINTS = 5
FINE_TUNE_EPOCHS = 10


@dataclass
class RoundReport:
    round: int
    sampled: list[int]
    client_accuracy: dict[int, float]
    mean_client_acc: float
    agg_loss: float = float("nan")
    g2l_kl: float = float("nan")
    l2g_kl: float = float("nan")
    gen_loss: dict[int, float] = field(default_factory=dict)
    seconds: float = 0.0
    uploads: int = 0
    downloads: int = 0

    def __post_init__(self):
        for acc in self.client_accuracy.values():
            if not (0.0 <= acc <= 1.0 or math.isnan(acc)):
                raise InputError(f"accuracy {acc} outside [0, 1]")

    @property
    def gen_loss_mean(self) -> float:
        return float(np.mean(list(self.gen_loss.values()))) if self.gen_loss else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["client_accuracy"] = {str(k): v for k, v in self.client_accuracy.items()}
        d["gen_loss"] = {str(k): v for k, v in self.gen_loss.items()}
        return d


@dataclass
class EvalSummary:
    strategy: str
    seed: int
    personalization_score: float | None
    generalization_score: float | None
    config_hash: str = ""
    rounds: int = 0

    def __post_init__(self):
        for s in (self.personalization_score, self.generalization_score):
            if s is not None and not 0.0 <= s <= 1.0:
                raise InputError(f"score {s} outside [0, 1]")


def mean_client_accuracy(client_accuracy: dict[int, float]) -> float:
    # sorted keys: the result does not depend on the order clients were reported in
    vals = [client_accuracy[k] for k in sorted(client_accuracy) if not math.isnan(client_accuracy[k])]
    return float(sum(vals) / len(vals)) if vals else float("nan")


def personalization_score(history: Sequence[RoundReport], window: int = PERSONALIZATION_WINDOW) -> float:
    """Mean of the per-round mean client accuracy over the last ``window`` rounds."""
    if len(history) < window:
        raise ProtocolError(
            f"personalization needs at least {window} rounds of history, got {len(history)}; run longer"
        )
    tail = [mean_client_accuracy(r.client_accuracy) for r in history[-window:]]
    return float(sum(tail) / len(tail))


def fine_tune_head(
    model: LayeredModel,
    data: LabeledDataset,
    epochs: int = FINE_TUNE_EPOCHS,
    sgd: mc.SGDConfig = mc.SGDConfig(),
    seed=0,
) -> LayeredModel:
    tuned, _ = mc.train_epochs(
        model, data.features, data.labels, model.partition.classification_keys, epochs, sgd, np.random.default_rng(seed)
    )
    return tuned


def generalization_score(
    checkpoints: Sequence[LayeredModel],
    new_client: ClientDataset,
    sgd: mc.SGDConfig = mc.SGDConfig(),
    epochs: int = FINE_TUNE_EPOCHS,
    seed: int = 0,
    federation_ids: np.ndarray | None = None,
    n_checkpoints: int = GENERALIZATION_CHECKPOINTS,
) -> float:
    """Head-only fine-tune of each retained global model on the new client, mean test accuracy.

    Fine-tuning reads only ``new_client.train``; the test split is used once
    per checkpoint for scoring.
    """
    if len(checkpoints) != n_checkpoints:
        raise ProtocolError(f"expected {n_checkpoints} global checkpoints, got {len(checkpoints)}")
    if federation_ids is not None and np.intersect1d(new_client.ids, federation_ids).size:
        raise ProtocolError("the new client shares samples with the federation")
    if len(new_client.train) == 0 or len(new_client.test) == 0:
        raise ProtocolError("the new client needs non-empty train and test splits")
    accs = []
    for ckpt in checkpoints:
        # same shuffle for every checkpoint: only the model differs between the five scores
        tuned = fine_tune_head(ckpt, new_client.train, epochs, sgd, seed=seed)
        accs.append(mc.accuracy(tuned, new_client.test.features, new_client.test.labels))
    return float(np.mean(accs))


def _batch_means(model: LayeredModel, X: np.ndarray, batch_size: int, layer: int) -> list[np.ndarray]:
    return [mc.forward(model, X[i : i + batch_size], layer).mean(axis=0) for i in range(0, len(X), batch_size)]


def logit_l1_diagnostic(
    global_model: LayeredModel,
    synthetic: SyntheticBatch | np.ndarray,
    random_inputs: SyntheticBatch | np.ndarray,
    real: LabeledDataset | np.ndarray,
    batch_size: int,
    layer: int = 0,
) -> list[tuple[int, float, float]]:
    """Per batch: L1 distance between mean logits of (synthetic, real) and (random, real).

    Inputs at ``layer`` > 0 are fed into that classifier layer; real data is
    mapped there through the global model's own representation layers.
    """
    syn = synthetic.inputs if isinstance(synthetic, SyntheticBatch) else np.asarray(synthetic, float)
    rnd = random_inputs.inputs if isinstance(random_inputs, SyntheticBatch) else np.asarray(random_inputs, float)
    real_x = real.features if isinstance(real, LabeledDataset) else np.asarray(real, float)
    if min(len(syn), len(rnd), len(real_x)) == 0:
        raise InputError("diagnostic inputs must be non-empty")
    if layer > 0:
        real_x = mc.forward_trace(global_model, real_x)[layer]
    ms, mr, mreal = (_batch_means(global_model, x, batch_size, layer) for x in (syn, rnd, real_x))
    if not len(ms) == len(mr) == len(mreal):
        raise InputError(f"batch counts differ: synthetic {len(ms)}, random {len(mr)}, real {len(mreal)}")
    return [
        (i, float(np.abs(s - r).sum()), float(np.abs(q - r).sum()))
        for i, (s, q, r) in enumerate(zip(ms, mr, mreal))
    ]


def representation_dump(model: LayeredModel, inputs: np.ndarray) -> list[np.ndarray]:
    """Activations of every representation layer for ``inputs`` (one n x width grid each)."""
    acts = mc.forward_trace(model, inputs)
    return [a.copy() for a in acts[1:-1]]
