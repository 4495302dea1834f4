"""Head-frozen KL distillation between the global model and client models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import model_core as mc
from .errors import ConfigError, InputError
from .generator import SyntheticBatch
from .model_core import LayeredModel


@dataclass(frozen=True)
class DistillConfig:
    epochs_global_to_local: int = 4
    epochs_local_to_global: int = 1
    learning_rate: float = 0.01
    batch_size: int = 32
    client_order_seed: int = 0

    def __post_init__(self):
        if self.epochs_global_to_local < 0 or self.epochs_local_to_global < 0:
            raise ConfigError("distillation epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("distillation learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("distillation batch size must be >= 1")


def _check_pair(student: LayeredModel, teacher: LayeredModel) -> None:
    if student.arch != teacher.arch or not student.params.same_layout(teacher.params):
        raise InputError("student and teacher architectures differ")


def distill_kl(student: LayeredModel, teacher: LayeredModel, batch: SyntheticBatch) -> float:
    """KL(softmax(student(x)) || softmax(teacher(x))) over the whole batch."""
    return mc.kl_divergence(mc.forward(student, batch.inputs, batch.layer), mc.forward(teacher, batch.inputs, batch.layer))


def _distill(
    student: LayeredModel,
    teacher: LayeredModel,
    batch: SyntheticBatch,
    epochs: int,
    cfg: DistillConfig,
    rng: np.random.Generator,
) -> tuple[LayeredModel, list[float]]:
    # teacher logits are fixed constants: no gradient path into the teacher
    teacher_logits = mc.forward(teacher, batch.inputs, batch.layer)
    trainable = student.partition.representation_keys
    layer_keys = {k for i in range(batch.layer, student.arch.n_layers) for k in student.arch.layer_keys(i)}
    trainable = frozenset(trainable & layer_keys)
    params = student.params
    losses = []
    for _ in range(epochs):
        epoch_losses = []
        for idx in mc.minibatches(len(batch), cfg.batch_size, rng):
            loss, grads = mc.backward(
                student.with_params(params),
                batch.inputs[idx],
                mc.kl_loss(teacher_logits[idx]),
                trainable,
                start_layer=batch.layer,
            )
            params = mc.sgd_step(params, grads, cfg.learning_rate)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    return student.with_params(params), losses


def distill_global_to_local(
    local: LayeredModel,
    global_model: LayeredModel,
    batch: SyntheticBatch,
    cfg: DistillConfig,
    rng: np.random.Generator | int | None = None,
) -> tuple[LayeredModel, list[float]]:
    """Client model learns from the global model on its own synthetic batch.

    Only the client's representation layers move; its head and the global
    model are untouched. Returns the updated client and per-epoch mean KL.
    """
    _check_pair(local, global_model)
    if len(batch) == 0:
        raise InputError("empty synthetic batch")
    return _distill(local, global_model, batch, cfg.epochs_global_to_local, cfg, np.random.default_rng(rng))


def distill_local_to_global(
    global_model: LayeredModel,
    pairs: Sequence[tuple[LayeredModel, SyntheticBatch]],
    cfg: DistillConfig,
    rng: np.random.Generator | int | None = None,
    order: Sequence[int] | None = None,
) -> tuple[LayeredModel, list[float]]:
    """Global model learns from each client in turn, one client at a time.

    Client order is a permutation drawn from ``cfg.client_order_seed`` unless
    ``order`` is given explicitly. Returns the updated global model and the
    mean KL of the last epoch for each client, in visiting order.
    """
    if not pairs:
        raise InputError("no (client model, synthetic batch) pairs to distill from")
    for local, batch in pairs:
        _check_pair(global_model, local)
        if len(batch) == 0:
            raise InputError("empty synthetic batch")
    if order is None:
        order = np.random.default_rng(cfg.client_order_seed).permutation(len(pairs))
    rng = np.random.default_rng(rng)
    model = global_model
    per_client = []
    for j in order:
        local, batch = pairs[int(j)]
        model, losses = _distill(model, local, batch, cfg.epochs_local_to_global, cfg, rng)
        per_client.append(losses[-1] if losses else float("nan"))
    return model, per_client
