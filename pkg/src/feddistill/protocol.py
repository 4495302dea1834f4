"""Round orchestration: sampling, local update, generators, aggregation, distillation."""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import model_core as mc
from .datasets import ClientDataset
from .distill import DistillConfig, distill_global_to_local, distill_local_to_global
from .errors import ConfigError, FedDistillError, InputError, RoundError
from .evaluation import RoundReport, mean_client_accuracy
from .generator import GenTrainConfig, SyntheticBatch, random_batch, train_generator
from .model_core import LayeredModel, ParamSet

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    FEDBKD = "fedbkd"
    FEDAVG = "fedavg"
    FEDREP = "fedrep"
    LOCAL_ONLY = "local_only"
    ABL_RANDOM_SYN = "abl_random_syn"
    ABL_NO_DISTILL = "abl_no_distill"
    ABL_G2L_ONLY = "abl_g2l_only"
    ABL_L2G_ONLY = "abl_l2g_only"

    @property
    def uses_synthetic(self) -> bool:
        return self in (Strategy.FEDBKD, Strategy.ABL_RANDOM_SYN, Strategy.ABL_G2L_ONLY, Strategy.ABL_L2G_ONLY)

    @property
    def trains_generator(self) -> bool:
        return self.uses_synthetic and self is not Strategy.ABL_RANDOM_SYN

    @property
    def local_to_global(self) -> bool:
        return self in (Strategy.FEDBKD, Strategy.ABL_RANDOM_SYN, Strategy.ABL_L2G_ONLY)

    @property
    def global_to_local(self) -> bool:
        return self in (Strategy.FEDBKD, Strategy.ABL_RANDOM_SYN, Strategy.ABL_G2L_ONLY)


# stream tags for per-(seed, round, client) randomness
_SAMPLE, _LOCAL, _GEN, _G2L, _L2G, _RANDOM, _ORDER = range(7)


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 100
    participation: float = 0.1
    head_epochs: int = 10
    learning_rate: float = 0.01
    batch_size: int = 10
    hidden: tuple[int, ...] = (64, 32)
    seed: int = 0
    distill: DistillConfig = field(default_factory=DistillConfig)
    gen: GenTrainConfig = field(default_factory=GenTrainConfig)

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if not 0 < self.participation <= 1:
            raise ConfigError("participation must lie in (0, 1]")
        if self.head_epochs < 1:
            raise ConfigError("head_epochs (tau) must be >= 1")
        mc.SGDConfig(self.learning_rate, self.batch_size)
        object.__setattr__(self, "hidden", tuple(self.hidden))

    @property
    def sgd(self) -> mc.SGDConfig:
        return mc.SGDConfig(self.learning_rate, self.batch_size)


@dataclass(frozen=True)
class ClientState:
    client_id: int
    model: LayeredModel
    data: ClientDataset
    last_sampled_round: int = -1


@dataclass(frozen=True)
class ServerState:
    global_model: LayeredModel
    round: int = 0
    seed: int = 0
    strategy: Strategy = Strategy.FEDBKD


def _seed(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(p) for p in parts])


def sample_clients(M: int, participation: float, round_seed) -> list[int]:
    """``max(floor(participation * M), 1)`` distinct ids, uniformly, sorted."""
    if M < 1:
        raise InputError("need at least one client")
    m = max(int(math.floor(participation * M + 1e-9)), 1)
    m = min(m, M)
    rng = np.random.default_rng(round_seed)
    return sorted(int(i) for i in rng.choice(M, size=m, replace=False))


def client_init(local: LayeredModel, global_model: LayeredModel) -> LayeredModel:
    """Global representation layers under the client's own head."""
    if local.arch != global_model.arch:
        raise InputError("client and global architectures differ")
    return local.with_params(mc.replace_representation(local.params, global_model.params, local.partition))


def client_local_update(
    model: LayeredModel,
    data: ClientDataset,
    tau: int,
    sgd: mc.SGDConfig,
    rng: np.random.Generator,
) -> tuple[LayeredModel, list[float]]:
    """``tau`` head-only epochs, then one representation-only epoch, on the client's train split."""
    if len(data.train) == 0:
        raise InputError(f"client {data.client_id} has no training data")
    X, y = data.train.features, data.train.labels
    model, head_hist = mc.train_epochs(model, X, y, model.partition.classification_keys, tau, sgd, rng)
    model, rep_hist = mc.train_epochs(model, X, y, model.partition.representation_keys, 1, sgd, rng)
    return model, head_hist + rep_hist


def aggregate(models: Sequence[ParamSet]) -> ParamSet:
    """Unweighted element-wise mean in list order."""
    return mc.mean_params(list(models))


def _evaluate_clients(clients: Sequence[ClientState]) -> dict[int, float]:
    out = {}
    for c in clients:
        test = c.data.test
        out[c.client_id] = mc.accuracy(c.model, test.features, test.labels) if len(test) else float("nan")
    return out


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    cfg: FedConfig,
) -> tuple[ServerState, list[ClientState], RoundReport]:
    """One communication round; returns new server/client states and the round report.

    Unsampled clients are passed through unchanged (same objects).
    """
    start = time.perf_counter()
    strategy = Strategy(server.strategy)
    t = server.round + 1
    seed = server.seed
    clients = list(clients)
    theta_g = server.global_model
    for c in clients:
        if c.model.arch != theta_g.arch:
            raise InputError(f"client {c.client_id} architecture differs from the global model")

    sampled = sample_clients(len(clients), cfg.participation, _seed(seed, t, _SAMPLE))
    try:
        updated: dict[int, LayeredModel] = {}
        for i in sampled:
            c = clients[i]
            if len(c.data.train) == 0:
                log.warning("round %d: client %d has no training data, skipped", t, c.client_id)
                continue
            if strategy is Strategy.LOCAL_ONLY:
                start_model = c.model
            elif strategy is Strategy.FEDAVG:
                start_model = theta_g
            else:
                start_model = client_init(c.model, theta_g)
            rng = np.random.default_rng(_seed(seed, t, _LOCAL, c.client_id))
            updated[i], _ = client_local_update(start_model, c.data, cfg.head_epochs, cfg.sgd, rng)
        active = sorted(updated)
        communicating = strategy is not Strategy.LOCAL_ONLY
        uploads = len(active) if communicating else 0

        batches: dict[int, SyntheticBatch] = {}
        gen_loss: dict[int, float] = {}
        if strategy.uses_synthetic:
            for i in active:
                cid = clients[i].client_id
                if strategy.trains_generator:
                    _, batches[i], info = train_generator(updated[i], cfg.gen, _seed(seed, t, _GEN, cid), cid)
                    gen_loss[cid] = info["final_loss"]
                else:
                    batches[i] = random_batch(
                        updated[i], cfg.gen.n, _seed(seed, t, _RANDOM, cid), cid, cfg.gen.inject_layer
                    )

        if active and communicating:
            mean = aggregate([updated[i].params for i in active])
            if strategy is Strategy.FEDREP:
                mean = mc.replace_representation(theta_g.params, mean, theta_g.partition)
            theta_g = theta_g.with_params(mean)
        agg_loss = _global_loss(theta_g, [clients[i].data for i in active])

        l2g_kl = float("nan")
        if active and strategy.local_to_global:
            order = np.random.default_rng(_seed(cfg.distill.client_order_seed, seed, t, _ORDER)).permutation(len(active))
            theta_g, per_client = distill_local_to_global(
                theta_g,
                [(updated[i], batches[i]) for i in active],
                cfg.distill,
                rng=_seed(seed, t, _L2G),
                order=order,
            )
            l2g_kl = float(np.mean(per_client))

        g2l_kl = float("nan")
        if active and strategy.global_to_local:
            kls = []
            for i in active:
                rng = _seed(seed, t, _G2L, clients[i].client_id)
                updated[i], losses = distill_global_to_local(updated[i], theta_g, batches[i], cfg.distill, rng)
                if losses:
                    kls.append(losses[-1])
            g2l_kl = float(np.mean(kls)) if kls else float("nan")
    except FedDistillError as exc:
        raise RoundError(t, strategy.value, exc) from exc

    for i in active:
        clients[i] = replace(clients[i], model=updated[i], last_sampled_round=t)
    downloads = len(active) if communicating else 0
    accs = _evaluate_clients(clients)
    report = RoundReport(
        round=t,
        sampled=[clients[i].client_id for i in sampled],
        client_accuracy=accs,
        mean_client_acc=mean_client_accuracy(accs),
        agg_loss=agg_loss,
        g2l_kl=g2l_kl,
        l2g_kl=l2g_kl,
        gen_loss=gen_loss,
        seconds=time.perf_counter() - start,
        uploads=uploads,
        downloads=downloads,
    )
    return replace(server, global_model=theta_g, round=t), clients, report


def _global_loss(model: LayeredModel, datas: Sequence[ClientDataset]) -> float:
    losses = [mc.cross_entropy(mc.forward(model, d.train.features), d.train.labels) for d in datas if len(d.train)]
    return float(np.mean(losses)) if losses else float("nan")


@dataclass
class FederationResult:
    server: ServerState
    clients: list[ClientState]
    history: list[RoundReport]
    global_checkpoints: list[LayeredModel]  # last few global models, oldest first


def init_states(
    datasets: Sequence[ClientDataset],
    cfg: FedConfig,
    strategy: Strategy | str,
) -> tuple[ServerState, list[ClientState]]:
    """Global and client models start from one shared seeded initialisation."""
    if not datasets:
        raise InputError("no client datasets")
    first = datasets[0].train if len(datasets[0].train) else datasets[0].test
    arch = mc.classifier_architecture(first.dim, first.class_count, cfg.hidden)
    model = mc.init_model(arch, np.random.default_rng(_seed(cfg.seed, 0, 99)))
    clients = [ClientState(d.client_id, model, d) for d in datasets]
    for k, c in enumerate(clients):
        if c.client_id != k:
            raise InputError("client ids must be 0..M-1 in order")
    return ServerState(model, 0, cfg.seed, Strategy(strategy)), clients


def run_federation(
    cfg: FedConfig,
    datasets: Sequence[ClientDataset],
    strategy: Strategy | str = Strategy.FEDBKD,
    keep_checkpoints: int = 5,
    on_round=None,
) -> FederationResult:
    """Run ``cfg.rounds`` rounds; ``on_round(report)`` is called after each one."""
    server, clients = init_states(datasets, cfg, strategy)
    history: list[RoundReport] = []
    checkpoints: list[LayeredModel] = []
    for _ in range(cfg.rounds):
        server, clients, report = run_round(server, clients, cfg)
        history.append(report)
        checkpoints = (checkpoints + [server.global_model])[-keep_checkpoints:]
        if on_round is not None:
            on_round(report)
    return FederationResult(server, clients, history, checkpoints)
