"""Gaussian benchmark and label-shard partitioning across clients."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, PartitionError


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    ids: np.ndarray | None = None  # row ids in the source benchmark

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise InputError("features must be n x d and labels length n")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise InputError(f"labels must lie in [0, {self.class_count})")
        if not np.isfinite(features).all():
            raise InputError("features contain NaN or Inf")
        ids = np.arange(len(labels)) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, index: np.ndarray) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.features[index], self.labels[index], self.class_count, self.ids[index])

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass(frozen=True)
class PartitionSpec:
    client_count: int
    classes_per_client: int
    sample_allocation: str = "equal"  # or "lognormal"
    lognormal_mean: float | None = None  # per-client mean count; None -> average shard pool
    lognormal_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.client_count < 1:
            raise InputError("client_count must be >= 1")
        if self.classes_per_client < 1:
            raise InputError("classes_per_client must be >= 1")
        if self.sample_allocation not in ("equal", "lognormal"):
            raise InputError(f"unknown sample allocation {self.sample_allocation!r}")


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    train: LabeledDataset
    test: LabeledDataset

    @property
    def class_set(self) -> frozenset[int]:
        return frozenset(np.concatenate([self.train.labels, self.test.labels]).tolist())

    @property
    def ids(self) -> np.ndarray:
        return np.concatenate([self.train.ids, self.test.ids])


def _class_means(C: int, d: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    if C <= d:
        # scaled random orthonormal frame: every pair sits exactly `separation` apart
        q, _ = np.linalg.qr(rng.standard_normal((d, C)))
        return (separation / np.sqrt(2.0)) * q.T
    means: list[np.ndarray] = []
    radius = separation * np.sqrt(C)
    while len(means) < C:
        cand = rng.standard_normal(d)
        cand *= radius / np.linalg.norm(cand)
        if all(np.linalg.norm(cand - m) >= separation for m in means):
            means.append(cand)
    return np.stack(means)


def make_gaussian_benchmark(C: int, d: int, n_per_class: int, separation: float, seed: int) -> LabeledDataset:
    """Unit-variance isotropic Gaussian blobs with pairwise mean distance >= separation."""
    if C < 2 or d < 2 or n_per_class < 1 or not separation > 0:
        raise InputError("need C >= 2, d >= 2, n_per_class >= 1, separation > 0")
    rng = np.random.default_rng(seed)
    means = _class_means(C, d, separation, rng)
    labels = np.repeat(np.arange(C), n_per_class)
    features = means[labels] + rng.standard_normal((C * n_per_class, d))
    return LabeledDataset(features, labels, C)


def lognormal_counts(M: int, mean_samples: float, sigma: float, seed: int) -> list[int]:
    """Per-client sample counts, lognormal with expectation ``mean_samples``; each >= 1."""
    if mean_samples < 1:
        raise InputError("mean_samples must be >= 1")
    if sigma == 0:
        return [int(round(mean_samples))] * M
    rng = np.random.default_rng(seed)
    mu = np.log(mean_samples) - sigma**2 / 2.0
    draws = rng.lognormal(mu, sigma, size=M)
    return [max(1, int(round(x))) for x in draws]


def _stratified_split(ds: LabeledDataset, rng: np.random.Generator, test_fraction: float = 0.2):
    train_idx, test_idx = [], []
    for c in np.unique(ds.labels):
        rows = rng.permutation(np.flatnonzero(ds.labels == c))
        n_test = int(round(test_fraction * len(rows)))
        if n_test == len(rows):
            n_test = len(rows) - 1
        test_idx.extend(rows[:n_test].tolist())
        train_idx.extend(rows[n_test:].tolist())
    return ds.take(np.sort(train_idx)), ds.take(np.sort(test_idx))


def _client(client_id: int, ds: LabeledDataset, rng: np.random.Generator) -> ClientDataset:
    train, test = _stratified_split(ds, rng)
    return ClientDataset(client_id, train, test)


def partition_by_shards(dataset: LabeledDataset, spec: PartitionSpec) -> list[ClientDataset]:
    """Deal ``S`` single-class shards from distinct classes to each of ``M`` clients.

    Shards are cut per class (class c gets ``k_c`` shards, ``sum k_c = M*S``,
    counts differing by at most one). Laid out class by class, client ``j``
    takes shard positions ``j, j+M, ..., j+(S-1)M``; since no class owns more
    than ``M`` consecutive positions when ``S <= C``, those shards have distinct
    classes.
    """
    C, M, S = dataset.class_count, spec.client_count, spec.classes_per_client
    if S > C:
        raise PartitionError(f"classes_per_client={S} exceeds class count {C}")
    rng = np.random.default_rng(spec.seed)
    total = M * S
    class_order = rng.permutation(C)
    shard_counts = np.full(C, total // C)
    shard_counts[class_order[: total % C]] += 1

    shards: list[np.ndarray] = []
    shard_class: list[int] = []
    for c in class_order:
        rows = rng.permutation(np.flatnonzero(dataset.labels == c))
        k = int(shard_counts[c])
        if k == 0:
            continue
        if len(rows) < k:
            raise PartitionError(
                f"class {c} has {len(rows)} samples but needs {k} non-empty shards "
                f"(M={M}, S={S}); lower M or S or add samples"
            )
        for piece in np.array_split(rows, k):
            shards.append(piece)
            shard_class.append(int(c))

    client_ids = rng.permutation(M)
    pools = {}
    for slot in range(M):
        picks = [shards[slot + j * M] for j in range(S)]
        classes = [shard_class[slot + j * M] for j in range(S)]
        assert len(set(classes)) == S
        pools[int(client_ids[slot])] = np.concatenate(picks)

    if spec.sample_allocation == "lognormal":
        mean = spec.lognormal_mean or float(np.mean([len(p) for p in pools.values()]))
        counts = lognormal_counts(M, mean, spec.lognormal_sigma, spec.seed + 1)
        for cid in range(M):
            pool = pools[cid]
            if counts[cid] < len(pool):
                pools[cid] = _trim_keep_classes(pool, dataset.labels, counts[cid], rng)

    return [_client(cid, dataset.take(np.sort(pools[cid])), rng) for cid in range(M)]


def _trim_keep_classes(pool: np.ndarray, labels: np.ndarray, count: int, rng) -> np.ndarray:
    # keep one sample of every class first so the class set is not silently reduced
    by_class = [rng.permutation(pool[labels[pool] == c]) for c in np.unique(labels[pool])]
    head = [rows[0] for rows in by_class]
    rest = rng.permutation(np.concatenate([rows[1:] for rows in by_class]))
    keep = max(count, len(head))
    return np.concatenate([np.asarray(head), rest[: keep - len(head)]]).astype(np.int64)


def holdout_client(dataset: LabeledDataset, spec: PartitionSpec, seed: int | None = None):
    """Carve out one non-participating client with ``S`` classes, sized like a federated client.

    Returns ``(client, remaining_dataset)``; the client id is ``spec.client_count``.
    """
    C, M, S = dataset.class_count, spec.client_count, spec.classes_per_client
    if S > C:
        raise PartitionError(f"classes_per_client={S} exceeds class count {C}")
    rng = np.random.default_rng(spec.seed + 7919 if seed is None else seed)
    shard_size = len(dataset) // ((M + 1) * S)
    if shard_size < 2:
        raise PartitionError(
            f"{len(dataset)} samples are too few to hold out a client next to {M} federated clients"
        )
    classes = rng.choice(C, size=S, replace=False)
    picked = []
    for c in sorted(classes.tolist()):
        rows = np.flatnonzero(dataset.labels == c)
        if len(rows) < shard_size * 2:
            raise PartitionError(f"class {c} has too few samples ({len(rows)}) for a holdout shard")
        picked.append(rng.choice(rows, size=shard_size, replace=False))
    chosen = np.sort(np.concatenate(picked))
    mask = np.ones(len(dataset), dtype=bool)
    mask[chosen] = False
    client = _client(M, dataset.take(chosen), rng)
    return client, dataset.take(np.flatnonzero(mask))


def label_tv_distance(a: LabeledDataset, b: LabeledDataset) -> float:
    pa = a.label_histogram() / max(len(a), 1)
    pb = b.label_histogram() / max(len(b), 1)
    return 0.5 * float(np.abs(pa - pb).sum())


def save_dataset(ds: LabeledDataset, path: str | Path) -> None:
    """Columnar text: ``# C=<C> d=<d>`` header, then ``label f1 ... fd`` per row."""
    rows = np.column_stack([ds.labels.astype(np.float64), ds.features])
    header = f"C={ds.class_count} d={ds.dim}"
    np.savetxt(Path(path), rows, fmt=["%d"] + ["%.17g"] * ds.dim, header=header, comments="# ")


def load_dataset(path: str | Path) -> LabeledDataset:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().lstrip("#").split()
    meta = dict(item.split("=") for item in header)
    C, d = int(meta["C"]), int(meta["d"])
    rows = np.loadtxt(path, ndmin=2).reshape(-1, d + 1)
    return LabeledDataset(rows[:, 1:], rows[:, 0].astype(np.int64), C)
