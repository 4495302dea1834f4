"""Config loading, (strategy, seed) grid runs, on-disk artifacts and reports."""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import hashlib
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import __version__
from . import datasets as ds
from . import model_core as mc
from .distill import DistillConfig
from .errors import ConfigError, FedDistillError
from .evaluation import (
    EvalSummary,
    RoundReport,
    generalization_score,
    logit_l1_diagnostic,
    personalization_score,
    representation_dump,
)
from .generator import GenTrainConfig, random_batch, train_generator
from .protocol import FedConfig, Strategy, run_federation

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "FEDDISTILL_OUTPUT_ROOT"
METRICS_COLUMNS = ("round", "mean_client_acc", "agg_loss", "g2l_kl", "l2g_kl", "gen_loss_mean")
MANIFEST = "manifest.json"

# section -> key -> (type check, default)
_INT, _FLOAT, _STR, _INTS, _OPT_FLOAT = "int", "float", "str", "int list", "float or null"
SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "benchmark": {
        "classes": (_INT, 5),
        "dim": (_INT, 20),
        "samples_per_class": (_INT, 200),
        "separation": (_FLOAT, 6.0),
    },
    "partition": {
        "clients": (_INT, 20),
        "classes_per_client": (_INT, 2),
        "allocation": (_STR, "equal"),
        "lognormal_mean": (_OPT_FLOAT, None),
        "lognormal_sigma": (_FLOAT, 0.5),
    },
    "federation": {
        "rounds": (_INT, 100),
        "participation": (_FLOAT, 0.1),
        "head_epochs": (_INT, 10),
        "learning_rate": (_FLOAT, 0.01),
        "batch_size": (_INT, 10),
        "hidden": (_INTS, [64, 32]),
    },
    "generator": {
        "n": (_INT, 1000),
        "lam": (_FLOAT, 1.0),
        "epochs": (_INT, 6),
        "learning_rate": (_FLOAT, 0.01),
        "batch_size": (_INT, 32),
        "noise_dim": (_INT, 16),
        "hidden": (_INTS, [64, 64]),
        "inject_layer": (_INT, 0),
    },
    "distill": {
        "epochs_global_to_local": (_INT, 4),
        "epochs_local_to_global": (_INT, 1),
        "learning_rate": (_FLOAT, 0.01),
        "batch_size": (_INT, 32),
        "client_order_seed": (_INT, 0),
    },
    "evaluation": {
        "fine_tune_epochs": (_INT, 10),
        "fine_tune_lr": (_FLOAT, 0.01),
        "diagnostic_batch_size": (_INT, 10),
        "diagnostic_clients": (_INT, 3),
    },
}
TOP_LEVEL = {"strategies": ["fedbkd"], "seeds": [0], "output_dir": "runs/default"}


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: dict
    partition: dict
    federation: dict
    generator: dict
    distill: dict
    evaluation: dict
    strategies: tuple[str, ...]
    seeds: tuple[int, ...]
    output_dir: str

    def to_dict(self) -> dict:
        d = {s: dict(getattr(self, s)) for s in SCHEMA}
        d.update(strategies=list(self.strategies), seeds=list(self.seeds), output_dir=self.output_dir)
        return d

    def config_hash(self) -> str:
        """sha256 of the canonical JSON form; output_dir is excluded so runs can move."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def fed_config(self, seed: int) -> FedConfig:
        f = self.federation
        return FedConfig(
            rounds=f["rounds"],
            participation=f["participation"],
            head_epochs=f["head_epochs"],
            learning_rate=f["learning_rate"],
            batch_size=f["batch_size"],
            hidden=tuple(f["hidden"]),
            seed=seed,
            distill=DistillConfig(**self.distill),
            gen=GenTrainConfig(**{**self.generator, "hidden": tuple(self.generator["hidden"])}),
        )

    def partition_spec(self, seed: int) -> ds.PartitionSpec:
        p = self.partition
        return ds.PartitionSpec(
            client_count=p["clients"],
            classes_per_client=p["classes_per_client"],
            sample_allocation=p["allocation"],
            lognormal_mean=p["lognormal_mean"],
            lognormal_sigma=p["lognormal_sigma"],
            seed=seed,
        )

    def build_data(self, seed: int) -> tuple[list[ds.ClientDataset], ds.ClientDataset]:
        """Federated clients and the held-out new client; depends on ``seed`` only, never on strategy."""
        b = self.benchmark
        data = ds.make_gaussian_benchmark(b["classes"], b["dim"], b["samples_per_class"], b["separation"], seed)
        spec = self.partition_spec(seed)
        new_client, rest = ds.holdout_client(data, spec)
        return ds.partition_by_shards(rest, spec), new_client


def _check_type(kind: str, value: Any) -> bool:
    if kind == _INT:
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == _FLOAT:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == _OPT_FLOAT:
        return value is None or _check_type(_FLOAT, value)
    if kind == _STR:
        return isinstance(value, str)
    if kind == _INTS:
        return isinstance(value, list) and all(_check_type(_INT, v) for v in value)
    raise AssertionError(kind)


def _key_lines(text: str) -> dict[tuple[str, ...], int]:
    """1-based line of every mapping key, addressed by its path."""
    lines: dict[tuple[str, ...], int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = (*path, str(k.value))
                lines[p] = k.start_mark.line + 1
                walk(v, p)

    root = yaml.compose(text)
    if root is not None:
        walk(root, ())
    return lines


def _where(lines, path, source) -> str:
    for n in range(len(path), 0, -1):
        if tuple(path[:n]) in lines:
            return f"{source}:{lines[tuple(path[:n])]}"
    return source


def parse_override(item: str) -> tuple[tuple[str, ...], Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    return tuple(key.strip().split(".")), yaml.safe_load(raw)


def load_config(
    text: str,
    overrides: list[str] | tuple[str, ...] = (),
    source: str = "<config>",
) -> ExperimentConfig:
    """Validate config text plus ``section.key=value`` overrides; errors name the offending line."""
    try:
        raw = yaml.safe_load(text) or {}
        lines = _key_lines(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: malformed config: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")

    for item in overrides:
        path, value = parse_override(item)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part} is not a section")
        node[path[-1]] = value
        lines[path] = 0  # marks the value as coming from an override

    def where(path):
        if lines.get(tuple(path)) == 0:
            return f"override {'.'.join(path)}"
        return _where(lines, path, source)

    resolved: dict[str, Any] = {}
    for key in raw:
        if key not in SCHEMA and key not in TOP_LEVEL:
            raise ConfigError(f"{where((key,))}: unknown key {key!r}")
    for section, fields in SCHEMA.items():
        given = raw.get(section) or {}
        if not isinstance(given, dict):
            raise ConfigError(f"{where((section,))}: {section} must be a mapping")
        out = {}
        for key in given:
            if key not in fields:
                raise ConfigError(f"{where((section, key))}: unknown key {section}.{key}")
        for key, (kind, default) in fields.items():
            value = given.get(key, default)
            if not _check_type(kind, value):
                raise ConfigError(f"{where((section, key))}: {section}.{key} must be {kind}, got {value!r}")
            out[key] = float(value) if kind == _FLOAT else value
        resolved[section] = out

    strategies = raw.get("strategies", TOP_LEVEL["strategies"])
    if not isinstance(strategies, list) or not strategies:
        raise ConfigError(f"{where(('strategies',))}: strategies must be a non-empty list")
    for s in strategies:
        try:
            Strategy(s)
        except ValueError:
            known = ", ".join(x.value for x in Strategy)
            raise ConfigError(f"{where(('strategies',))}: unknown strategy {s!r} (known: {known})") from None
    seeds = raw.get("seeds", TOP_LEVEL["seeds"])
    if not _check_type(_INTS, seeds) or not seeds:
        raise ConfigError(f"{where(('seeds',))}: seeds must be a non-empty list of integers")
    output_dir = raw.get("output_dir", TOP_LEVEL["output_dir"])
    if not isinstance(output_dir, str):
        raise ConfigError(f"{where(('output_dir',))}: output_dir must be a string")

    cfg = ExperimentConfig(
        **resolved, strategies=tuple(strategies), seeds=tuple(seeds), output_dir=output_dir
    )
    # constructing the runtime objects runs every range check
    for section, build in (
        ("federation", lambda: cfg.fed_config(0)),
        ("partition", lambda: cfg.partition_spec(0)),
        ("benchmark", lambda: _check_benchmark(cfg)),
    ):
        try:
            build()
        except FedDistillError as exc:
            raise ConfigError(f"{where((section,))}: {exc}") from exc
    return cfg


def _check_benchmark(cfg: ExperimentConfig) -> None:
    b = cfg.benchmark
    if b["classes"] < 2 or b["dim"] < 2 or b["samples_per_class"] < 1 or not b["separation"] > 0:
        raise ConfigError("benchmark needs classes >= 2, dim >= 2, samples_per_class >= 1, separation > 0")
    if cfg.partition["classes_per_client"] > b["classes"]:
        raise ConfigError("partition.classes_per_client exceeds benchmark.classes")
    if not 0 <= cfg.generator["inject_layer"] < len(cfg.federation["hidden"]) + 1:
        raise ConfigError("generator.inject_layer out of range for the classifier")


def load_config_file(path: str | Path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return load_config(text, overrides, source=str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def metrics_row(report: RoundReport) -> list[str]:
    return [
        str(report.round),
        _fmt(report.mean_client_acc),
        _fmt(report.agg_loss),
        _fmt(report.g2l_kl),
        _fmt(report.l2g_kl),
        _fmt(report.gen_loss_mean),
    ]


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def run_dir_for(root: Path, strategy: str, seed: int) -> Path:
    return root / strategy / f"seed{seed}"


def run_single(cfg: ExperimentConfig, strategy: str, seed: int, root: Path) -> dict:
    """One federation; writes metrics, timings, checkpoints and summary under ``root/strategy/seedN``."""
    out = run_dir_for(root, strategy, seed)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    clients, new_client = cfg.build_data(seed)
    fed = cfg.fed_config(seed)

    metrics_path, timing_path = out / "metrics.csv", out / "timing.csv"
    with metrics_path.open("w", newline="") as mfh, timing_path.open("w", newline="") as tfh:
        mw, tw = csv.writer(mfh, lineterminator="\n"), csv.writer(tfh, lineterminator="\n")
        mw.writerow(METRICS_COLUMNS)
        tw.writerow(("round", "seconds", "uploads", "downloads"))

        def on_round(report: RoundReport):
            mw.writerow(metrics_row(report))
            tw.writerow((report.round, f"{report.seconds:.6f}", report.uploads, report.downloads))
            mfh.flush()

        result = run_federation(fed, clients, strategy, on_round=on_round)

    with (out / "rounds.jsonl").open("w") as fh:
        for r in result.history:
            d = r.to_dict()
            d.pop("seconds")
            fh.write(json.dumps(d, sort_keys=True) + "\n")

    mc.save_checkpoint(result.server.global_model, out / "checkpoints" / "global_final.ckpt")
    for k, ckpt in enumerate(result.global_checkpoints):
        mc.save_checkpoint(ckpt, out / "checkpoints" / f"global_last{len(result.global_checkpoints) - k}.ckpt")
    for c in result.clients:
        mc.save_checkpoint(c.model, out / "checkpoints" / f"client{c.client_id}.ckpt")

    ev = cfg.evaluation
    pers = personalization_score(result.history) if len(result.history) >= 10 else None
    gen = None
    if len(result.global_checkpoints) == 5:
        fed_ids = np.concatenate([c.ids for c in clients])
        gen = generalization_score(
            result.global_checkpoints,
            new_client,
            mc.SGDConfig(ev["fine_tune_lr"], cfg.federation["batch_size"]),
            epochs=ev["fine_tune_epochs"],
            seed=seed,
            federation_ids=fed_ids,
        )
    summary = EvalSummary(strategy, seed, pers, gen, cfg.config_hash(), len(result.history))
    _atomic_write(out / "summary.json", json.dumps(dataclasses.asdict(summary), indent=2, sort_keys=True) + "\n")
    return {
        "strategy": strategy,
        "seed": seed,
        "dir": str(out.relative_to(root)),
        "metrics": str(metrics_path.relative_to(root)),
        "summary": str((out / "summary.json").relative_to(root)),
    }


def _run_job(args):
    text, strategy, seed, root = args
    cfg = load_config(text)
    return run_single(cfg, strategy, seed, Path(root))


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> Path:
    """Every (strategy, seed) run; the manifest is written last so partial runs are detectable."""
    root = resolve_output_dir(cfg)
    root.mkdir(parents=True, exist_ok=True)
    manifest_path = root / MANIFEST
    if manifest_path.exists():
        manifest_path.unlink()
    config_text = dump_config(cfg)
    (root / "config.yaml").write_text(config_text)
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    grid = [(s, seed) for s in cfg.strategies for seed in cfg.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_job, [(config_text, s, seed, str(root)) for s, seed in grid]))
    else:
        runs = []
        for s, seed in grid:
            t0 = time.perf_counter()
            runs.append(run_single(cfg, s, seed, root))
            log.info("finished %s seed %d in %.1fs", s, seed, time.perf_counter() - t0)
    manifest = {
        "config_hash": cfg.config_hash(),
        "code_version": __version__,
        "config": "config.yaml",
        "started": started,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
        "runs": runs,
    }
    _atomic_write(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def read_manifest(run_dir: str | Path) -> dict:
    run_dir = Path(run_dir)
    if not run_dir.is_dir() or not any(run_dir.iterdir()):
        raise FedDistillError(f"no runs found in {run_dir}")
    path = run_dir / MANIFEST
    if not path.exists():
        raise FedDistillError(f"run in {run_dir} is incomplete: {MANIFEST} is missing")
    return json.loads(path.read_text())


@dataclass
class ReportRow:
    strategy: str
    n_seeds: int
    personalization_mean: float | None
    personalization_min: float | None
    personalization_max: float | None
    generalization_mean: float | None
    generalization_min: float | None
    generalization_max: float | None

    @property
    def personalization_range(self):
        return _span(self.personalization_min, self.personalization_max)

    @property
    def generalization_range(self):
        return _span(self.generalization_min, self.generalization_max)


def _span(lo, hi):
    return None if lo is None else hi - lo


def _stats(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None, None
    return float(np.mean(vals)), float(min(vals)), float(max(vals))


def summarize(run_dir: str | Path) -> list[ReportRow]:
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    by_strategy: dict[str, list[dict]] = {}
    for run in manifest["runs"]:
        summary = json.loads((run_dir / run["summary"]).read_text())
        by_strategy.setdefault(run["strategy"], []).append(summary)
    rows = []
    for strategy, items in by_strategy.items():
        p = _stats([s["personalization_score"] for s in items])
        g = _stats([s["generalization_score"] for s in items])
        rows.append(ReportRow(strategy, len(items), *p, *g))
    return rows


def _pct(x):
    return "-" if x is None else f"{100 * x:.2f}"


def report(run_dir: str | Path) -> str:
    """Write ``report.csv`` into the run directory and return the aligned text table."""
    run_dir = Path(run_dir)
    rows = summarize(run_dir)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ("strategy", "n_seeds", "personalization_mean", "personalization_range",
         "generalization_mean", "generalization_range")
    )
    for r in rows:
        w.writerow((r.strategy, r.n_seeds, r.personalization_mean, r.personalization_range,
                    r.generalization_mean, r.generalization_range))
    (run_dir / "report.csv").write_text(buf.getvalue())

    header = ("strategy", "seeds", "personalization", "generalization")
    body = [
        (
            r.strategy,
            str(r.n_seeds),
            f"{_pct(r.personalization_mean)} ± {_pct(r.personalization_range)}",
            f"{_pct(r.generalization_mean)} ± {_pct(r.generalization_range)}",
        )
        for r in rows
    ]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.ljust(wd) for c, wd in zip(header, widths))]
    lines.append("  ".join("-" * wd for wd in widths))
    lines += ["  ".join(c.ljust(wd) for c, wd in zip(row, widths)) for row in body]
    return "\n".join(lines) + "\n"


def diagnostic_series(
    cfg: ExperimentConfig,
    seed: int,
    global_model: mc.LayeredModel,
    client_models: dict[int, mc.LayeredModel],
    clients: list[ds.ClientDataset],
) -> list[tuple[int, float, float]]:
    """(batch index, L1 synthetic-real, L1 random-real) over the first few clients' train data."""
    fed = cfg.fed_config(seed)
    ev = cfg.evaluation
    rows: list[tuple[int, float, float]] = []
    for c in clients[: ev["diagnostic_clients"]]:
        local = client_models[c.client_id]
        ss = np.random.SeedSequence([seed, c.client_id, 4242])
        _, synthetic, _ = train_generator(local, fed.gen, ss, c.client_id)
        # equal sample counts so the three series have the same batches
        n = min(len(c.train), len(synthetic))
        noise = random_batch(local, n, np.random.SeedSequence([seed, c.client_id, 4243]), c.client_id, fed.gen.inject_layer)
        series = logit_l1_diagnostic(
            global_model,
            synthetic.inputs[:n],
            noise.inputs,
            c.train.features[:n],
            ev["diagnostic_batch_size"],
            fed.gen.inject_layer,
        )
        offset = len(rows)
        rows.extend((offset + i, a, b) for i, a, b in series)
    return rows


def diagnose_run(cfg: ExperimentConfig, root: Path, strategy: str, seed: int) -> list[tuple[int, float, float]]:
    """Logit L1 series for one finished run, plus activation dumps; written next to its checkpoints."""
    out = run_dir_for(root, strategy, seed)
    clients, _ = cfg.build_data(seed)
    global_model = mc.load_checkpoint(out / "checkpoints" / "global_final.ckpt")
    shown = clients[: cfg.evaluation["diagnostic_clients"]]
    local = {c.client_id: mc.load_checkpoint(out / "checkpoints" / f"client{c.client_id}.ckpt") for c in shown}
    rows = diagnostic_series(cfg, seed, global_model, local, shown)
    with (out / "diagnostic.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("batch_index", "d_synthetic_real", "d_random_real"))
        w.writerows((i, repr(a), repr(b)) for i, a, b in rows)
    if clients:
        for k, grid in enumerate(representation_dump(global_model, clients[0].train.features)):
            np.savetxt(out / f"activations_layer{k + 1}.txt", grid, fmt="%.17g")
    return rows


def diagnose(run_dir: str | Path) -> dict[tuple[str, int], list[tuple[int, float, float]]]:
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    cfg = load_config_file(run_dir / manifest["config"])
    return {
        (run["strategy"], run["seed"]): diagnose_run(cfg, run_dir, run["strategy"], run["seed"])
        for run in manifest["runs"]
    }
