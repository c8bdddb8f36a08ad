"""Experiment runner behind the CLI subcommands.

Output directory layout::

    resolved.ini      every config value, defaults included
    manifest.jsonl    one line per client: {"client": k, "indices": [...]}
    histogram.csv     per-client label counts
    partition.json    partition kind, client count, retained/dropped samples
    metrics.csv       one row per evaluation (round 0 = initial model)
    reports.jsonl     one RoundReport per round
    checkpoint.json   latest global model
"""
from __future__ import annotations

import json
import logging
import os
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from .attacks import boundary_probe
from .config import ConfigError, ExperimentConfig
from .data import (
    Dataset, label_histogram, load_csv, load_mnist_idx, make_synthetic_blobs, partition,
    read_manifest, write_histogram_csv, write_manifest,
)
from .evaluation import (
    MetricsWriter, RoundReport, boundary_grid, evaluate, per_class_accuracy,
    write_grid_csv, write_perclass_csv,
)
from .federation import (
    ServerState, load_checkpoint, run_round, save_checkpoint, stream,
)
from .nn import NetworkSpec, init_params

log = logging.getLogger(__name__)


class CheckpointNotFound(FileNotFoundError):
    pass


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    source = d["source"]
    num_classes = d.getint("num_classes")
    if source == "mnist":
        path = config_mod.data_path
        train = load_mnist_idx(path(d["train_images"]), path(d["train_labels"]), num_classes)
        test = load_mnist_idx(path(d["test_images"]), path(d["test_labels"]), num_classes)
    elif source == "csv":
        train = load_csv(config_mod.data_path(d["train_csv"]), num_classes)
        test = load_csv(config_mod.data_path(d["test_csv"]), num_classes)
    else:
        spread = d.getfloat("spread")
        train = make_synthetic_blobs(d.getint("n"), num_classes, spread, [cfg.seed, 100])
        test = make_synthetic_blobs(d.getint("n_test"), num_classes, spread, [cfg.seed, 101])
    for key, ds in (("limit_train", "train"), ("limit_test", "test")):
        limit = d.getint(key)
        if limit:
            if ds == "train":
                train = train.subset(np.arange(min(limit, len(train))))
            else:
                test = test.subset(np.arange(min(limit, len(test))))
    return train, test


def network_for(cfg: ExperimentConfig, train: Dataset) -> NetworkSpec:
    return NetworkSpec.mlp(train.dim, cfg.hidden, train.num_classes)


def make_shards(cfg: ExperimentConfig, train: Dataset):
    if cfg.manifest:
        shards = read_manifest(cfg.manifest)
        if len(shards) != cfg.partition.num_clients:
            raise ConfigError(
                f"manifest has {len(shards)} clients, config expects {cfg.partition.num_clients}"
            )
        return shards
    return partition(train, cfg.partition)


def _prepare_output(cfg: ExperimentConfig, out: Path | None) -> Path:
    out = Path(out) if out is not None else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.ini").write_text(config_mod.dumps(cfg.raw))
    return out


def write_partition(cfg: ExperimentConfig, train: Dataset, shards, out: Path) -> None:
    write_manifest(shards, out / "manifest.jsonl")
    write_histogram_csv(label_histogram(train, shards), out / "histogram.csv")
    retained = sum(s.n_k for s in shards)
    summary = {
        "kind": cfg.partition.kind,
        "clients": len(shards),
        "samples": len(train),
        "retained": retained,
        "dropped": len(train) - retained,
        "empty_clients": sum(1 for s in shards if s.n_k == 0),
    }
    (out / "partition.json").write_text(json.dumps(summary, indent=2) + "\n")


def cmd_partition(cfg: ExperimentConfig, out=None) -> Path:
    out = _prepare_output(cfg, out)
    train, _ = load_datasets(cfg)
    write_partition(cfg, train, make_shards(cfg, train), out)
    return out / "manifest.jsonl"


def _atomic_checkpoint(path: Path, spec, server) -> None:
    tmp = path.with_suffix(".tmp")
    save_checkpoint(tmp, spec, server)
    os.replace(tmp, path)


def cmd_train(cfg: ExperimentConfig, out=None, threads: int = 1) -> Path:
    """Train for ``cfg.fed.rounds`` rounds, evaluating every ``eval_interval``
    rounds and after the last one. Returns the output directory."""
    out = _prepare_output(cfg, out)
    chash = config_mod.config_hash(cfg.raw)
    train, test = load_datasets(cfg)
    shards = make_shards(cfg, train)
    write_partition(cfg, train, shards, out)
    spec = network_for(cfg, train)
    server = ServerState(init_params(spec, stream(cfg.seed, "init")), 0, cfg.seed)
    writer = MetricsWriter(out / "metrics.csv")
    reports = out / "reports.jsonl"
    reports.write_text("")

    def record(report: RoundReport, evaluate_now: bool) -> None:
        if evaluate_now:
            report.metrics = evaluate(spec, server.global_params, test, cfg.eval_attacks,
                                      stream(cfg.seed, "eval", server.round_index))
            writer.write(server.round_index, report.metrics,
                         report.wall_ms if cfg.wall_clock else 0.0)
        report.config_hash = chash
        if not cfg.wall_clock:
            report.wall_ms = 0.0
        with open(reports, "a") as f:
            f.write(report.to_json() + "\n")

    record(RoundReport(round=0), True)
    _atomic_checkpoint(out / "checkpoint.json", spec, server)
    for r in range(1, cfg.fed.rounds + 1):
        server, report = run_round(server, shards, train, spec, cfg.fed, threads)
        due = r % cfg.eval_interval == 0 or r == cfg.fed.rounds
        record(report, due)
        _atomic_checkpoint(out / "checkpoint.json", spec, server)
        if report.metrics is not None:
            m = report.metrics
            log.info("round %d: a_cln=%.4f a_rob_avg=%.4f", r, m.a_cln, m.a_rob_avg)
    return out


def _load_model(cfg: ExperimentConfig, checkpoint, train: Dataset):
    if checkpoint is None:
        spec = network_for(cfg, train)
        return spec, ServerState(init_params(spec, stream(cfg.seed, "init")), 0, cfg.seed)
    if not Path(checkpoint).exists():
        raise CheckpointNotFound(f"checkpoint not found: {checkpoint}")
    return load_checkpoint(checkpoint, network_for(cfg, train))


def cmd_evaluate(checkpoint, cfg: ExperimentConfig, out=None,
                 grid_resolution: int = 100) -> Path:
    """Write ``metrics.csv`` (one row), ``perclass.csv`` and, for 2D inputs,
    ``grid.csv`` for a checkpoint."""
    if not Path(checkpoint).exists():
        raise CheckpointNotFound(f"checkpoint not found: {checkpoint}")
    out = _prepare_output(cfg, out)
    train, test = load_datasets(cfg)
    spec, server = _load_model(cfg, checkpoint, train)
    t0 = time.perf_counter()
    metrics = evaluate(spec, server.global_params, test, cfg.eval_attacks,
                       stream(cfg.seed, "eval", server.round_index))
    wall = (time.perf_counter() - t0) * 1000.0 if cfg.wall_clock else 0.0
    MetricsWriter(out / "metrics.csv").write(server.round_index, metrics, wall)
    robust_cfg = next((c for c in cfg.eval_attacks if c.kind == "pgd"),
                      cfg.eval_attacks[0] if cfg.eval_attacks else None)
    clean, robust = per_class_accuracy(spec, server.global_params, test, robust_cfg,
                                       stream(cfg.seed, "eval", server.round_index, 1))
    write_perclass_csv(out / "perclass.csv", clean, robust)
    if spec.input_dim == 2:
        bounds = (0.0, 1.0, 0.0, 1.0)
        write_grid_csv(out / "grid.csv",
                       boundary_grid(spec, server.global_params, bounds, grid_resolution), bounds)
    return out


def cmd_probe(cfg: ExperimentConfig, checkpoint=None, client: int = 0, out=None) -> Path:
    """Boundary distances of one client's samples; writes ``probe.csv`` as a
    ``d,count`` histogram over ``0..steps``."""
    out = _prepare_output(cfg, out)
    train, _ = load_datasets(cfg)
    shards = make_shards(cfg, train)
    if not 0 <= client < len(shards):
        raise ConfigError(f"client {client} out of range [0, {len(shards)})")
    spec, server = _load_model(cfg, checkpoint, train)
    idx = shards[client].index_array()
    attack = cfg.fed.defense.attack
    if attack.kind == "fgsm":
        raise ConfigError("probe needs an iterative attack (attack.kind = pgd or mim)")
    rng = stream(cfg.seed, "attack", server.round_index, client)
    ds = []
    for i in range(0, len(idx), 1000):
        b = idx[i : i + 1000]
        ds.append(boundary_probe(spec, server.global_params, train.features[b],
                                 train.labels[b], attack, rng).d)
    d = np.concatenate(ds) if ds else np.zeros(0, dtype=np.int64)
    counts = np.bincount(d, minlength=attack.steps + 1)
    with open(out / "probe.csv", "w") as f:
        f.write("d,count\n")
        for v, c in enumerate(counts):
            f.write(f"{v},{int(c)}\n")
    return out / "probe.csv"
