"""Synchronous federated training: client sampling, local adversarial
training against a frozen copy of the global model, and FedAvg aggregation
(FedProx when ``prox_mu > 0``).

Randomness is keyed by ``(seed, stream, round, client)`` so a round gives
the same result whatever order or thread its clients run on.
"""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks
from .data import ClientShard, Dataset
from .evaluation import RoundReport
from .losses import (
    DefenseConfig, loss_alp, loss_dbfat, loss_pgd_at, loss_plain, loss_trades,
    uniform_rho, weights_rho,
)
from .nn import NetworkSpec, ParamSet, backward_params, check_params, forward, sgd_step

log = logging.getLogger(__name__)

STREAMS = {"partition": 1, "init": 2, "selection": 3, "attack": 4, "shuffle": 5, "eval": 6}

CHECKPOINT_FORMAT = "dbfat-checkpoint"
CHECKPOINT_VERSION = 1


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named purpose and integer keys."""
    return np.random.default_rng([int(seed), STREAMS[name], *(int(k) for k in keys)])


class TrainingDivergedError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class FedConfig:
    num_clients: int = 100
    clients_per_round: int = 10
    local_epochs: int = 5
    batch_size: int = 10
    lr: float = 0.01
    rounds: int = 10
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    prox_mu: float = 0.0
    seed: int = 0
    eps_warmup_rounds: int = 0

    def __post_init__(self):
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ValueError("need 1 <= clients_per_round <= num_clients")
        if self.local_epochs < 1 or self.batch_size < 1 or self.rounds < 0:
            raise ValueError("local_epochs and batch_size must be >= 1, rounds >= 0")
        if self.lr < 0 or self.prox_mu < 0:
            raise ValueError("lr and prox_mu must be >= 0")
        if self.eps_warmup_rounds < 0:
            raise ValueError("eps_warmup_rounds must be >= 0")

    def defense_at(self, round_index: int) -> DefenseConfig:
        """Training defense for a round: epsilon ramps linearly up to its
        configured value over the first ``eps_warmup_rounds`` rounds."""
        w = self.eps_warmup_rounds
        if w <= round_index:
            return self.defense
        attack = self.defense.attack
        return replace(self.defense, attack=attack.with_(epsilon=attack.epsilon * (round_index + 1) / w))


@dataclass(frozen=True)
class ServerState:
    global_params: ParamSet
    round_index: int = 0
    seed: int = 0


@dataclass
class ClientUpdate:
    client_id: int
    params: ParamSet
    n_k: int
    epoch_losses: list[float] = field(default_factory=list)
    rho_fallbacks: int = 0


def select_clients(num_clients: int, per_round: int, round_index: int, seed: int,
                   eligible=None) -> list[int]:
    """Uniform sample without replacement, sorted; ``eligible`` restricts the pool."""
    pool = np.arange(num_clients) if eligible is None else np.asarray(sorted(eligible))
    if per_round > len(pool):
        raise ValueError(
            f"cannot select {per_round} clients: only {len(pool)} non-empty shards"
        )
    rng = stream(seed, "selection", round_index)
    return sorted(int(k) for k in rng.choice(pool, size=per_round, replace=False))


def batch_gradients(spec: NetworkSpec, params: ParamSet, global_params: ParamSet,
                    x, y, defense: DefenseConfig, rng=None):
    """Loss and parameter gradients of one mini-batch under ``defense``.

    Returns ``(loss, grads, rho_fallback)``.
    """
    kind = defense.kind
    cfg = defense.attack
    fallback = None
    if kind == "plain":
        logits, trace = forward(spec, params, x)
        loss, g = loss_plain(logits, y)
    elif kind == "pgd_at":
        x_adv = attacks.run_attack(spec, params, x, y, cfg, rng)
        logits, trace = forward(spec, params, x_adv)
        loss, g = loss_pgd_at(logits, y)
    elif kind in ("alp", "trades"):
        x_adv = attacks.run_attack(spec, params, x, y, cfg, rng)
        m = len(x)
        logits, trace = forward(spec, params, np.concatenate([x_adv, x]))
        adv, cln = logits[:m], logits[m:]
        if kind == "alp":
            loss, (g_adv, g_cln) = loss_alp(adv, cln, y, defense.beta)
        else:
            loss, (g_cln, g_adv) = loss_trades(cln, adv, y, defense.beta)
        g = np.concatenate([g_adv, g_cln])
    else:
        # probe's final forward is the adversarial forward pass of the loss
        probe, logits, trace = attacks._probe(spec, params, x, y, cfg, rng)
        rho = weights_rho(probe.d, cfg.steps) if defense.reweight else uniform_rho(len(x))
        fallback = rho.fallback if defense.reweight else None
        global_logits, _ = forward(spec, global_params, x)
        loss, g = loss_dbfat(logits, y, global_logits, rho, defense.beta)
    grads = backward_params(trace, g)
    trace.release()
    return loss, grads, fallback


def local_train(spec: NetworkSpec, shard: ClientShard, dataset: Dataset,
                global_params: ParamSet, cfg: FedConfig, round_index: int = 0) -> ClientUpdate:
    """Run ``cfg.local_epochs`` epochs of mini-batch SGD on one client."""
    if shard.n_k == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")
    check_params(spec, global_params)
    idx = shard.index_array()
    shuffle_rng = stream(cfg.seed, "shuffle", round_index, shard.client_id)
    attack_rng = stream(cfg.seed, "attack", round_index, shard.client_id)
    params = global_params
    defense = cfg.defense_at(round_index)
    mu = cfg.prox_mu
    epoch_losses = []
    fallbacks = 0
    for epoch in range(cfg.local_epochs):
        order = idx[shuffle_rng.permutation(len(idx))]
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            x = dataset.features[batch]
            y = dataset.labels[batch]
            loss, grads, fb = batch_gradients(spec, params, global_params, x, y, defense, attack_rng)
            fallbacks += fb is not None
            if mu > 0:
                delta = params - global_params
                loss += 0.5 * mu * delta.sq_norm()
                grads = grads + delta * mu
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at round {round_index}, client {shard.client_id}, "
                    f"epoch {epoch}, batch {b}"
                )
            params = sgd_step(params, grads, cfg.lr)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
    return ClientUpdate(shard.client_id, params, shard.n_k, epoch_losses, fallbacks)


def fedavg_weights(updates: list[ClientUpdate]) -> np.ndarray:
    n = np.array([u.n_k for u in updates], dtype=np.float64)
    if np.any(n <= 0):
        raise ValueError("every update needs n_k > 0")
    return n / n.sum()


def aggregate_fedavg(updates: list[ClientUpdate]) -> ParamSet:
    """Sample-count weighted average of client parameters."""
    if not updates:
        raise ValueError("no client updates to aggregate")
    weights = fedavg_weights(updates)
    base = updates[0].params
    for u in updates[1:]:
        base.check_compatible(u.params)
    # averaging offsets from a reference keeps identical inputs bitwise fixed
    out = {}
    for name in base:
        merged = []
        for j in range(2):
            ref = base[name][j]
            acc = np.zeros_like(ref)
            for w, u in zip(weights, updates):
                acc += w * (u.params[name][j] - ref)
            merged.append(ref + acc)
        out[name] = tuple(merged)
    return ParamSet(out)


def run_round(server: ServerState, shards: list[ClientShard], dataset: Dataset,
              spec: NetworkSpec, cfg: FedConfig, threads: int = 1) -> tuple[ServerState, RoundReport]:
    """Select clients, train them in parallel on the broadcast model, aggregate."""
    t0 = time.perf_counter()
    r = server.round_index
    eligible = [s.client_id for s in shards if s.n_k > 0]
    chosen = select_clients(len(shards), cfg.clients_per_round, r, cfg.seed, eligible)
    by_id = {s.client_id: s for s in shards}
    snapshot = server.global_params

    def work(k):
        return local_train(spec, by_id[k], dataset, snapshot, cfg, r)

    if threads > 1 and len(chosen) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            updates = list(pool.map(work, chosen))
    else:
        updates = [work(k) for k in chosen]
    new_params = aggregate_fedavg(updates)
    report = RoundReport(
        round=r + 1,
        client_ids=chosen,
        client_sizes=[u.n_k for u in updates],
        client_losses=[u.epoch_losses for u in updates],
        rho_fallbacks=sum(u.rho_fallbacks for u in updates),
        wall_ms=(time.perf_counter() - t0) * 1000.0,
    )
    log.debug("round %d: clients %s, mean loss %.4f", r + 1, chosen,
              np.mean([u.epoch_losses[-1] for u in updates]))
    return ServerState(new_params, r + 1, server.seed), report


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, spec: NetworkSpec, server: ServerState) -> None:
    """JSON record of network spec, parameters and round index.

    Floats are written with ``repr`` precision, so loading is lossless.
    """
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "round": server.round_index,
        "seed": server.seed,
        "network": spec.to_dict(),
        "params": {
            name: {"weight": w.tolist(), "bias": b.tolist()}
            for name, (w, b) in server.global_params.items()
        },
    }
    with open(path, "w") as f:
        json.dump(record, f)


def load_checkpoint(path, expect_spec: NetworkSpec | None = None) -> tuple[NetworkSpec, ServerState]:
    with open(path) as f:
        record = json.load(f)
    if record.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if record.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {record.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    spec = NetworkSpec.from_dict(record["network"])
    if expect_spec is not None and spec != expect_spec:
        raise CheckpointError(f"checkpoint network {spec} does not match configured {expect_spec}")
    params = ParamSet(
        {name: (np.array(p["weight"], dtype=np.float64).reshape(-1, out),
                np.array(p["bias"], dtype=np.float64))
         for (name, p), out in zip(record["params"].items(),
                                   [o for _, _, o in spec.dense_shapes()])}
    )
    check_params(spec, params)
    return spec, ServerState(params, int(record["round"]), int(record.get("seed", 0)))
