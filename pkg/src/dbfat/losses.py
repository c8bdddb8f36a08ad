"""Defense objectives on logits: PGD-AT, ALP, TRADES and the boundary
re-weighted DBFAT loss.

Each loss returns ``(loss, grads)`` where the gradients are taken w.r.t. the
logits passed in, already divided by the batch size.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig
from .nn import cross_entropy_per_sample, kl_per_sample, softmax_cross_entropy

DEFENSES = ("plain", "pgd_at", "alp", "trades", "dbfat")


@dataclass(frozen=True)
class WeightVector:
    rho: np.ndarray
    fallback: str | None = None  # "all_misclassified" or "single_sample"

    def __len__(self) -> int:
        return len(self.rho)


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "dbfat"
    beta: float = 1.5
    attack: AttackConfig = field(default_factory=AttackConfig)
    reweight: bool = True  # dbfat only; False uses uniform (m-1)/m weights

    def __post_init__(self):
        if self.kind not in DEFENSES:
            raise ValueError(f"unknown defense {self.kind!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.kind == "dbfat" and self.attack.kind == "fgsm":
            raise ValueError("dbfat needs an iterative attack to measure boundary distance")


def weights_rho(d, steps: int | None = None) -> WeightVector:
    """Per-sample weights ``1 - d_i / sum(d)``.

    Samples that need fewer attack steps to be misclassified sit closer to
    the boundary and get larger weights. Degenerate batches (one sample, or
    every sample already misclassified) get uniform weights.
    """
    d = np.asarray(d, dtype=np.int64)
    if d.ndim != 1 or len(d) == 0:
        raise ValueError("d must be a non-empty 1-D sequence")
    if np.any(d < 0) or (steps is not None and np.any(d > steps)):
        raise ValueError("boundary distances must lie in [0, steps]")
    m = len(d)
    if m == 1:
        return WeightVector(np.ones(1), "single_sample")
    total = d.sum()
    if total == 0:
        return WeightVector(np.full(m, (m - 1) / m), "all_misclassified")
    return WeightVector(1.0 - d / total)


def uniform_rho(m: int) -> WeightVector:
    return WeightVector(np.full(m, (m - 1) / m if m > 1 else 1.0), "uniform")


def loss_plain(logits, y):
    return softmax_cross_entropy(logits, y)


def loss_pgd_at(logits_adv, y):
    return softmax_cross_entropy(logits_adv, y)


def loss_alp(logits_adv, logits_cln, y, beta: float):
    """CE on adversarial logits plus ``beta`` times the batch-mean squared L2
    distance between adversarial and clean logits.

    Returns ``(loss, (grad_adv, grad_cln))``.
    """
    a = np.asarray(logits_adv, dtype=np.float64)
    c = np.asarray(logits_cln, dtype=np.float64)
    if a.shape != c.shape:
        raise ValueError(f"logit shapes differ: {a.shape} vs {c.shape}")
    m = len(a)
    ce, g_ce = softmax_cross_entropy(a, y)
    diff = a - c
    pair = float((diff * diff).sum() / m)
    g_pair = 2.0 * beta * diff / m
    return ce + beta * pair, (g_ce + g_pair, -g_pair)


def loss_trades(logits_cln, logits_adv, y, beta: float):
    """CE on clean logits plus ``beta * KL(adv || clean)``.

    Returns ``(loss, (grad_cln, grad_adv))``.
    """
    c = np.asarray(logits_cln, dtype=np.float64)
    a = np.asarray(logits_adv, dtype=np.float64)
    if a.shape != c.shape:
        raise ValueError(f"logit shapes differ: {a.shape} vs {c.shape}")
    m = len(c)
    ce, g_ce = softmax_cross_entropy(c, y)
    kl, g_adv, g_cln = kl_per_sample(a, c)
    return ce + beta * float(kl.mean()), (g_ce + beta * g_cln / m, beta * g_adv / m)


def loss_dbfat(logits_adv_local, y, logits_cln_global, rho, beta: float):
    """``mean_i rho_i * CE_i(adv) + beta * mean_i KL(adv_i || global_i)``.

    The global logits are a fixed target; only the local adversarial logits
    receive a gradient.
    """
    a = np.asarray(logits_adv_local, dtype=np.float64)
    g = np.asarray(logits_cln_global, dtype=np.float64)
    rho = np.asarray(rho.rho if isinstance(rho, WeightVector) else rho, dtype=np.float64)
    m = len(a)
    if rho.shape != (m,):
        raise ValueError(f"rho has length {len(rho)}, batch has {m} samples")
    if a.shape != g.shape:
        raise ValueError(f"logit shapes differ: {a.shape} vs {g.shape}")
    ce, g_ce = cross_entropy_per_sample(a, y)
    kl, g_kl, _ = kl_per_sample(a, g)
    loss = float((rho * ce).sum() / m + beta * kl.mean())
    grad = (rho[:, None] * g_ce + beta * g_kl) / m
    return loss, grad
