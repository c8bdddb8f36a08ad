"""L-infinity evasion attacks and the PGD boundary-distance probe.

Every attack returns a fresh array; neither ``x`` nor the parameters are
modified. Projection clips to the epsilon ball around ``x`` and then to the
valid pixel range [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .nn import NetworkSpec, ParamSet, backward_input, cross_entropy_per_sample, forward

KINDS = ("fgsm", "pgd", "mim")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 0.3
    alpha: float = 0.01
    steps: int = 20
    random_start: bool = False
    momentum_decay: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.kind != "fgsm" and not self.alpha > 0:
            raise ValueError("alpha must be > 0 for iterative attacks")
        if self.momentum_decay < 0:
            raise ValueError("momentum_decay must be >= 0")

    @property
    def name(self) -> str:
        return self.kind if self.kind == "fgsm" else f"{self.kind}{self.steps}"

    def with_(self, **changes) -> "AttackConfig":
        return replace(self, **changes)


@dataclass
class ProbeResult:
    x_adv: np.ndarray
    d: np.ndarray


def _input_grad(spec: NetworkSpec, params: ParamSet, x, y):
    """Gradient of the summed CE w.r.t. the input, plus the logits at ``x``."""
    logits, trace = forward(spec, params, x)
    _, g = cross_entropy_per_sample(logits, y)
    grad = backward_input(trace, g)
    trace.release()
    return grad, logits


def _check(spec: NetworkSpec, x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[1] != spec.input_dim or y.shape != (len(x),):
        raise ValueError(f"attack input shapes x={x.shape}, y={y.shape} do not fit the network")
    return x, y


def project(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(np.clip(x_adv, x - epsilon, x + epsilon), 0.0, 1.0)


def _start(x, cfg: AttackConfig, rng) -> np.ndarray:
    if cfg.random_start and cfg.epsilon > 0:
        rng = np.random.default_rng(rng)
        return project(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), x, cfg.epsilon)
    return x.copy()


def fgsm(spec: NetworkSpec, params: ParamSet, x, y, epsilon: float) -> np.ndarray:
    x, y = _check(spec, x, y)
    grad, _ = _input_grad(spec, params, x, y)
    return np.clip(x + epsilon * np.sign(grad), 0.0, 1.0)


def pgd(spec: NetworkSpec, params: ParamSet, x, y, cfg: AttackConfig, rng=None) -> np.ndarray:
    x, y = _check(spec, x, y)
    x_adv = _start(x, cfg, rng)
    for _ in range(cfg.steps):
        grad, _ = _input_grad(spec, params, x_adv, y)
        x_adv = project(x_adv + cfg.alpha * np.sign(grad), x, cfg.epsilon)
    return x_adv


def mim(spec: NetworkSpec, params: ParamSet, x, y, cfg: AttackConfig, rng=None) -> np.ndarray:
    """Momentum iterative attack: accumulate L1-normalised gradients, step by sign."""
    x, y = _check(spec, x, y)
    x_adv = _start(x, cfg, rng)
    g = np.zeros_like(x)
    for _ in range(cfg.steps):
        grad, _ = _input_grad(spec, params, x_adv, y)
        l1 = np.abs(grad).sum(axis=1, keepdims=True)
        g = cfg.momentum_decay * g + grad / np.maximum(l1, 1e-12)
        x_adv = project(x_adv + cfg.alpha * np.sign(g), x, cfg.epsilon)
    return x_adv


def run_attack(spec: NetworkSpec, params: ParamSet, x, y, cfg: AttackConfig, rng=None) -> np.ndarray:
    if cfg.kind == "fgsm":
        return fgsm(spec, params, x, y, cfg.epsilon)
    if cfg.kind == "pgd":
        return pgd(spec, params, x, y, cfg, rng)
    return mim(spec, params, x, y, cfg, rng)


def boundary_probe(
    spec: NetworkSpec, params: ParamSet, x, y, cfg: AttackConfig, rng=None
) -> ProbeResult:
    """Run PGD for ``cfg.steps`` steps and record, per sample, the first step
    at which the prediction leaves the true label.

    ``d = 0`` if the clean input is already misclassified and ``d = steps`` if
    it never is. ``x_adv`` is the final iterate, identical to :func:`pgd`.
    """
    return _probe(spec, params, x, y, cfg, rng)[0]


def _probe(spec, params, x, y, cfg: AttackConfig, rng=None):
    # also returns the logits at the final iterate so training can reuse them
    if cfg.kind == "fgsm":
        raise ValueError("boundary probe needs an iterative attack config")
    x, y = _check(spec, x, y)
    x_adv = _start(x, cfg, rng)
    d = np.full(len(x), cfg.steps, dtype=np.int64)
    open_ = np.ones(len(x), dtype=bool)
    for step in range(cfg.steps):
        grad, logits = _input_grad(spec, params, x_adv, y)
        hit = open_ & (logits.argmax(axis=1) != y)
        d[hit] = step
        open_ &= ~hit
        x_adv = project(x_adv + cfg.alpha * np.sign(grad), x, cfg.epsilon)
    logits, trace = forward(spec, params, x_adv)
    hit = open_ & (logits.argmax(axis=1) != y)
    d[hit] = cfg.steps
    return ProbeResult(x_adv, d), logits, trace
