"""Dense network engine with reverse-mode gradients for parameters and inputs.

Everything is float64 numpy. A network is described by an immutable
:class:`NetworkSpec`; its weights live in a :class:`ParamSet`, whose arrays
are flagged read-only so that a parameter snapshot can be shared freely
between threads and clients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an array does not fit the layer it is fed to."""


class StaleTraceError(RuntimeError):
    """Raised when a released forward trace is used for a backward pass."""


class StructureError(ValueError):
    """Raised when two parameter sets do not share a layout."""


@dataclass(frozen=True)
class Dense:
    out_dim: int


@dataclass(frozen=True)
class ReLU:
    pass


Layer = Dense | ReLU


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    layers: tuple[Layer, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be positive")
        dim = self.input_dim
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if layer.out_dim < 1:
                    raise ValueError(f"layer {i}: dense out_dim must be positive")
                dim = layer.out_dim
            elif not isinstance(layer, ReLU):
                raise TypeError(f"layer {i}: unsupported layer {layer!r}")
        if dim != self.num_classes:
            raise ValueError(
                f"final output dimension {dim} != num_classes {self.num_classes}"
            )

    @classmethod
    def mlp(cls, input_dim: int, hidden: Sequence[int], num_classes: int) -> "NetworkSpec":
        layers: list[Layer] = []
        for width in hidden:
            layers += [Dense(int(width)), ReLU()]
        layers.append(Dense(num_classes))
        return cls(input_dim, tuple(layers), num_classes)

    def dense_shapes(self) -> list[tuple[str, int, int]]:
        """(name, fan_in, fan_out) for every dense layer, in order."""
        shapes = []
        dim = self.input_dim
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                shapes.append((layer_name(i), dim, layer.out_dim))
                dim = layer.out_dim
        return shapes

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "layers": [
                {"type": "dense", "out_dim": l.out_dim} if isinstance(l, Dense) else {"type": "relu"}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        layers: list[Layer] = []
        for l in d["layers"]:
            if l["type"] == "dense":
                layers.append(Dense(int(l["out_dim"])))
            elif l["type"] == "relu":
                layers.append(ReLU())
            else:
                raise ValueError(f"unknown layer type {l['type']!r}")
        return cls(int(d["input_dim"]), tuple(layers), int(d["num_classes"]))


def layer_name(index: int) -> str:
    return f"dense{index}"


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=DTYPE, copy=True)
    a.flags.writeable = False
    return a


class ParamSet(Mapping):
    """Ordered mapping ``layer name -> (weight, bias)`` of read-only arrays.

    Weights are stored as ``(fan_in, fan_out)`` so a dense layer computes
    ``x @ W + b``. Arithmetic is element-wise and requires identical layout.
    """

    __slots__ = ("_layers",)

    def __init__(self, layers: Mapping[str, tuple] | Sequence[tuple[str, tuple]]):
        items = layers.items() if isinstance(layers, Mapping) else layers
        self._layers = {name: (_frozen(w), _frozen(b)) for name, (w, b) in items}

    def __getitem__(self, name):
        return self._layers[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._layers)

    def __len__(self) -> int:
        return len(self._layers)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {w.shape}" for k, (w, _) in self._layers.items())
        return f"ParamSet({inner})"

    def structure(self) -> tuple:
        return tuple((k, w.shape, b.shape) for k, (w, b) in self._layers.items())

    def check_compatible(self, other: "ParamSet") -> None:
        if self.structure() != other.structure():
            raise StructureError(
                f"parameter layouts differ: {self.structure()} vs {other.structure()}"
            )

    def arrays(self) -> Iterator[np.ndarray]:
        for w, b in self._layers.values():
            yield w
            yield b

    def map(self, fn) -> "ParamSet":
        return ParamSet({k: (fn(w), fn(b)) for k, (w, b) in self._layers.items()})

    def zip_map(self, other: "ParamSet", fn) -> "ParamSet":
        self.check_compatible(other)
        return ParamSet(
            {k: (fn(w, other[k][0]), fn(b, other[k][1])) for k, (w, b) in self._layers.items()}
        )

    def __add__(self, other: "ParamSet") -> "ParamSet":
        return self.zip_map(other, np.add)

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        return self.zip_map(other, np.subtract)

    def __mul__(self, scalar: float) -> "ParamSet":
        return self.map(lambda a: a * scalar)

    __rmul__ = __mul__

    def sq_norm(self) -> float:
        return float(sum(np.sum(a * a) for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def equals(self, other: "ParamSet") -> bool:
        """Bitwise equality of layout and values."""
        if self.structure() != other.structure():
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    @classmethod
    def zeros_like(cls, other: "ParamSet") -> "ParamSet":
        return other.map(np.zeros_like)


def init_params(spec: NetworkSpec, rng: np.random.Generator | int) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(rng)
    layers = {}
    for name, fan_in, fan_out in spec.dense_shapes():
        a = np.sqrt(6.0 / (fan_in + fan_out))
        layers[name] = (rng.uniform(-a, a, size=(fan_in, fan_out)), np.zeros(fan_out))
    return ParamSet(layers)


def check_params(spec: NetworkSpec, params: ParamSet) -> None:
    expected = [(n, (i, o), (o,)) for n, i, o in spec.dense_shapes()]
    if list(params.structure()) != expected:
        raise ShapeError(f"params {params.structure()} do not match network {expected}")


class ForwardTrace:
    """Cached layer inputs from one forward pass.

    A trace can feed any number of backward calls until :meth:`release`
    is called; afterwards it raises :class:`StaleTraceError`.
    """

    def __init__(self, spec: NetworkSpec, params: ParamSet, inputs: list[np.ndarray]):
        self.spec = spec
        self.params = params
        self.inputs = inputs  # inputs[i] is what layer i consumed
        self._released = False

    @property
    def batch(self) -> np.ndarray:
        return self.inputs[0] if self.inputs else None

    def __len__(self) -> int:
        return len(self.inputs)

    def release(self) -> None:
        self.inputs = []
        self._released = True

    def _check(self) -> None:
        if self._released:
            raise StaleTraceError("forward trace was released")


def forward(spec: NetworkSpec, params: ParamSet, batch) -> tuple[np.ndarray, ForwardTrace]:
    """Return ``(logits, trace)`` for a batch of shape ``(m, input_dim)``."""
    x = np.asarray(batch, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"input: expected (m, {spec.input_dim}), got {x.shape}")
    inputs = []
    h = x
    for i, layer in enumerate(spec.layers):
        inputs.append(h)
        if isinstance(layer, Dense):
            name = layer_name(i)
            try:
                w, b = params[name]
            except KeyError:
                raise ShapeError(f"layer {name}: missing from params") from None
            if w.shape != (h.shape[1], layer.out_dim) or b.shape != (layer.out_dim,):
                raise ShapeError(
                    f"layer {name}: weight {w.shape} / bias {b.shape} incompatible "
                    f"with input width {h.shape[1]} and out_dim {layer.out_dim}"
                )
            h = h @ w + b
        else:
            h = np.maximum(h, 0.0)
    return h, ForwardTrace(spec, params, inputs)


def _backprop(trace: ForwardTrace, logit_grad, want_params: bool, want_input: bool):
    trace._check()
    g = np.asarray(logit_grad, dtype=DTYPE)
    m = trace.inputs[0].shape[0]
    if g.shape != (m, trace.spec.num_classes):
        raise ShapeError(f"logit_grad: expected {(m, trace.spec.num_classes)}, got {g.shape}")
    grads = {}
    layers = trace.spec.layers
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        h = trace.inputs[i]
        if isinstance(layer, Dense):
            name = layer_name(i)
            w, _ = trace.params[name]
            if want_params:
                grads[name] = (h.T @ g, g.sum(axis=0))
            if i == 0 and not want_input:
                break
            g = g @ w.T
        else:
            g = g * (h > 0)
    param_grads = None
    if want_params:
        param_grads = ParamSet([(n, grads[n]) for n in trace.params])
    return param_grads, (g if want_input else None)


def backward_params(trace: ForwardTrace, logit_grad) -> ParamSet:
    return _backprop(trace, logit_grad, True, False)[0]


def backward_input(trace: ForwardTrace, logit_grad) -> np.ndarray:
    return _backprop(trace, logit_grad, False, True)[1]


def backward(trace: ForwardTrace, logit_grad) -> tuple[ParamSet, np.ndarray]:
    """Parameter and input gradients in a single sweep."""
    return _backprop(trace, logit_grad, True, True)


def sgd_step(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    if lr < 0:
        raise ValueError("lr must be non-negative")
    return params.zip_map(grads, lambda p, g: p - lr * g)


def predict_logits(spec: NetworkSpec, params: ParamSet, x, batch_size: int = 4096) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if len(x) <= batch_size:
        return forward(spec, params, x)[0]
    return np.concatenate(
        [forward(spec, params, x[i : i + batch_size])[0] for i in range(0, len(x), batch_size)]
    )


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _check_labels(labels, m: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (m,):
        raise ShapeError(f"labels: expected shape ({m},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if m and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    return y


def cross_entropy_per_sample(logits, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample CE and its per-sample gradient ``softmax - onehot`` (no 1/m)."""
    logits = np.asarray(logits, dtype=DTYPE)
    m, c = logits.shape
    y = _check_labels(labels, m, c)
    logp = log_softmax(logits)
    rows = np.arange(m)
    ce = -logp[rows, y]
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return ce, grad


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    ce, grad = cross_entropy_per_sample(logits, labels)
    m = len(ce)
    return float(ce.mean()), grad / m


def kl_per_sample(logits_p, logits_q) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample ``KL(softmax(p) || softmax(q))`` with per-sample gradients
    w.r.t. both logit sets (no 1/m)."""
    a = np.asarray(logits_p, dtype=DTYPE)
    b = np.asarray(logits_q, dtype=DTYPE)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"kl: logits shapes differ: {a.shape} vs {b.shape}")
    logp = log_softmax(a)
    logq = log_softmax(b)
    p = np.exp(logp)
    diff = logp - logq
    raw = (p * diff).sum(axis=1)
    grad_p = p * (diff - raw[:, None])
    kl = np.maximum(raw, 0.0)
    grad_q = np.exp(logq) - p
    return kl, grad_p, grad_q


def kl_divergence(logits_p, logits_q) -> tuple[float, np.ndarray]:
    """Batch-mean ``KL(softmax(p) || softmax(q))``; gradient w.r.t. ``logits_p`` only."""
    kl, grad_p, _ = kl_per_sample(logits_p, logits_q)
    m = len(kl)
    return float(kl.mean()), grad_p / m
