"""Accuracy metrics, per-class breakdowns, decision-boundary grids and the
CSV/JSON record formats written by the experiment runner."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import AttackConfig, run_attack
from .data import Dataset, blob_centers
from .nn import NetworkSpec, ParamSet, predict_logits

METRIC_COLUMNS = [
    "round", "a_cln", "a_rob_fgsm", "a_rob_mim", "a_rob_pgd", "a_rob_avg", "a_bdy", "wall_ms",
]


@dataclass
class Metrics:
    a_cln: float
    a_rob: dict[str, float]
    a_rob_avg: float
    a_bdy: float

    @classmethod
    def from_accuracies(cls, a_cln: float, a_rob: dict[str, float]) -> "Metrics":
        avg = float(np.mean(list(a_rob.values()))) if a_rob else a_cln
        return cls(a_cln, dict(a_rob), avg, a_cln - avg)


@dataclass
class RoundReport:
    round: int
    metrics: Metrics | None = None
    client_ids: list[int] = field(default_factory=list)
    client_sizes: list[int] = field(default_factory=list)
    client_losses: list[list[float]] = field(default_factory=list)  # per client, per epoch
    rho_fallbacks: int = 0
    wall_ms: float = 0.0
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RoundReport":
        d = dict(d)
        if d.get("metrics") is not None:
            d["metrics"] = Metrics(**d["metrics"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RoundReport":
        return cls.from_dict(json.loads(text))


def _predict(spec: NetworkSpec, params: ParamSet, x) -> np.ndarray:
    # np.argmax returns the lowest index on ties
    return predict_logits(spec, params, x).argmax(axis=1)


def accuracy_clean(spec: NetworkSpec, params: ParamSet, test_set: Dataset) -> float:
    if len(test_set) == 0:
        raise ValueError("empty test set")
    return float(np.mean(_predict(spec, params, test_set.features) == test_set.labels))


def adversarial_predictions(
    spec: NetworkSpec, params: ParamSet, test_set: Dataset, cfg: AttackConfig,
    rng=None, batch_size: int = 1000,
) -> np.ndarray:
    rng = np.random.default_rng(rng)
    preds = []
    for i in range(0, len(test_set), batch_size):
        x = test_set.features[i : i + batch_size]
        y = test_set.labels[i : i + batch_size]
        preds.append(_predict(spec, params, run_attack(spec, params, x, y, cfg, rng)))
    return np.concatenate(preds)


def accuracy_robust(
    spec: NetworkSpec, params: ParamSet, test_set: Dataset, attack_cfgs, rng=None,
    batch_size: int = 1000,
) -> tuple[dict[str, float], float]:
    """Accuracy under each attack (keyed by attack kind) and their mean."""
    attack_cfgs = list(attack_cfgs)
    if not attack_cfgs:
        raise ValueError("at least one attack config is required")
    kinds = [c.kind for c in attack_cfgs]
    if len(set(kinds)) != len(kinds):
        raise ValueError(f"duplicate attack kinds {kinds}")
    rng = np.random.default_rng(rng)
    out = {}
    for cfg in attack_cfgs:
        pred = adversarial_predictions(spec, params, test_set, cfg, rng, batch_size)
        out[cfg.kind] = float(np.mean(pred == test_set.labels))
    return out, float(np.mean(list(out.values())))


def evaluate(
    spec: NetworkSpec, params: ParamSet, test_set: Dataset, attack_cfgs, rng=None
) -> Metrics:
    a_cln = accuracy_clean(spec, params, test_set)
    a_rob = accuracy_robust(spec, params, test_set, attack_cfgs, rng)[0] if attack_cfgs else {}
    return Metrics.from_accuracies(a_cln, a_rob)


def per_class_accuracy(
    spec: NetworkSpec, params: ParamSet, test_set: Dataset,
    attack_cfg: AttackConfig | None = None, rng=None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Clean (and optionally robust) accuracy per class; NaN where a class
    has no test samples."""
    y = test_set.labels
    c = test_set.num_classes
    counts = np.bincount(y, minlength=c).astype(np.float64)

    def by_class(pred):
        hits = np.bincount(y[pred == y], minlength=c).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(counts > 0, hits / counts, np.nan)

    clean = by_class(_predict(spec, params, test_set.features))
    robust = None
    if attack_cfg is not None:
        robust = by_class(adversarial_predictions(spec, params, test_set, attack_cfg, rng))
    return clean, robust


def grid_points(bounds, resolution: int) -> np.ndarray:
    """Cell centers of a ``resolution x resolution`` grid, y-major."""
    xmin, xmax, ymin, ymax = bounds
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    xs = xmin + (np.arange(resolution) + 0.5) * (xmax - xmin) / resolution
    ys = ymin + (np.arange(resolution) + 0.5) * (ymax - ymin) / resolution
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def boundary_grid(spec: NetworkSpec, params: ParamSet, bounds=(0.0, 1.0, 0.0, 1.0),
                  resolution: int = 100) -> np.ndarray:
    """Predicted class id per grid cell; row ``i`` is the ``i``-th y value."""
    if spec.input_dim != 2:
        raise ValueError("boundary grids need a 2D-input network")
    pred = _predict(spec, params, grid_points(bounds, resolution))
    return pred.reshape(resolution, resolution)


def nearest_center_grid(num_classes: int, bounds=(0.0, 1.0, 0.0, 1.0),
                        resolution: int = 100) -> np.ndarray:
    """Bayes-optimal labels for equal isotropic blobs: nearest cluster center."""
    pts = grid_points(bounds, resolution)
    centers = blob_centers(num_classes)
    dist = ((pts[:, None, :] - centers[None]) ** 2).sum(axis=2)
    return dist.argmin(axis=1).reshape(resolution, resolution)


def grid_disagreement(grid: np.ndarray, reference: np.ndarray) -> int:
    return int(np.sum(grid != reference))


# -- file formats ---------------------------------------------------------------


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_row(round_index: int, metrics: Metrics, wall_ms: float) -> list[str]:
    rob = metrics.a_rob
    return [
        str(round_index), _fmt(metrics.a_cln), _fmt(rob.get("fgsm")), _fmt(rob.get("mim")),
        _fmt(rob.get("pgd")), _fmt(metrics.a_rob_avg), _fmt(metrics.a_bdy), _fmt(float(wall_ms)),
    ]


class MetricsWriter:
    """Appends one ``metrics.csv`` row per evaluation and flushes immediately."""

    def __init__(self, path):
        self.path = path
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(METRIC_COLUMNS)

    def write(self, round_index: int, metrics: Metrics, wall_ms: float) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(metrics_row(round_index, metrics, wall_ms))


def read_metrics_csv(path) -> list[dict]:
    def num(s):
        return float(s) if s != "" else None

    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "round" else num(v)) for k, v in r.items()} for r in rows]


def write_perclass_csv(path, clean, robust=None) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "clean_acc", "robust_acc"])
        for c, acc in enumerate(clean):
            rob = None if robust is None else float(robust[c])
            w.writerow([c, "NA" if math.isnan(acc) else repr(float(acc)),
                        "NA" if rob is None or math.isnan(rob) else repr(rob)])


def write_grid_csv(path, grid: np.ndarray, bounds) -> None:
    xmin, xmax, ymin, ymax = bounds
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["xmin", "xmax", "ymin", "ymax", "resolution"])
        w.writerow([repr(float(xmin)), repr(float(xmax)), repr(float(ymin)), repr(float(ymax)), len(grid)])
        w.writerows(grid.tolist())


def read_grid_csv(path) -> tuple[np.ndarray, tuple[float, ...]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    xmin, xmax, ymin, ymax = (float(v) for v in rows[1][:4])
    grid = np.array([[int(v) for v in r] for r in rows[2:]], dtype=np.int64)
    return grid, (xmin, xmax, ymin, ymax)
