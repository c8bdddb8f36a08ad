import math

import numpy as np
import pytest

from dbfat.attacks import AttackConfig
from dbfat.data import ClientShard, Dataset, make_synthetic_blobs
from dbfat.evaluation import (
    METRIC_COLUMNS, Metrics, MetricsWriter, RoundReport, accuracy_clean, accuracy_robust,
    boundary_grid, evaluate, grid_disagreement, grid_points, nearest_center_grid,
    per_class_accuracy, read_grid_csv, read_metrics_csv, write_grid_csv, write_perclass_csv,
)
from dbfat.federation import FedConfig, local_train, stream
from dbfat.losses import DefenseConfig
from dbfat.nn import NetworkSpec, ParamSet, init_params

LIN = NetworkSpec.mlp(2, (), 2)


def constant_model(c, d=2):
    spec = NetworkSpec.mlp(d, (), c)
    return spec, ParamSet({"dense0": (np.zeros((d, c)), np.zeros(c))})


def lookup_model():
    # class = which side of x0 = 0.5
    return ParamSet({"dense0": (np.array([[10.0, -10.0], [0.0, 0.0]]), np.array([-5.0, 5.0]))})


def split_blobs(n=200):
    return make_synthetic_blobs(n, 2, 0.05, 0)


def trained_blob_model(kind="plain", seed=0, epochs=10):
    ds = make_synthetic_blobs(300, 3, 0.1, seed)
    spec = NetworkSpec.mlp(2, (16,), 3)
    cfg = FedConfig(1, 1, epochs, 10, 0.2, 1,
                    DefenseConfig(kind, 1.0, AttackConfig("pgd", 0.05, 0.01, 5)), seed=seed)
    up = local_train(spec, ClientShard(0, tuple(range(len(ds)))), ds, init_params(spec, stream(seed, "init")), cfg)
    return spec, up.params, ds


# -- clean and robust accuracy ---------------------------------------------------


@pytest.mark.parametrize("c", [2, 3, 10])
def test_constant_model_scores_one_over_c(c):
    spec, params = constant_model(c)
    ds = Dataset(np.random.default_rng(0).random((10 * c, 2)), np.arange(10 * c) % c, c)
    assert accuracy_clean(spec, params, ds) == 1.0 / c


def test_perfect_model_scores_one():
    assert accuracy_clean(LIN, lookup_model(), split_blobs()) == 1.0


def test_robust_needs_an_attack():
    with pytest.raises(ValueError):
        accuracy_robust(LIN, lookup_model(), split_blobs(), [])


def test_zero_epsilon_robust_equals_clean():
    spec, params, ds = trained_blob_model()
    cfgs = [AttackConfig("fgsm", 0.0), AttackConfig("pgd", 0.0, 0.01, 5), AttackConfig("mim", 0.0, 0.01, 5)]
    per, avg = accuracy_robust(spec, params, ds, cfgs)
    clean = accuracy_clean(spec, params, ds)
    assert set(per) == {"fgsm", "pgd", "mim"}
    assert all(v == clean for v in per.values()) and avg == clean


def test_duplicate_attack_kinds_rejected():
    spec, params, ds = trained_blob_model()
    with pytest.raises(ValueError, match="duplicate"):
        accuracy_robust(spec, params, ds, [AttackConfig("pgd", steps=5), AttackConfig("pgd", steps=10)])


@pytest.mark.parametrize("kind,seed", [("plain", 0), ("plain", 1), ("pgd_at", 2), ("dbfat", 3)])
def test_robust_never_exceeds_clean_by_more_than_slack(kind, seed):
    spec, params, ds = trained_blob_model(kind, seed)
    cfgs = [AttackConfig("fgsm", 0.1), AttackConfig("pgd", 0.1, 0.01, 20), AttackConfig("mim", 0.1, 0.01, 20)]
    per, _ = accuracy_robust(spec, params, ds, cfgs)
    clean = accuracy_clean(spec, params, ds)
    assert all(v <= clean + 0.02 for v in per.values())


def test_metrics_boundary_error_identity():
    spec, params, ds = trained_blob_model()
    m = evaluate(spec, params, ds, [AttackConfig("fgsm", 0.1), AttackConfig("pgd", 0.1, 0.01, 10)])
    assert m.a_bdy == m.a_cln - m.a_rob_avg
    assert m.a_rob_avg == np.mean(list(m.a_rob.values()))
    assert all(0 <= v <= 1 for v in [m.a_cln, *m.a_rob.values()])


def test_evaluation_is_side_effect_free():
    spec, params, ds = trained_blob_model()
    flat, feats = params.flat().copy(), ds.features.copy()
    evaluate(spec, params, ds, [AttackConfig("pgd", 0.1, 0.01, 5)])
    per_class_accuracy(spec, params, ds, AttackConfig("fgsm", 0.1))
    np.testing.assert_array_equal(params.flat(), flat)
    np.testing.assert_array_equal(ds.features, feats)


# -- per class --------------------------------------------------------------------


def test_per_class_perfect_and_absent_class():
    ds = split_blobs()
    spec = NetworkSpec.mlp(2, (), 3)
    w, b = lookup_model()["dense0"]
    params = ParamSet({"dense0": (np.hstack([w, np.zeros((2, 1))]), np.append(b, -100.0))})
    ds3 = Dataset(ds.features, ds.labels, 3)
    clean, robust = per_class_accuracy(spec, params, ds3, AttackConfig("fgsm", 0.0))
    np.testing.assert_array_equal(clean[:2], [1.0, 1.0])
    assert math.isnan(clean[2]) and math.isnan(robust[2])


def test_per_class_favours_majority_class_on_skewed_shard():
    ds = make_synthetic_blobs(600, 3, 0.2, 4)
    idx = np.concatenate([np.flatnonzero(ds.labels == 0)[:150],
                          np.flatnonzero(ds.labels == 1)[:40],
                          np.flatnonzero(ds.labels == 2)[:8]])
    spec = NetworkSpec.mlp(2, (16,), 3)
    cfg = FedConfig(1, 1, 3, 10, 0.1, 1, DefenseConfig("plain"), seed=0)
    up = local_train(spec, ClientShard(0, tuple(int(i) for i in idx)), ds, init_params(spec, stream(0, "init")), cfg)
    clean, _ = per_class_accuracy(spec, up.params, ds)
    assert clean[0] >= clean[1] >= clean[2]


# -- grids ------------------------------------------------------------------------


def test_grid_points_are_cell_centers_y_major():
    pts = grid_points((0, 1, 0, 2), 2)
    np.testing.assert_allclose(pts, [[0.25, 0.5], [0.75, 0.5], [0.25, 1.5], [0.75, 1.5]])


def test_constant_model_grid_is_uniform():
    spec, params = constant_model(4)
    grid = boundary_grid(spec, params, resolution=17)
    assert grid.shape == (17, 17) and (grid == 0).all()


def test_resolution_one_is_single_cell():
    assert boundary_grid(LIN, lookup_model(), resolution=1).shape == (1, 1)
    with pytest.raises(ValueError):
        grid_points((0, 1, 0, 1), 0)


def test_grid_needs_two_dimensional_input():
    spec, params = constant_model(2, d=3)
    with pytest.raises(ValueError):
        boundary_grid(spec, params)


@pytest.mark.parametrize("seed", range(5))
def test_linear_model_grid_follows_analytic_line(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((2, 2))
    b = rng.standard_normal(2) * 0.5
    grid = boundary_grid(LIN, ParamSet({"dense0": (w, b)}), resolution=100)
    pts = grid_points((0, 1, 0, 1), 100)
    # class 1 wins where (w[:,1]-w[:,0]) . p + (b1-b0) > 0
    analytic = (pts @ (w[:, 1] - w[:, 0]) + (b[1] - b[0]) > 0).astype(int).reshape(100, 100)
    assert np.mean(grid == analytic) > 0.99


def test_nearest_center_grid_for_two_blobs_is_vertical_split():
    ref = nearest_center_grid(2, resolution=10)
    assert (ref[:, :5] == 1).all() and (ref[:, 5:] == 0).all()
    assert grid_disagreement(ref, ref) == 0


# -- records ----------------------------------------------------------------------


def test_round_report_json_round_trip():
    rep = RoundReport(3, Metrics.from_accuracies(0.9, {"fgsm": 0.5, "pgd": 0.25}), [1, 4], [10, 12],
                      [[1.5, 0.5], [2.0, 1.0]], 2, 12.5, "abc123")
    assert RoundReport.from_json(rep.to_json()) == rep
    assert RoundReport.from_json(RoundReport(0).to_json()) == RoundReport(0)


def test_metrics_csv_schema_and_round_trip(tmp_path):
    path = tmp_path / "metrics.csv"
    w = MetricsWriter(path)
    m = Metrics.from_accuracies(0.875, {"fgsm": 0.5, "mim": 0.25, "pgd": 0.125})
    w.write(0, m, 0.0)
    w.write(5, Metrics.from_accuracies(0.5, {"pgd": 0.1}), 3.25)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    rows = read_metrics_csv(path)
    assert rows[0]["a_rob_avg"] == m.a_rob_avg and rows[0]["a_bdy"] == m.a_bdy
    assert rows[1]["round"] == 5 and rows[1]["a_rob_fgsm"] is None and rows[1]["wall_ms"] == 3.25


def test_perclass_csv_writes_na(tmp_path):
    write_perclass_csv(tmp_path / "p.csv", np.array([1.0, np.nan]), np.array([0.5, np.nan]))
    assert (tmp_path / "p.csv").read_text().splitlines() == [
        "class,clean_acc,robust_acc", "0,1.0,0.5", "1,NA,NA"]


def test_grid_csv_round_trip(tmp_path):
    grid = boundary_grid(LIN, lookup_model(), (0, 1, -1, 2), 7)
    write_grid_csv(tmp_path / "g.csv", grid, (0, 1, -1, 2))
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "xmin,xmax,ymin,ymax,resolution"
    back, bounds = read_grid_csv(tmp_path / "g.csv")
    np.testing.assert_array_equal(back, grid)
    assert bounds == (0.0, 1.0, -1.0, 2.0)
