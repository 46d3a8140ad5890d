import csv
import io
import json
import math

import numpy as np
import pytest

from oracles import brute_force_diameter
from se3reg.cloud import PointCloud
from se3reg.liegroup import RigidMotion, exp_so3
from se3reg.pairwise import ConvergenceTrace, RegistrationResult, estimate_pairwise
from se3reg.synthbench import (
    CSV_HEADER,
    MODEL_CENTER,
    MODELS,
    convergence_compare,
    evaluate,
    generate_crops,
    generate_pair,
    generate_views,
    make_model,
    multiview_rmse,
    rows_to_csv,
    run_benchmark,
    summarize,
    summary_json,
    surface_diameter,
)


def test_diameter_examples(rng):
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    assert surface_diameter(PointCloud(corners)) == pytest.approx(math.sqrt(3))
    assert surface_diameter(np.array([[0.0, 0, 0], [3.0, 4.0, 0]])) == pytest.approx(5.0)
    pts = rng.normal(size=(1000, 3))
    assert surface_diameter(pts) == pytest.approx(brute_force_diameter(pts), rel=1e-12)
    with pytest.raises(ValueError):
        surface_diameter(np.zeros((1, 3)))


def test_diameter_above_limit_is_upper_bound(rng):
    pts = rng.normal(size=(6000, 3))
    exact = brute_force_diameter(pts[::2])
    assert surface_diameter(pts) >= exact


@pytest.mark.parametrize("name", MODELS)
def test_models_are_unit_diameter(name):
    m = make_model(name, 800, seed=1)
    assert len(m) == 800
    assert surface_diameter(m) == pytest.approx(1.0)
    box_center = 0.5 * (m.points.max(0) + m.points.min(0))
    np.testing.assert_allclose(box_center, MODEL_CENTER, atol=1e-12)


def test_unknown_model():
    with pytest.raises(ValueError):
        make_model("bunny")


def test_clean_pair_has_zero_residuals():
    pair = generate_pair(make_model("blobs", 500), math.radians(60), 0.0, 0.0, seed=3)
    np.testing.assert_allclose(pair.corrs.residuals(pair.gt), 0.0, atol=1e-14)
    assert pair.inliers.all()


def test_pair_is_deterministic():
    model = make_model("cube", 300)
    a = generate_pair(model, 1.0, 0.01, 0.3, seed=42)
    b = generate_pair(model, 1.0, 0.01, 0.3, seed=42)
    assert np.array_equal(a.corrs.p, b.corrs.p) and np.array_equal(a.corrs.q, b.corrs.q)
    assert np.array_equal(a.gt.matrix(), b.gt.matrix())
    assert np.array_equal(a.inliers, b.inliers)


def test_outlier_fraction():
    pair = generate_pair(make_model("sphere", 1000), 1.0, 0.0, 0.4, seed=0)
    assert (~pair.inliers).sum() == 400
    lo, hi = pair.dst.points.min(0), pair.dst.points.max(0)
    bad = pair.corrs.p[~pair.inliers]
    assert np.all(bad >= lo) and np.all(bad <= hi)
    with pytest.raises(ValueError):
        generate_pair(make_model("sphere", 10), 1.0, 0.0, 1.5, seed=0)


def test_noise_level_matches_chi_distribution():
    pair = generate_pair(make_model("blobs", 10_000), 1.0, 0.0025, 0.0, seed=9)
    mean = pair.corrs.residuals(pair.gt).mean()
    analytic = pair.sigma * math.sqrt(8 / math.pi)
    monte_carlo = np.linalg.norm(
        np.random.default_rng(0).normal(scale=pair.sigma, size=(200_000, 3)), axis=1).mean()
    assert monte_carlo == pytest.approx(analytic, rel=0.01)
    assert mean == pytest.approx(monte_carlo, rel=0.10)


def test_evaluate_metrics():
    pair = generate_pair(make_model("blobs", 300), 1.0, 0.0, 0.0, seed=1)
    row = evaluate(RegistrationResult(pair.gt, ConvergenceTrace(), True), pair)
    assert row.rae_deg == pytest.approx(0.0, abs=1e-12)
    assert row.tne == 0.0 and row.rmse == 0.0
    off = RigidMotion(pair.gt.rotation @ exp_so3([math.radians(1.0), 0, 0]), pair.gt.translation)
    row = evaluate(RegistrationResult(off, ConvergenceTrace(), True), pair)
    assert row.rae_deg == pytest.approx(1.0, abs=1e-9)


def test_noiseless_estimate_has_tiny_rmse():
    pair = generate_pair(make_model("blobs", 1000), math.radians(60), 0.0, 0.0, seed=2)
    row = evaluate(estimate_pairwise(pair.corrs), pair)
    assert row.rmse <= 1e-9


def test_benchmark_rows_and_csv():
    rows = run_benchmark("sphere", sigma_rel=0.0, outlier_fraction=0.0, trials=3, seed=5,
                         n_points=200)
    assert len(rows) == 3
    assert all(r.rae_deg <= 1e-4 for r in rows)
    text = rows_to_csv(rows, timing=False)
    parsed = list(csv.reader(io.StringIO(text)))
    assert tuple(parsed[0]) == CSV_HEADER
    assert all(r[-1] == "nan" for r in parsed[1:])
    s = summarize(rows)
    assert s["trials"] == 3
    assert json.loads(summary_json(rows))["median_rae_deg"] == s["median_rae_deg"]
    assert summarize([]) == {"trials": 0}


def test_benchmark_deterministic_across_thread_counts():
    kw = dict(sigma_rel=0.0025, outlier_fraction=0.4, trials=4, seed=11, n_points=300)
    one = rows_to_csv(run_benchmark("blobs", threads=1, **kw), timing=False)
    again = rows_to_csv(run_benchmark("blobs", threads=1, **kw), timing=False)
    two = rows_to_csv(run_benchmark("blobs", threads=2, **kw), timing=False)
    assert one == again == two


def test_convergence_compare_table():
    model = make_model("blobs", 1000, seed=0)
    angle = math.radians(30)
    pair = generate_pair(model, angle, 0.0025, 0.3, seed=0, angle_min=angle)
    eps = [1e-1, 1e-3, 1e-5, 1e-7]
    table = convergence_compare(pair, eps)
    assert list(table.k_outer) == ["lp_extrinsic_k1", "intrinsic_k1", "intrinsic_k2",
                                   "intrinsic_k3"]
    for ks in table.k_outer.values():
        assert ks == sorted(ks)
        assert ks[0] <= 3
    k = table.k_outer
    for row in range(1, len(eps)):
        assert k["intrinsic_k1"][row] >= k["intrinsic_k2"][row] >= k["intrinsic_k3"][row]
    lines = table.to_csv().splitlines()
    assert lines[0] == "epsilon,lp_extrinsic_k1,intrinsic_k1,intrinsic_k2,intrinsic_k3"
    assert len(lines) == 5
    trace_lines = table.trace_csv().splitlines()
    assert trace_lines[0] == "method,iteration,cost,update_norm"
    assert len(trace_lines) == 1 + sum(tr.k_outer + 1 for tr in table.traces.values())


def test_generate_views():
    prob = generate_views(make_model("blobs", 500), 4, sigma_rel=0.0, outlier_fraction=0.25,
                          seed=3, corrs_per_edge=100)
    assert len(prob.graph.edges) == 6
    np.testing.assert_array_equal(prob.gt[0].matrix(), np.eye(4))
    for e, mask in zip(prob.graph.edges, prob.inliers):
        d = prob.gt[e.i].apply(e.corrs.p[mask]) - prob.gt[e.j].apply(e.corrs.q[mask])
        np.testing.assert_allclose(d, 0.0, atol=1e-12)
        assert (~mask).sum() == 25
    assert multiview_rmse(prob.gt, prob) == pytest.approx(0.0, abs=1e-12)


def test_generate_crops_overlap():
    model = make_model("blobs", 4000, seed=0)
    crops = generate_crops(model, 4, overlap=0.7, seed=1)
    for i in range(3):
        a, _ = crops.shared(i, i + 1)
        frac = len(a) / len(crops.scans[i])
        assert 0.6 <= frac <= 0.8
    for i, scan in enumerate(crops.scans):
        np.testing.assert_allclose(crops.gt[i].apply(scan.points),
                                   model.points[crops.model_index[i]], atol=1e-12)
