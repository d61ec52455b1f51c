import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_rotation
from oracles import brute_nearest
from stereofuse.cloud import PointCloud
from stereofuse.core import ConfigurationError, Pose, Trajectory
from stereofuse.metrics import (
    AssociationError,
    DegenerateInputError,
    DepthErrorStats,
    Sim3,
    ate_rmse,
    chamfer_metrics,
    dataset_depth_stats,
    depth_abs_error,
    format_text,
    precision_recall_curve,
    report_dict,
    umeyama_sim3,
    write_curve_csv,
    write_json,
)

# -- depth errors ------------------------------------------------------------------


def test_depth_error_identical_maps(rng):
    z = rng.uniform(1, 3, (20, 30))
    err, s = depth_abs_error(z, z)
    assert s.mean == 0 and s.median == 0 and s.count == z.size and np.all(err == 0)


def test_depth_error_constant_offset(rng):
    z = rng.uniform(1, 3, (20, 30))
    _, s = depth_abs_error(z + 0.1, z)
    assert s.mean == pytest.approx(0.1, abs=1e-12) and s.median == pytest.approx(0.1, abs=1e-12)


def test_depth_error_three_values():
    ref = np.array([[1.0, 1.0, 1.0]])
    _, s = depth_abs_error(ref + [[0.1, 0.2, 0.9]], ref)
    assert s.mean == pytest.approx(0.4) and s.median == pytest.approx(0.2)


def test_depth_error_only_mutual_pixels():
    pred = np.array([[1.0, 0.0, 2.0, np.nan]])
    ref = np.array([[1.5, 1.0, 0.0, 1.0]])
    err, s = depth_abs_error(pred, ref)
    assert s.count == 1 and s.mean == pytest.approx(0.5)
    assert np.isnan(err[0, 1:]).all()


def test_depth_error_zero_overlap_is_undefined():
    _, s = depth_abs_error(np.zeros((3, 3)), np.ones((3, 3)))
    assert not s.defined and math.isnan(s.mean) and math.isnan(s.median)
    assert report_dict(s)["mean"] == "undefined"


def test_depth_error_shape_mismatch():
    with pytest.raises(ConfigurationError):
        depth_abs_error(np.ones((2, 3)), np.ones((3, 2)))


def test_dataset_stats_single_map():
    s = DepthErrorStats(0.3, 0.2, 50)
    d = dataset_depth_stats([s])
    assert d.mae == 0.3 and d.median_of_medians == 0.2


def test_dataset_stats_median_of_medians():
    d = dataset_depth_stats([DepthErrorStats(1, m, 10) for m in (0.5, 0.1, 0.3)])
    assert d.median_of_medians == 0.3


def test_dataset_stats_pixel_weighted_mean():
    d = dataset_depth_stats([DepthErrorStats(0.2, 0.2, 100), DepthErrorStats(0.4, 0.4, 300)])
    assert d.mae == pytest.approx((0.2 * 100 + 0.4 * 300) / 400) and d.mae == pytest.approx(0.35)


def test_dataset_stats_empty_is_undefined():
    d = dataset_depth_stats([])
    assert not d.defined and math.isnan(d.mae)
    assert not dataset_depth_stats([DepthErrorStats(math.nan, math.nan, 0)]).defined


# -- Chamfer -----------------------------------------------------------------------


def _brute_metrics(src, tgt, tau):
    a = brute_nearest(src, tgt)
    b = brute_nearest(tgt, src)
    return a.mean(), b.mean(), 100.0 * np.mean(a < tau), 100.0 * np.mean(b < tau)


def test_chamfer_identical_clouds(rng):
    pts = rng.normal(size=(300, 3))
    m = chamfer_metrics(PointCloud(pts), PointCloud(pts))
    assert (m.accuracy, m.completeness, m.precision, m.recall) == (0, 0, 100, 100)
    assert m.threshold == 0.1


def test_chamfer_uniform_shift():
    g = np.arange(5) * 1.0
    pts = np.stack(np.meshgrid(g, g, g), -1).reshape(-1, 3)
    shifted = pts + [0.05, 0, 0]
    m = chamfer_metrics(shifted, pts, 0.1)
    assert m.accuracy == pytest.approx(0.05, abs=1e-12) and m.precision == 100
    assert chamfer_metrics(shifted, pts, 0.04).precision == 0


@pytest.mark.parametrize("n,seed", [(500, 0), (500, 1), (2000, 2)])
def test_chamfer_matches_brute_force(n, seed):
    r = np.random.default_rng(seed)
    src = r.uniform(0, 1, (n, 3))
    tgt = r.uniform(0, 1, (n + 37, 3))
    for tau in (0.02, 0.05, 0.1):
        m = chamfer_metrics(src, tgt, tau)
        ref = _brute_metrics(src, tgt, tau)
        assert np.allclose((m.accuracy, m.completeness, m.precision, m.recall), ref, rtol=0, atol=1e-9)


def test_chamfer_empty_is_undefined(rng):
    m = chamfer_metrics(PointCloud(), rng.normal(size=(5, 3)))
    assert not m.defined and math.isnan(m.accuracy)
    assert report_dict(m)["precision"] == "undefined"


def test_curve_identical_is_flat(rng):
    pts = rng.normal(size=(100, 3))
    curve = precision_recall_curve(pts, pts, [0.01, 0.1, 1.0])
    assert all(s.precision == 100 and s.recall == 100 for s in curve)


@given(st.integers(0, 10_000), st.lists(st.floats(1e-3, 1.0), min_size=2, max_size=8, unique=True))
def test_curve_monotone_and_consistent(seed, taus):
    r = np.random.default_rng(seed)
    src = r.uniform(0, 1, (60, 3))
    tgt = r.uniform(0, 1, (80, 3))
    taus = sorted(taus)
    curve = precision_recall_curve(src, tgt, taus)
    p = [s.precision for s in curve]
    rc = [s.recall for s in curve]
    assert p == sorted(p) and rc == sorted(rc)
    for s in curve:
        m = chamfer_metrics(src, tgt, s.threshold)
        assert (s.precision, s.recall) == (m.precision, m.recall)


def test_curve_rejects_unsorted_thresholds(rng):
    pts = rng.normal(size=(5, 3))
    with pytest.raises(ConfigurationError):
        precision_recall_curve(pts, pts, [0.2, 0.1])


# -- sim3 ------------------------------------------------------------------------


def test_umeyama_identity_and_scale(rng):
    x = rng.normal(size=(20, 3))
    t = umeyama_sim3(x, x)
    assert t.scale == pytest.approx(1) and np.allclose(t.rotation, np.eye(3)) and np.allclose(t.translation, 0)
    t2 = umeyama_sim3(x, 2 * x)
    assert t2.scale == pytest.approx(2) and np.allclose(t2.rotation, np.eye(3)) and np.allclose(t2.translation, 0)


@pytest.mark.parametrize("seed", range(10))
def test_umeyama_recovers_random_sim3(seed):
    r = np.random.default_rng(seed)
    truth = Sim3(r.uniform(0.5, 2.0), random_rotation(r), r.normal(scale=3, size=3))
    x = r.normal(size=(50, 3))
    est = umeyama_sim3(x, truth.apply(x))
    assert abs(est.scale - truth.scale) < 1e-6
    assert np.abs(est.rotation - truth.rotation).max() < 1e-6
    assert np.abs(est.translation - truth.translation).max() < 1e-6


def test_umeyama_handles_reflection_case(rng):
    # a mirrored target must still yield a proper rotation
    x = rng.normal(size=(30, 3))
    t = umeyama_sim3(x, x * [1, 1, -1])
    assert np.linalg.det(t.rotation) == pytest.approx(1.0)


@given(st.integers(0, 10_000))
def test_umeyama_never_worse_than_identity(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(12, 3))
    y = r.normal(size=(12, 3)) * r.uniform(0.1, 3) + r.normal(size=3)
    t = umeyama_sim3(x, y)
    assert ((y - t.apply(x)) ** 2).sum() <= ((y - x) ** 2).sum() + 1e-9


@pytest.mark.parametrize(
    "pts",
    [
        np.zeros((5, 3)),
        np.outer(np.arange(6.0), [1.0, 2.0, -1.0]),
        np.zeros((2, 3)),
    ],
)
def test_umeyama_degenerate(pts):
    with pytest.raises(DegenerateInputError):
        umeyama_sim3(pts, pts)


def test_sim3_validation():
    with pytest.raises(ConfigurationError):
        Sim3(0.0)
    with pytest.raises(ConfigurationError):
        Sim3(1.0, np.diag([1.0, 1.0, -1.0]))


def test_sim3_inverse(rng):
    s = Sim3(1.7, random_rotation(rng), rng.normal(size=3))
    x = rng.normal(size=(10, 3))
    assert np.allclose(s.inverse().apply(s.apply(x)), x)


# -- ATE -------------------------------------------------------------------------


def _trajectory(rng, n=40):
    ts = np.arange(n) * 0.1
    centers = np.cumsum(rng.normal(scale=0.2, size=(n, 3)), axis=0)
    poses = [Pose.from_camera_center(random_rotation(rng), c) for c in centers]
    return Trajectory(ts, poses)


def _transformed(traj, sim, noise=None, dt=0.0):
    poses = []
    for i, p in enumerate(traj.poses):
        c = p.center + (0 if noise is None else noise[i])
        poses.append(Pose.from_camera_center(sim.rotation @ p.rotation.T, sim.apply(c)))
    return Trajectory(traj.timestamps + dt, poses)


def test_ate_identical_is_zero(rng):
    t = _trajectory(rng)
    assert ate_rmse(t, t, align=False).rmse == 0
    assert ate_rmse(t, t, align=True).rmse < 1e-9


def test_ate_constant_offset(rng):
    t = _trajectory(rng)
    moved = _transformed(t, Sim3(translation=[0.1, 0, 0]))
    assert ate_rmse(moved, t, align=False).rmse == pytest.approx(0.1, abs=1e-12)
    assert ate_rmse(moved, t, align=True).rmse < 1e-9


def test_ate_pairs_by_timestamp_with_tolerance(rng):
    t = _trajectory(rng)
    jittered = _transformed(t, Sim3(), dt=0.015)
    res = ate_rmse(jittered, t, align=False)
    assert res.pairs == len(t) and res.rmse < 1e-12
    with pytest.raises(AssociationError):
        ate_rmse(_transformed(t, Sim3(), dt=0.05), t, tolerance=0.02)


@pytest.mark.parametrize("seed", range(5))
def test_ate_noisy_sim3_recovers_noise_level(seed):
    r = np.random.default_rng(seed)
    ref = _trajectory(r, 200)
    noise = r.normal(scale=0.01, size=(len(ref), 3))
    sim = Sim3(r.uniform(0.5, 2.0), random_rotation(r), r.normal(size=3))
    est = _transformed(ref, sim, noise)
    injected = np.sqrt(np.mean((noise**2).sum(1)))
    ate = ate_rmse(est, ref, align=True)
    assert abs(ate.rmse - injected) < 0.2 * injected
    assert ate.transform.scale == pytest.approx(1 / sim.scale, rel=1e-2)


@given(st.integers(0, 10_000))
def test_aligned_ate_invariant_under_sim3(seed):
    r = np.random.default_rng(seed)
    ref = _trajectory(r, 15)
    est = _transformed(ref, Sim3(), r.normal(scale=0.05, size=(15, 3)))
    base = ate_rmse(est, ref, align=True).rmse
    sim = Sim3(r.uniform(0.2, 5.0), random_rotation(r), r.normal(scale=10, size=3))
    assert abs(ate_rmse(_transformed(est, sim), ref, align=True).rmse - base) < 1e-9


# -- reports ---------------------------------------------------------------------


def test_reports_text_json_csv(tmp_path, rng):
    pts = rng.normal(size=(50, 3))
    m = chamfer_metrics(pts, pts + 0.01)
    rep = report_dict(m)
    text = format_text(rep)
    assert "precision: 100" in text and len(text.strip().splitlines()) == len(rep)
    write_json(rep, tmp_path / "m.json")
    assert json.loads((tmp_path / "m.json").read_text())["precision"] == 100.0
    write_json(report_dict(chamfer_metrics(PointCloud(), pts)), tmp_path / "u.json")
    assert json.loads((tmp_path / "u.json").read_text())["accuracy"] == "undefined"
    curve = precision_recall_curve(pts, pts + 0.01, [0.001, 0.1])
    write_curve_csv(curve, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "threshold,precision,recall" and len(lines) == 3
