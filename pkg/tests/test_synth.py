import math

import numpy as np
import pytest
from scipy.stats import chisquare

from stereofuse import synth
from stereofuse.core import ConfigurationError, depth_to_disparity, read_calibration, read_pfm, read_trajectory
from stereofuse.core import read_image
from stereofuse.fusion import DepthFrame, FusionParams, fuse_frames


def _scene(surface, rig, **kw):
    return synth.SyntheticScene(surface, rig, texture=synth.default_texture(rig, 1.0), **kw)


def test_plane_disparity_is_constant(small_rig):
    pair = synth.render_stereo_pair(_scene(synth.SurfaceSpec.plane_at_disparity(25.0, small_rig), small_rig))
    assert np.allclose(pair.disparity, 25.0, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", ["plane", "ramp", "step"])
def test_disparity_times_depth_is_focal_baseline(small_rig, kind):
    surface = {
        "plane": synth.SurfaceSpec.plane_at_disparity(17.3, small_rig),
        "ramp": synth.SurfaceSpec.ramp(10, 40, small_rig),
        "step": synth.SurfaceSpec.step(0.4, 0.9),
    }[kind]
    pair = synth.render_stereo_pair(_scene(surface, small_rig))
    fb = small_rig.focal_baseline
    assert np.array_equal(pair.disparity, fb / pair.depth)
    assert np.array_equal(pair.disparity, depth_to_disparity(pair.depth, small_rig))
    assert np.allclose(pair.disparity * pair.depth, fb, rtol=1e-15, atol=0)


def test_ramp_disparity_linear_in_x(small_rig):
    pair = synth.render_stereo_pair(_scene(synth.SurfaceSpec.ramp(10, 40, small_rig), small_rig))
    W = small_rig.intrinsics.width
    expected = 10 + 30 * np.arange(W) / (W - 1)
    assert np.abs(pair.disparity - expected[None, :]).max() < 1e-9


@pytest.mark.parametrize("near,far", [(0.4, 0.9), (0.3, 1.2)])
def test_step_occlusion_band_equals_disparity_difference(small_rig, near, far):
    scene = _scene(synth.SurfaceSpec.step(near, far), small_rig)
    hidden = ~synth.right_visibility(scene)
    fb = small_rig.focal_baseline
    band = fb / near - fb / far
    # the right image border also hides a strip at the left edge; count only the step's band
    W = small_rig.intrinsics.width
    edge_u = small_rig.intrinsics.cx  # foreground covers world X > 0
    cols = np.arange(W)
    around = (cols > edge_u - band - 3) & (cols <= edge_u + 3)
    widths = hidden[:, around].sum(axis=1)
    assert np.all(np.abs(widths - band) <= 1)


def _cells(x_world, texture):
    """Lattice cell of every octave at surface coordinate ``s = X``."""
    return np.stack([np.floor(x_world / (texture.cell_m * 2**o) + 17.31 * o) for o in range(texture.octaves)], axis=-1)


@pytest.mark.parametrize("disparity", [25.0, 25.3, 31.75])
def test_photoconsistency_on_plane(small_rig, disparity):
    """Bilinear sampling of the right image at x - d reproduces the left
    intensity within one level wherever the sample interval lies in one
    texture lattice cell."""
    Z = small_rig.focal_baseline / disparity
    scene = synth.SyntheticScene(
        synth.SurfaceSpec.plane(Z), small_rig, texture=synth.default_texture(small_rig, Z, seed=3)
    )
    pair = synth.render_stereo_pair(scene)
    intr = small_rig.intrinsics
    H, W = pair.left.shape
    xs = np.arange(W, dtype=float)
    xr = xs - disparity
    ok = (xr >= 0) & (xr <= W - 2)
    x0 = np.floor(xr).astype(int)
    frac = xr - x0
    x0c = np.clip(x0, 0, W - 2)
    R = pair.right.astype(float)
    sampled = R[:, x0c] * (1 - frac) + R[:, x0c + 1] * frac
    # world X seen by right-camera columns x0 and x0+1
    b = small_rig.baseline_m
    Xa = (x0c - intr.cx) * Z / intr.fx + b
    Xb = (x0c + 1 - intr.cx) * Z / intr.fx + b
    same_cell = np.all(_cells(Xa, scene.texture) == _cells(Xb, scene.texture), axis=-1)
    use = ok & same_cell
    assert use.mean() > 0.3
    diff = np.abs(sampled[:, use] - pair.left[:, use].astype(float))
    assert diff.max() <= 1.0 + 1e-9


def test_out_of_range_disparity_rejected(small_rig):
    scene = _scene(synth.SurfaceSpec.plane_at_disparity(120.0, small_rig), small_rig, d_max=100)
    with pytest.raises(ConfigurationError, match="disparity"):
        synth.render_stereo_pair(scene)


def test_invalid_surfaces_rejected(small_rig):
    with pytest.raises(ConfigurationError):
        synth.SurfaceSpec.step(1.0, 0.5)
    with pytest.raises(ConfigurationError):
        synth.render_stereo_pair(_scene(synth.SurfaceSpec.plane(-1.0), small_rig))


def _noisy_scene(rig, seed, n=3):
    return synth.SyntheticScene(
        synth.SurfaceSpec.plane(1.5),
        rig,
        trajectory=synth.lateral_trajectory(n, 0.03),
        noise=synth.NoiseSpec(sigma=0.02, outlier_fraction=0.1, seed=seed),
    )


def test_seeded_sequences_are_bit_identical(small_rig):
    a = synth.render_sequence(_noisy_scene(small_rig, 7))
    b = synth.render_sequence(_noisy_scene(small_rig, 7))
    c = synth.render_sequence(_noisy_scene(small_rig, 8))
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.depth, fb.depth) and np.array_equal(fa.left, fb.left)
        assert np.array_equal(fa.right, fb.right)
    assert not np.array_equal(a[0].depth, c[0].depth)


def test_sequence_metadata(small_rig):
    frames = synth.render_sequence(_noisy_scene(small_rig, 0, n=4), with_images=False)
    assert [f.frame_id for f in frames] == [0, 1, 2, 3]
    assert [f.timestamp for f in frames] == pytest.approx([0, 1 / 15, 2 / 15, 3 / 15])
    assert np.allclose(frames[2].pose.center, [0.06, 0, 0])
    assert frames[0].left is None


def test_outliers_count_and_uniformity():
    rng = np.random.default_rng(11)
    depth = np.full((200, 200), 2.0)
    depth[:, :20] = 0  # invalid pixels never receive outliers
    _, mask = synth.corrupt_depth(depth, synth.NoiseSpec(outlier_fraction=0.1), rng)
    valid = depth > 0
    assert mask.sum() == round(0.1 * valid.sum()) and not mask[~valid].any()
    # counts over a 10 x 9 block grid of the valid area
    blocks = mask[:, 20:].reshape(10, 20, 9, 20).sum(axis=(1, 3)).ravel()
    assert chisquare(blocks).pvalue > 1e-3


def test_outlier_values_within_range():
    rng = np.random.default_rng(2)
    depth = np.full((50, 50), 2.0)
    out, mask = synth.corrupt_depth(depth, synth.NoiseSpec(outlier_fraction=0.2, outlier_range=(1.0, 4.0)), rng)
    assert out[mask].min() >= 1.0 and out[mask].max() < 4.0 and np.all(out[~mask] == 2.0)


def test_gaussian_noise_level():
    rng = np.random.default_rng(5)
    depth = np.full((300, 300), 2.0)
    out, _ = synth.corrupt_depth(depth, synth.NoiseSpec(sigma=0.05), rng)
    assert np.std(out - depth) == pytest.approx(0.05, rel=0.02)


def test_noise_free_sequence_is_fusion_fixed_point(small_rig):
    scene = synth.SyntheticScene(synth.SurfaceSpec.plane(1.2), small_rig, trajectory=synth.lateral_trajectory(3, 0.02))
    frames = [DepthFrame(f.depth, f.confidence, f.pose, f.frame_id) for f in synth.render_sequence(scene, False)]
    fused = fuse_frames(frames, small_rig.intrinsics, FusionParams())
    covered = fused.depth > 0
    assert covered.mean() > 0.9
    assert np.abs(fused.depth[covered] - frames[1].depth[covered]).max() < 1e-12


def test_lateral_trajectory_wobble():
    poses = synth.lateral_trajectory(5, 0.1, wobble=0.02)
    c = np.array([p.center for p in poses])
    assert np.allclose(c[:, 0], np.arange(5) * 0.1)
    assert np.allclose(c[:, 1], 0.02 * np.sin(0.5 * np.arange(5)))
    assert all(np.array_equal(p.rotation, np.eye(3)) for p in poses)


def test_write_dataset_layout(tmp_path, small_rig):
    scene = synth.SyntheticScene(synth.SurfaceSpec.plane(1.0), small_rig, trajectory=synth.lateral_trajectory(2, 0.02))
    frames = synth.render_sequence(scene)
    out = synth.write_dataset(scene, frames, tmp_path / "ds")
    names = sorted(p.name for p in (out / "left").iterdir())
    assert names == [synth.timestamp_name(0.0) + ".png", synth.timestamp_name(1 / 15) + ".png"]
    assert names == sorted(p.name for p in (out / "right").iterdir())
    assert np.array_equal(read_image(out / "left" / names[1]), frames[1].left)
    assert np.array_equal(
        read_pfm(out / "gt" / names[0].replace(".png", ".pfm")), frames[0].gt_depth.astype(np.float32)
    )
    calib = read_calibration(out / "calib.txt")
    assert calib.rig.baseline_m == pytest.approx(0.1) and calib.rig.intrinsics.fx == pytest.approx(150.0)
    traj = read_trajectory(out / "poses.txt")
    assert len(traj) == 2 and traj.poses[1].allclose(frames[1].pose, atol=1e-9)
    assert math.isclose(traj.timestamps[1], 1 / 15, abs_tol=1e-9)
