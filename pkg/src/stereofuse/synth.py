"""Analytic synthetic scenes with exact ground truth.

Surfaces are planar patches ray-cast per pixel, so depth and disparity are
exact.  Texture is multi-octave value noise anchored to the surface in world
coordinates, so every camera of a sequence sees the same pattern.  Lattice
values are blended linearly: along an image row the texture is piecewise
linear, so bilinear resampling is exact up to quantization except where a
sample interval straddles a lattice line.

World frame = camera frame of the identity pose.  Cameras look down +Z, the
right camera of the rig sits ``baseline_m`` along the left camera's +X axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfigurationError, Intrinsics, Pose, StereoRig, pixel_grid
from .core import Trajectory, write_calibration, write_image, write_pfm, write_trajectory


@dataclass(frozen=True)
class PlanePatch:
    """Plane ``normal . X = offset``; optionally limited to ``X[axis] > bound``."""

    normal: tuple[float, float, float]
    offset: float
    clip_axis: int | None = None
    clip_min: float = -math.inf

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - origin @ n) / denom
        t = np.where(np.isfinite(t) & (t > 0), t, np.inf)
        if self.clip_axis is not None:
            hit = origin + dirs * np.where(np.isfinite(t), t, 0.0)[..., None]
            t = np.where(hit[..., self.clip_axis] > self.clip_min, t, np.inf)
        return t


@dataclass(frozen=True)
class SurfaceSpec:
    kind: str  # "plane" | "ramp" | "step"
    patches: tuple[PlanePatch, ...]

    @classmethod
    def plane(cls, depth: float) -> SurfaceSpec:
        """Fronto-parallel plane ``Z = depth``."""
        return cls("plane", (PlanePatch((0.0, 0.0, 1.0), depth),))

    @classmethod
    def plane_at_disparity(cls, disparity: float, rig: StereoRig) -> SurfaceSpec:
        return cls.plane(rig.focal_baseline / disparity)

    @classmethod
    def ramp(cls, d_left: float, d_right: float, rig: StereoRig) -> SurfaceSpec:
        """Slanted plane whose disparity in the identity view runs linearly from
        ``d_left`` at column 0 to ``d_right`` at the last column."""
        intr = rig.intrinsics
        k = (d_right - d_left) / (intr.width - 1)
        # d(x) = d_left + k x and x = fx X / Z + cx give a plane in (X, Z)
        normal = (k * intr.fx, 0.0, d_left + k * intr.cx)
        return cls("ramp", (PlanePatch(normal, rig.focal_baseline),))

    @classmethod
    def step(cls, near_depth: float, far_depth: float, edge_x: float = 0.0) -> SurfaceSpec:
        """Background plane at ``far_depth`` with a foreground half-plane at
        ``near_depth`` covering world ``X > edge_x``."""
        if not near_depth < far_depth:
            raise ConfigurationError("step surface needs near_depth < far_depth")
        return cls(
            "step",
            (
                PlanePatch((0.0, 0.0, 1.0), far_depth),
                PlanePatch((0.0, 0.0, 1.0), near_depth, clip_axis=0, clip_min=edge_x),
            ),
        )

    def cast(self, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest hit along each ray: ``(t, patch_index)``; misses give ``t = inf``."""
        ts = np.stack([p.intersect(origin, dirs) for p in self.patches])
        idx = np.argmin(ts, axis=0)
        return np.take_along_axis(ts, idx[None], axis=0)[0], idx


@dataclass(frozen=True)
class NoiseSpec:
    """Corruption applied to ground-truth depth when building fusion inputs."""

    sigma: float = 0.0
    outlier_fraction: float = 0.0
    outlier_range: tuple[float, float] | None = None
    confidence: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class Texture:
    seed: int = 0
    cell_m: float = 0.02
    octaves: int = 2
    table_size: int = 256
    fade: str = "linear"

    def __call__(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Intensity in [0, 1] at surface coordinates ``(s, t)`` (metres)."""
        rng = np.random.default_rng(self.seed)
        total = np.zeros(np.broadcast(s, t).shape)
        weight = 0.0
        for o in range(self.octaves):
            table = rng.random((self.table_size, self.table_size))
            cell = self.cell_m * 2**o
            amp = 1.0 / (1.0 + 0.5 * o)
            total += amp * _value_noise(table, s / cell + 17.31 * o, t / cell + 5.77 * o, self.fade)
            weight += amp
        return total / weight


def _fade(f: np.ndarray, kind: str) -> np.ndarray:
    if kind == "linear":
        return f
    if kind == "cubic":
        return f * f * (3 - 2 * f)
    return f * f * f * (f * (f * 6 - 15) + 10)


def _value_noise(table: np.ndarray, s: np.ndarray, t: np.ndarray, fade: str = "quintic") -> np.ndarray:
    n = table.shape[0]
    i0 = np.floor(s)
    j0 = np.floor(t)
    fs = s - i0
    ft = t - j0
    ws = _fade(fs, fade)
    wt = _fade(ft, fade)
    i0 = i0.astype(np.int64) % n
    j0 = j0.astype(np.int64) % n
    i1 = (i0 + 1) % n
    j1 = (j0 + 1) % n
    a = table[j0, i0] * (1 - ws) + table[j0, i1] * ws
    b = table[j1, i0] * (1 - ws) + table[j1, i1] * ws
    return a * (1 - wt) + b * wt


@dataclass(frozen=True)
class SyntheticScene:
    surface: SurfaceSpec
    rig: StereoRig
    trajectory: tuple[Pose, ...] = (Pose(),)
    texture: Texture = field(default_factory=Texture)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    d_max: int = 100
    fps: float = 15.0
    # intensity range the texture is mapped into
    contrast: tuple[int, int] = (20, 235)

    def __post_init__(self):
        object.__setattr__(self, "trajectory", tuple(self.trajectory))
        if self.fps <= 0:
            raise ConfigurationError("fps must be positive")

    @property
    def intrinsics(self) -> Intrinsics:
        return self.rig.intrinsics


@dataclass
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    disparity: np.ndarray
    depth: np.ndarray


@dataclass
class SyntheticFrame:
    frame_id: int
    timestamp: float
    pose: Pose
    left: np.ndarray
    right: np.ndarray
    gt_disparity: np.ndarray
    gt_depth: np.ndarray
    depth: np.ndarray
    confidence: np.ndarray


def _camera_rays(intr: Intrinsics, pose: Pose, u=None, v=None) -> tuple[np.ndarray, np.ndarray]:
    """World-frame origin and per-pixel directions whose camera-frame z is 1.

    Defaults to the full pixel grid; explicit ``(u, v)`` may be fractional.
    """
    if u is None:
        u, v = pixel_grid(intr.height, intr.width)
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    return pose.center, d_cam @ pose.rotation  # R^T d for row vectors


def _surface_coords(hit: np.ndarray, patch: np.ndarray, surface: SurfaceSpec) -> tuple[np.ndarray, np.ndarray]:
    """2D texture coordinates in each patch's plane (metres)."""
    s = np.empty(hit.shape[:-1])
    t = np.empty(hit.shape[:-1])
    for k, p in enumerate(surface.patches):
        n = np.asarray(p.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        e1 = np.cross([0.0, 1.0, 0.0], n)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        m = patch == k
        s[m] = hit[m] @ e1 + 3.7 * k
        t[m] = hit[m] @ e2 + 1.3 * k
    return s, t


def _shade(scene: SyntheticScene, hit: np.ndarray, patch: np.ndarray) -> np.ndarray:
    s, t = _surface_coords(hit, patch, scene.surface)
    lo, hi = scene.contrast
    return lo + (hi - lo) * scene.texture(s, t)


def _quantize(value: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(value + 0.5), 0, 255).astype(np.uint8)


def _render_view(scene: SyntheticScene, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Gray image and depth map seen by a camera at ``pose``."""
    origin, dirs = _camera_rays(scene.intrinsics, pose)
    t, patch = scene.surface.cast(origin, dirs)
    depth = np.where(np.isfinite(t), t, 0.0)
    hit = origin + dirs * depth[..., None]
    img = _quantize(_shade(scene, hit, patch))
    img[~np.isfinite(t)] = 0
    return img, depth


def right_pose(pose: Pose, rig: StereoRig) -> Pose:
    """Pose of the rig's right camera given the left one."""
    return Pose(pose.rotation, pose.translation - np.array([rig.baseline_m, 0.0, 0.0]))


def render_stereo_pair(scene: SyntheticScene, pose: Pose | None = None) -> StereoSample:
    """Rectified pair plus exact disparity and depth for the left view."""
    pose = pose or Pose()
    left, depth = _render_view(scene, pose)
    if not np.all(depth > 0):
        raise ConfigurationError("surface does not cover the whole view")
    disparity = scene.rig.focal_baseline / depth
    if disparity.max() >= scene.d_max:
        raise ConfigurationError(
            f"ground-truth disparity {disparity.max():.2f} outside representable range [0, {scene.d_max})"
        )
    right, _ = _render_view(scene, right_pose(pose, scene.rig))
    return StereoSample(left, right, disparity, depth)


def right_visibility(scene: SyntheticScene, pose: Pose | None = None, tol: float = 1e-6) -> np.ndarray:
    """True where the left pixel's surface point is also seen by the right camera."""
    pose = pose or Pose()
    intr = scene.intrinsics
    origin, dirs = _camera_rays(intr, pose)
    t, _ = scene.surface.cast(origin, dirs)
    hit = origin + dirs * t[..., None]
    rpose = right_pose(pose, scene.rig)
    pc = rpose.apply(hit)
    ur = intr.fx * pc[..., 0] / pc[..., 2] + intr.cx
    inside = (ur >= 0) & (ur <= intr.width - 1) & (pc[..., 2] > 0)
    # cast the right-camera ray toward that point and check nothing is nearer
    r_origin = rpose.center
    r_dirs = (hit - r_origin) / pc[..., 2:3]
    tr, _ = scene.surface.cast(r_origin, r_dirs)
    return inside & (np.abs(tr - pc[..., 2]) <= tol * np.maximum(1.0, pc[..., 2]))


def corrupt_depth(depth: np.ndarray, noise: NoiseSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian noise plus uniformly placed outliers; returns ``(depth, outlier_mask)``."""
    out = depth.astype(np.float64, copy=True)
    valid = out > 0
    if noise.sigma > 0:
        out[valid] += rng.normal(0.0, noise.sigma, size=int(valid.sum()))
    mask = np.zeros(out.shape, dtype=bool)
    if noise.outlier_fraction > 0:
        idx = np.flatnonzero(valid)
        k = int(round(noise.outlier_fraction * idx.size))
        chosen = rng.choice(idx, size=k, replace=False)
        lo, hi = noise.outlier_range or (0.5 * float(out[valid].min()), 2.0 * float(out[valid].max()))
        out.flat[chosen] = rng.uniform(lo, hi, size=k)
        mask.flat[chosen] = True
    out[valid & (out <= 0)] = 1e-3
    return out, mask


def render_sequence(scene: SyntheticScene, with_images: bool = True) -> list[SyntheticFrame]:
    """Render every pose of the trajectory; noise draws are seeded per scene."""
    rng = np.random.default_rng(scene.noise.seed)
    frames = []
    for k, pose in enumerate(scene.trajectory):
        if with_images:
            sample = render_stereo_pair(scene, pose)
            left, right, gt_disp, gt_depth = sample.left, sample.right, sample.disparity, sample.depth
        else:
            left = right = None
            _, gt_depth = _render_view(scene, pose)
            gt_disp = scene.rig.focal_baseline / gt_depth
        depth, _ = corrupt_depth(gt_depth, scene.noise, rng)
        conf = np.where(depth > 0, scene.noise.confidence, 0.0)
        frames.append(SyntheticFrame(k, k / scene.fps, pose, left, right, gt_disp, gt_depth, depth, conf))
    return frames


def lateral_trajectory(n: int, step: float = 0.02, axis: int = 0, wobble: float = 0.0) -> list[Pose]:
    """Camera translating along a world axis at constant speed, no rotation.

    ``wobble`` adds a small sinusoidal sideways motion on the next axis.
    """
    poses = []
    for k in range(n):
        c = np.zeros(3)
        c[axis] = k * step
        c[(axis + 1) % 2] = wobble * math.sin(0.5 * k)
        poses.append(Pose.from_camera_center(np.eye(3), c))
    return poses


def default_rig(width: int = 320, height: int = 240, fx: float = 300.0, baseline: float = 0.1) -> StereoRig:
    return StereoRig(Intrinsics(fx, fx, (width - 1) / 2, (height - 1) / 2, width, height), baseline)


def default_texture(rig: StereoRig, depth: float, seed: int = 0, cell_px: float = 4.0) -> Texture:
    """Texture whose finest octave spans ``cell_px`` pixels at ``depth``."""
    return Texture(seed=seed, cell_m=cell_px * depth / rig.intrinsics.fx)


def timestamp_name(t: float) -> str:
    return f"{int(round(t * 1e9)):019d}"


def write_dataset(scene: SyntheticScene, frames: list[SyntheticFrame], out_dir: str | Path) -> Path:
    """Write ``left/``, ``right/``, ``calib.txt``, ``poses.txt`` and ground truth in ``gt/``."""
    out = Path(out_dir)
    for sub in ("left", "right", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for f in frames:
        name = timestamp_name(f.timestamp)
        write_image(out / "left" / f"{name}.png", f.left)
        write_image(out / "right" / f"{name}.png", f.right)
        write_pfm(out / "gt" / f"{name}.pfm", f.gt_depth)
    write_calibration(out / "calib.txt", scene.rig)
    traj = Trajectory(np.array([f.timestamp for f in frames]), [f.pose for f in frames])
    write_trajectory(out / "poses.txt", traj)
    return out
