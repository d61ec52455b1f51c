"""Camera geometry shared by every stage.

Images, disparity, depth and confidence maps are plain numpy arrays indexed
``[row, col]``.  Validity is encoded in the values themselves:

* a disparity is invalid when it is negative,
* a depth is invalid when it is non-positive or non-finite.

Poses are camera-from-world: a world point ``X`` lands at ``R @ X + t`` in
camera coordinates.

File formats handled here: ``calib.txt`` (key = value), rectification maps
(binary), TUM trajectories, PFM and 16-bit PNG depth maps, 8-bit images.
"""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.spatial.transform import Rotation

INVALID_DEPTH = 0.0
INVALID_DISPARITY = -1.0

_ORTHO_TOL = 1e-9
_KV = re.compile(r"^\s*([A-Za-z_][\w]*)\s*[:=]?\s*(.*?)\s*$")
_MAP_HEADER = struct.Struct("<II")

logger = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    """Inputs that cannot be reconciled (sizes, ranges, missing fields)."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class StereoRig:
    """Rectified stereo pair: both cameras share ``intrinsics``."""

    intrinsics: Intrinsics
    baseline_m: float

    def __post_init__(self):
        if not self.baseline_m > 0:
            raise ConfigurationError(f"baseline must be positive, got {self.baseline_m}")

    @property
    def focal_baseline(self) -> float:
        return self.baseline_m * self.intrinsics.fx


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-from-world transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ConfigurationError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_camera_center(cls, rotation_world_from_cam: np.ndarray, center: np.ndarray) -> Pose:
        """Build from a camera orientation and position expressed in the world frame."""
        R_wc = np.asarray(rotation_world_from_cam, dtype=np.float64)
        R = R_wc.T
        return cls(R, -R @ np.asarray(center, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)

    def __repr__(self):
        q = Rotation.from_matrix(self.rotation).as_quat()
        return f"Pose(quat_xyzw={np.round(q, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def disparity_to_depth(disparity, rig: StereoRig):
    """Metric depth from disparity, ``Z = b * fx / d``.

    Works on scalars and arrays.  Non-positive (or non-finite) disparities map
    to ``INVALID_DEPTH`` instead of raising, so whole maps convert in one call.
    """
    d = np.asarray(disparity, dtype=np.float64)
    valid = np.isfinite(d) & (d > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(valid, rig.focal_baseline / np.where(valid, d, 1.0), INVALID_DEPTH)
    return z.item() if z.ndim == 0 else z


def depth_to_disparity(depth, rig: StereoRig):
    """Inverse of :func:`disparity_to_depth`; invalid depths give ``INVALID_DISPARITY``."""
    z = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(z) & (z > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(valid, rig.focal_baseline / np.where(valid, z, 1.0), INVALID_DISPARITY)
    return d.item() if d.ndim == 0 else d


def valid_depth(depth) -> np.ndarray:
    z = np.asarray(depth)
    return np.isfinite(z) & (z > 0)


def backproject(u, v, depth, intr: Intrinsics) -> np.ndarray:
    """Pixel coordinates plus depth to camera-frame points, shape (..., 3).

    Entries with invalid depth come back as NaN rows; callers filter them with
    :func:`valid_depth` before emitting points.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    ok = valid_depth(z)
    zz = np.where(ok, z, np.nan)
    x = (u - intr.cx) * zz / intr.fx
    y = (v - intr.cy) * zz / intr.fy
    return np.stack(np.broadcast_arrays(x, y, zz), axis=-1)


def project(points, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Camera-frame points (..., 3) to ``(u, v, z, in_front)``.

    Points with ``z <= 0`` are flagged by ``in_front == False`` and get NaN
    pixel coordinates.
    """
    P = np.asarray(points, dtype=np.float64)
    z = P[..., 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(in_front, z, np.nan)
        u = intr.fx * P[..., 0] / zs + intr.cx
        v = intr.fy * P[..., 1] / zs + intr.cy
    return u, v, z, in_front


def transform_point(points, src: Pose, dst: Pose) -> np.ndarray:
    """Move points from the ``src`` camera frame into the ``dst`` camera frame."""
    return dst.compose(src.inverse()).apply(points)


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Float64 ``(u, v)`` coordinate grids of shape (height, width)."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return u, v


def to_gray(image: np.ndarray) -> np.ndarray:
    """8-bit luminance; RGB input uses the Rec.601 weights."""
    img = np.asarray(image)
    if img.ndim == 2:
        return img.astype(np.uint8, copy=False)
    if img.ndim == 3 and img.shape[2] == 3:
        w = np.array([0.299, 0.587, 0.114])
        return np.clip(np.rint(img.astype(np.float64) @ w), 0, 255).astype(np.uint8)
    raise ConfigurationError(f"unsupported image shape {img.shape}")


# --------------------------------------------------------------------------
# rectification by remapping
#
# A RectifyMap stores, for every pixel of the rectified output, the
# fractional location to sample in the raw image.  Map file layout:
#
#     uint32 width, uint32 height            (little-endian)
#     float32 (u, v) * width * height         (row-major, interleaved)


@dataclass(frozen=True, eq=False)
class RectifyMap:
    """Source coordinates ``coords[y, x] = (u, v)`` for each output pixel.

    ``source_size`` is the (width, height) of the raw image the map expects;
    it defaults to the output size, which is what the file format assumes.
    """

    coords: np.ndarray
    source_size: tuple[int, int] | None = None

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float32)
        if c.ndim != 3 or c.shape[2] != 2:
            raise ConfigurationError(f"rectify map must have shape (H, W, 2), got {c.shape}")
        object.__setattr__(self, "coords", c)
        if self.source_size is None:
            object.__setattr__(self, "source_size", (c.shape[1], c.shape[0]))

    @property
    def width(self) -> int:
        return self.coords.shape[1]

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @classmethod
    def identity(cls, width: int, height: int) -> RectifyMap:
        v, u = np.mgrid[0:height, 0:width].astype(np.float32)
        return cls(np.stack([u, v], axis=-1))

    @classmethod
    def from_homography(
        cls, H: np.ndarray, width: int, height: int, source_size: tuple[int, int] | None = None
    ) -> RectifyMap:
        """Map for a rectifying homography ``H`` (raw pixel -> rectified pixel)."""
        Hinv = np.linalg.inv(np.asarray(H, dtype=np.float64))
        v, u = np.mgrid[0:height, 0:width].astype(np.float64)
        p = np.stack([u, v, np.ones_like(u)], axis=-1) @ Hinv.T
        with np.errstate(divide="ignore", invalid="ignore"):
            src = p[..., :2] / p[..., 2:3]
        return cls(src.astype(np.float32), source_size)

    def out_of_view(self) -> np.ndarray:
        sw, sh = self.source_size
        u = self.coords[..., 0]
        v = self.coords[..., 1]
        inside = (u >= 0) & (u <= sw - 1) & (v >= 0) & (v <= sh - 1)
        return ~inside  # NaN compares False, so it lands here too


def rectify(raw: np.ndarray, rmap: RectifyMap) -> tuple[np.ndarray, np.ndarray]:
    """Resample ``raw`` through ``rmap`` with bilinear interpolation.

    Returns the rectified image (same dtype and channel count as ``raw``) and
    a boolean mask of output pixels whose source lies outside the raw image;
    those pixels are black.
    """
    img = np.asarray(raw)
    sw, sh = rmap.source_size
    if img.shape[0] != sh or img.shape[1] != sw:
        raise ConfigurationError(
            f"raw image is {img.shape[1]}x{img.shape[0]} but the rectify map expects {sw}x{sh}"
        )
    squeeze = img.ndim == 2
    src = img[..., None] if squeeze else img
    src = src.astype(np.float64)

    outside = rmap.out_of_view()
    u = np.where(outside, 0.0, rmap.coords[..., 0].astype(np.float64))
    v = np.where(outside, 0.0, rmap.coords[..., 1].astype(np.float64))
    x0 = np.floor(u).astype(np.intp)
    y0 = np.floor(v).astype(np.intp)
    x1 = np.minimum(x0 + 1, sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    a = (u - x0)[..., None]
    b = (v - y0)[..., None]

    val = (
        (1 - a) * (1 - b) * src[y0, x0]
        + a * (1 - b) * src[y0, x1]
        + (1 - a) * b * src[y1, x0]
        + a * b * src[y1, x1]
    )
    val[outside] = 0.0
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        val = np.clip(np.floor(val + 0.5), info.min, info.max)
    out = val.astype(img.dtype)
    return (out[..., 0] if squeeze else out), outside


def write_rectify_map(rmap: RectifyMap, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAP_HEADER.pack(rmap.width, rmap.height))
        fh.write(np.ascontiguousarray(rmap.coords, dtype="<f4").tobytes())


def read_rectify_map(path: str | Path) -> RectifyMap:
    data = Path(path).read_bytes()
    if len(data) < _MAP_HEADER.size:
        raise ConfigurationError(f"{path}: rectify map truncated in header")
    width, height = _MAP_HEADER.unpack_from(data)
    expected = _MAP_HEADER.size + width * height * 8
    if len(data) != expected:
        raise ConfigurationError(f"{path}: expected {expected} bytes for {width}x{height} map, got {len(data)}")
    coords = np.frombuffer(data, dtype="<f4", offset=_MAP_HEADER.size).reshape(height, width, 2)
    return RectifyMap(coords.astype(np.float32))


# --------------------------------------------------------------------------
# file formats


class FormatError(ValueError):
    """A file exists but its contents cannot be parsed."""


@dataclass(frozen=True)
class Calibration:
    rig: StereoRig
    rectify_left: RectifyMap | None = None
    rectify_right: RectifyMap | None = None


def _parse_kv(path: Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        m = _KV.match(line)
        if not m or not m.group(2):
            raise FormatError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        values[m.group(1).lower()] = m.group(2)
    return values


def read_calibration(path: str | Path) -> Calibration:
    """Parse ``calib.txt``: fx, fy, cx, cy, width, height, baseline_m.

    Optional ``rectify_left`` / ``rectify_right`` name map files, resolved
    relative to the calibration file.
    """
    path = Path(path)
    kv = _parse_kv(path)
    missing = [k for k in ("fx", "fy", "cx", "cy", "width", "height", "baseline_m") if k not in kv]
    if missing:
        raise ConfigurationError(f"{path}: missing calibration keys {missing}")
    try:
        intr = Intrinsics(
            fx=float(kv["fx"]),
            fy=float(kv["fy"]),
            cx=float(kv["cx"]),
            cy=float(kv["cy"]),
            width=int(kv["width"]),
            height=int(kv["height"]),
        )
        rig = StereoRig(intr, float(kv["baseline_m"]))
    except ValueError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc

    maps = {}
    for side in ("rectify_left", "rectify_right"):
        if side in kv:
            p = Path(kv[side])
            maps[side] = read_rectify_map(p if p.is_absolute() else path.parent / p)
    return Calibration(rig, maps.get("rectify_left"), maps.get("rectify_right"))


def write_calibration(path: str | Path, rig: StereoRig, **extra: str) -> None:
    i = rig.intrinsics
    lines = [
        f"fx = {i.fx!r}",
        f"fy = {i.fy!r}",
        f"cx = {i.cx!r}",
        f"cy = {i.cy!r}",
        f"width = {i.width}",
        f"height = {i.height}",
        f"baseline_m = {rig.baseline_m!r}",
    ]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class Trajectory:
    """Timestamped camera poses (camera-from-world)."""

    timestamps: np.ndarray
    poses: list[Pose] = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.timestamps) != len(self.poses):
            raise ConfigurationError("trajectory needs one pose per timestamp")

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        """Camera centers in world coordinates, shape (N, 3)."""
        if not self.poses:
            return np.zeros((0, 3))
        return np.array([p.center for p in self.poses])

    def nearest(self, t: float, tolerance: float) -> int | None:
        """Index of the pose closest in time to ``t`` if within ``tolerance`` seconds."""
        if len(self.timestamps) == 0:
            return None
        i = int(np.searchsorted(self.timestamps, t))
        best = None
        for j in (i - 1, i):
            if 0 <= j < len(self.timestamps):
                dt = abs(self.timestamps[j] - t)
                if dt <= tolerance and (best is None or dt < abs(self.timestamps[best] - t)):
                    best = j
        return best


def read_trajectory(path: str | Path) -> Trajectory:
    """Read a TUM trajectory: ``timestamp tx ty tz qx qy qz qw`` per line.

    Each line is the camera's position and orientation in the world
    (world-from-camera); it is inverted into the camera-from-world convention.
    Rows are sorted by timestamp.
    """
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.replace(",", " ").split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        q = np.array(vals[4:8])
        if not np.all(np.isfinite(vals)) or np.linalg.norm(q) < 1e-12:
            raise FormatError(f"{path}:{lineno}: invalid pose values")
        rows.append((vals[0], np.array(vals[1:4]), q / np.linalg.norm(q)))
    rows.sort(key=lambda r: r[0])
    poses = [Pose.from_camera_center(Rotation.from_quat(q).as_matrix(), c) for _, c, q in rows]
    return Trajectory(np.array([r[0] for r in rows]), poses)


def write_trajectory(path: str | Path, traj: Trajectory) -> None:
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose in zip(traj.timestamps, traj.poses):
            c = pose.center
            q = Rotation.from_matrix(pose.rotation.T).as_quat()
            fh.write(f"{t:.9f} " + " ".join(f"{x:.12g}" for x in (*c, *q)) + "\n")


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Little-endian PFM (``Pf`` for one channel, ``PF`` for three)."""
    a = np.asarray(data, dtype="<f4")
    if a.ndim == 2:
        header = "Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        header = "PF"
    else:
        raise ConfigurationError(f"cannot write array of shape {a.shape} as PFM")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise FormatError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        scale_line = fh.readline().strip()
        try:
            w, h = int(dims[0]), int(dims[1])
            scale = float(scale_line)
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}: malformed PFM header") from exc
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        payload = fh.read()
    count = w * h * channels
    if len(payload) < count * 4:
        raise FormatError(f"{path}: truncated PFM payload")
    a = np.frombuffer(payload, dtype=dtype, count=count)
    a = a.reshape((h, w, 3) if channels == 3 else (h, w))[::-1]
    return a.astype(np.float32)


def write_depth_png16(path: str | Path, depth: np.ndarray) -> None:
    """Depth in millimetres as 16-bit PNG; invalid pixels are 0."""
    z = np.asarray(depth, dtype=np.float64)
    ok = valid_depth(z)
    mm = np.zeros(z.shape, dtype=np.uint16)
    mm[ok] = np.clip(np.rint(z[ok] * 1000.0), 0, 65535).astype(np.uint16)
    if not cv2.imwrite(str(path), mm):
        raise OSError(f"failed to write {path}")


def read_depth_png16(path: str | Path) -> np.ndarray:
    mm = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if mm is None or mm.dtype != np.uint16:
        raise FormatError(f"{path}: not a 16-bit PNG")
    return mm.astype(np.float64) / 1000.0


def read_image(path: str | Path) -> np.ndarray:
    """8-bit image as (H, W) gray or (H, W, 3) RGB."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"{path}: unreadable image")
    if img.dtype == np.uint16:
        img = (img >> 8).astype(np.uint8)
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = img[..., :3]
        img = np.ascontiguousarray(img[..., ::-1])
    return img


def write_image(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim == 3:
        img = np.ascontiguousarray(img[..., ::-1])
    if not cv2.imwrite(str(path), img):
        raise OSError(f"failed to write {path}")


def numeric_stem(path: Path) -> int | None:
    try:
        return int(path.stem)
    except ValueError:
        return None
