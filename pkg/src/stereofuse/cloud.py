"""Colored point clouds: generation from depth frames, merging, voxel
downsampling and PLY input/output."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfigurationError, Intrinsics, backproject, pixel_grid, valid_depth
from .fusion import DepthFrame

logger = logging.getLogger(__name__)


class PlyError(ValueError):
    """Malformed or unsupported PLY content."""


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors: np.ndarray | None = None
    confidence: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if not np.all(np.isfinite(self.points)):
            raise ConfigurationError("point coordinates must be finite")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != n:
                raise ConfigurationError(f"{len(self.colors)} colors for {n} points")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
            if len(self.confidence) != n:
                raise ConfigurationError(f"{len(self.confidence)} confidences for {n} points")

    def __len__(self):
        return len(self.points)


def depth_to_points(frame: DepthFrame, color: np.ndarray | None, intr: Intrinsics) -> PointCloud:
    """World-frame points for every valid depth pixel, colored from ``color``.

    ``color`` is an image registered to the depth frame (gray or RGB); gray is
    replicated into the three channels.  Points come out in row-major pixel
    order.
    """
    if frame.shape != intr.shape:
        raise ConfigurationError(f"depth is {frame.shape}, intrinsics expect {intr.shape}")
    ok = valid_depth(frame.depth)
    u, v = pixel_grid(*intr.shape)
    pc = backproject(u[ok], v[ok], frame.depth[ok], intr)
    pts = frame.pose.inverse().apply(pc)
    colors = None
    if color is not None:
        img = np.asarray(color)
        if img.shape[:2] != intr.shape:
            raise ConfigurationError(f"color image is {img.shape[:2]}, depth is {intr.shape}")
        colors = img[ok]
        if colors.ndim == 1:
            colors = np.repeat(colors[:, None], 3, axis=1)
    return PointCloud(pts, colors, frame.confidence[ok])


def merge(a: PointCloud, b: PointCloud) -> PointCloud:
    """Concatenate ``a`` then ``b``; per-point attributes survive only if both have them."""
    colors = None
    if a.colors is not None and b.colors is not None:
        colors = np.concatenate([a.colors, b.colors])
    elif len(a) == 0 and b.colors is not None:
        colors = b.colors
    elif len(b) == 0 and a.colors is not None:
        colors = a.colors
    conf = None
    if a.confidence is not None and b.confidence is not None:
        conf = np.concatenate([a.confidence, b.confidence])
    elif len(a) == 0:
        conf = b.confidence
    elif len(b) == 0:
        conf = a.confidence
    return PointCloud(np.concatenate([a.points, b.points]), colors, conf)


_KEY_BITS = 21
_KEY_HALF = 1 << (_KEY_BITS - 1)


def _voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    """Voxel indices packed into one int64 (21 bits per axis, offset binary)."""
    idx = np.floor(points / voxel).astype(np.int64)
    if len(idx) and (idx.min() < -_KEY_HALF or idx.max() >= _KEY_HALF):
        raise ConfigurationError(f"points span more than {2 * _KEY_HALF} voxels of {voxel} m per axis")
    idx += _KEY_HALF
    return (idx[:, 0] << (2 * _KEY_BITS)) | (idx[:, 1] << _KEY_BITS) | idx[:, 2]


class VoxelGrid:
    """Running per-voxel sums so a global cloud stays bounded in memory."""

    def __init__(self, voxel: float):
        if not voxel > 0:
            raise ConfigurationError(f"voxel size must be positive, got {voxel}")
        self.voxel = float(voxel)
        self._keys = np.zeros(0, dtype=np.int64)
        self._sum = np.zeros((0, 3))
        self._rgb = np.zeros((0, 3))
        self._n = np.zeros(0, dtype=np.int64)
        self._has_color = True

    def __len__(self):
        return len(self._n)

    def add(self, pc: PointCloud) -> None:
        if len(pc) == 0:
            return
        self._has_color &= pc.colors is not None
        rgb = pc.colors.astype(np.float64) if pc.colors is not None else np.zeros((len(pc), 3))
        keys = np.concatenate([self._keys, _voxel_keys(pc.points, self.voxel)])
        sums = np.concatenate([self._sum, pc.points])
        cols = np.concatenate([self._rgb, rgb])
        counts = np.concatenate([self._n, np.ones(len(pc), dtype=np.int64)])
        uniq, inv = np.unique(keys, return_inverse=True)
        m = len(uniq)
        self._keys = uniq
        self._sum = np.stack([np.bincount(inv, sums[:, i], m) for i in range(3)], axis=1)
        self._rgb = np.stack([np.bincount(inv, cols[:, i], m) for i in range(3)], axis=1)
        self._n = np.bincount(inv, counts, m).astype(np.int64)

    def cloud(self) -> PointCloud:
        """Centroid and mean color per voxel, ordered by voxel key."""
        n = self._n[:, None].astype(np.float64)
        colors = None
        if self._has_color and len(self._n):
            colors = np.clip(np.floor(self._rgb / n + 0.5), 0, 255).astype(np.uint8)
        return PointCloud(self._sum / n if len(self._n) else np.zeros((0, 3)), colors)


def voxel_downsample(pc: PointCloud, voxel: float) -> PointCloud:
    grid = VoxelGrid(voxel)
    grid.add(pc)
    return grid.cloud()


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(pc: PointCloud, path: str | Path, binary: bool = True) -> None:
    """Vertices with float32 x, y, z and (if present) uchar red, green, blue."""
    n = len(pc)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if pc.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(n, dtype=fields)
    for i, name in enumerate("xyz"):
        rec[name] = pc.points[:, i]
    if pc.colors is not None:
        for i, name in enumerate(("red", "green", "blue")):
            rec[name] = pc.colors[:, i]
    fmt = "binary_little_endian" if binary else "ascii"
    header = [
        "ply",
        f"format {fmt} 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if pc.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            for r in rec:
                vals = [repr(float(r[name])) for name in "xyz"]
                if pc.colors is not None:
                    vals += [str(int(r[c])) for c in ("red", "green", "blue")]
                fh.write((" ".join(vals) + "\n").encode("ascii"))


def _parse_header(fh, path) -> tuple[str, list[tuple[str, int, list[tuple[str, str]]]]]:
    if fh.readline().strip() != b"ply":
        raise PlyError(f"{path}: missing 'ply' magic in header")
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    while True:
        raw = fh.readline()
        if not raw:
            raise PlyError(f"{path}: header ends before 'end_header'")
        line = raw.decode("ascii", errors="replace").strip()
        if line == "end_header":
            break
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) != 3 or parts[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"{path}: unsupported format line {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not re.fullmatch(r"\d+", parts[2]):
                raise PlyError(f"{path}: malformed element line {line!r}")
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PlyError(f"{path}: property {line!r} before any element")
            name = elements[-1][0]
            if len(parts) != 3 or parts[1] == "list":
                raise PlyError(f"{path}: element '{name}' has unsupported property layout {line!r}")
            if parts[1] not in _PLY_TYPES:
                raise PlyError(f"{path}: element '{name}' property '{parts[2]}' has unknown type {parts[1]!r}")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise PlyError(f"{path}: unrecognized header line {line!r}")
    if fmt is None:
        raise PlyError(f"{path}: header has no format line")
    return fmt, elements


def read_ply(path: str | Path) -> PointCloud:
    """Read vertex positions (and colors when present) from ascii or binary PLY."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh, path)
        body = fh.read()
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise PlyError(f"{path}: no 'vertex' element")
    vprops = dict(elements[names.index("vertex")][2])
    for axis in "xyz":
        if axis not in vprops:
            raise PlyError(f"{path}: element 'vertex' lacks property '{axis}'")
    has_color = all(c in vprops for c in ("red", "green", "blue"))

    if fmt == "binary_little_endian":
        offset = 0
        data = None
        for name, count, props in elements:
            dt = np.dtype([(p, "<" + t) for p, t in props])
            need = dt.itemsize * count
            if offset + need > len(body):
                raise PlyError(f"{path}: element '{name}' truncated ({len(body) - offset} of {need} bytes)")
            if name == "vertex":
                data = np.frombuffer(body, dtype=dt, count=count, offset=offset)
            offset += need
    else:
        lines = body.decode("ascii", errors="replace").splitlines()
        lines = [ln for ln in lines if ln.strip()]
        pos = 0
        data = None
        for name, count, props in elements:
            chunk = lines[pos : pos + count]
            if len(chunk) < count:
                raise PlyError(f"{path}: element '{name}' truncated ({len(chunk)} of {count} rows)")
            if name == "vertex":
                dt = np.dtype([(p, t) for p, t in props])
                data = np.empty(count, dtype=dt)
                for i, ln in enumerate(chunk):
                    vals = ln.split()
                    if len(vals) != len(props):
                        raise PlyError(f"{path}: element '{name}' row {i} has {len(vals)} values, expected {len(props)}")
                    try:
                        data[i] = tuple(float(x) if t[0] == "f" else int(x) for x, (_, t) in zip(vals, props))
                    except ValueError as exc:
                        raise PlyError(f"{path}: element '{name}' row {i}: {exc}") from exc
            pos += count

    pts = np.stack([data[a].astype(np.float64) for a in "xyz"], axis=1) if len(data) else np.zeros((0, 3))
    colors = None
    if has_color:
        colors = np.stack([data[c] for c in ("red", "green", "blue")], axis=1).astype(np.uint8)
    return PointCloud(pts, colors)
