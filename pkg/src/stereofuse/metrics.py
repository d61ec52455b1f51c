"""Evaluation: depth-map errors, Chamfer cloud metrics, sim3 alignment and ATE.

Statistics over an empty set are reported as undefined (``defined=False``
with NaN values) rather than zero.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .core import ConfigurationError, Trajectory, valid_depth

DEFAULT_THRESHOLD = 0.1
DEFAULT_TIME_TOLERANCE = 0.02


class DegenerateInputError(ValueError):
    """Correspondences do not determine a unique similarity transform."""


class AssociationError(ValueError):
    """No timestamps could be paired between two trajectories."""


@dataclass(frozen=True)
class DepthErrorStats:
    mean: float
    median: float
    count: int

    @property
    def defined(self) -> bool:
        return self.count > 0


def depth_abs_error(pred: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, DepthErrorStats]:
    """Absolute error on pixels valid in both maps (NaN elsewhere)."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ConfigurationError(f"depth maps differ in shape: {pred.shape} vs {ref.shape}")
    both = valid_depth(pred) & valid_depth(ref)
    err = np.full(pred.shape, np.nan)
    err[both] = np.abs(pred[both] - ref[both])
    vals = err[both]
    if vals.size == 0:
        return err, DepthErrorStats(math.nan, math.nan, 0)
    return err, DepthErrorStats(float(vals.mean()), float(np.median(vals)), int(vals.size))


@dataclass(frozen=True)
class DatasetDepthStats:
    mae: float
    median_of_medians: float
    maps: int
    pixels: int

    @property
    def defined(self) -> bool:
        return self.maps > 0


def dataset_depth_stats(stats: list[DepthErrorStats]) -> DatasetDepthStats:
    """Pixel-weighted MAE and median of per-map medians; undefined maps are skipped."""
    used = [s for s in stats if s.defined]
    if not used:
        return DatasetDepthStats(math.nan, math.nan, 0, 0)
    counts = np.array([s.count for s in used], dtype=np.float64)
    means = np.array([s.mean for s in used])
    return DatasetDepthStats(
        float((means * counts).sum() / counts.sum()),
        float(np.median([s.median for s in used])),
        len(used),
        int(counts.sum()),
    )


@dataclass(frozen=True)
class CloudMetrics:
    accuracy: float
    completeness: float
    precision: float
    recall: float
    threshold: float
    defined: bool = True


def nearest_distances(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Euclidean distance from each query point to its nearest reference point."""
    dist, _ = cKDTree(reference).query(query, k=1)
    return dist


def _points(pc) -> np.ndarray:
    return pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64).reshape(-1, 3)


def _percent_below(dist: np.ndarray, threshold: float) -> float:
    # same formula as the curve so both agree bit for bit
    return float(100.0 * np.count_nonzero(dist < threshold) / len(dist))


def chamfer_metrics(source, target, threshold: float = DEFAULT_THRESHOLD) -> CloudMetrics:
    """Accuracy (source to target), completeness (target to source) and
    precision / recall in percent at ``threshold``."""
    src = _points(source)
    tgt = _points(target)
    if len(src) == 0 or len(tgt) == 0:
        return CloudMetrics(math.nan, math.nan, math.nan, math.nan, threshold, defined=False)
    d_st = nearest_distances(src, tgt)
    d_ts = nearest_distances(tgt, src)
    return CloudMetrics(
        float(d_st.mean()),
        float(d_ts.mean()),
        _percent_below(d_st, threshold),
        _percent_below(d_ts, threshold),
        threshold,
    )


@dataclass(frozen=True)
class CurveSample:
    threshold: float
    precision: float
    recall: float


def precision_recall_curve(source, target, thresholds) -> list[CurveSample]:
    th = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(th) <= 0):
        raise ConfigurationError("thresholds must be strictly increasing")
    src = _points(source)
    tgt = _points(target)
    if len(src) == 0 or len(tgt) == 0:
        return [CurveSample(float(t), math.nan, math.nan) for t in th]
    d_st = np.sort(nearest_distances(src, tgt))
    d_ts = np.sort(nearest_distances(tgt, src))
    # count of distances strictly below each threshold
    p = 100.0 * np.searchsorted(d_st, th, side="left") / len(d_st)
    r = 100.0 * np.searchsorted(d_ts, th, side="left") / len(d_ts)
    return [CurveSample(float(t), float(a), float(b)) for t, a, b in zip(th, p, r)]


@dataclass(frozen=True, eq=False)
class Sim3:
    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigurationError(f"sim3 scale must be positive, got {self.scale}")
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ConfigurationError("sim3 rotation is not proper orthonormal")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> Sim3:
        Rt = self.rotation.T
        return Sim3(1.0 / self.scale, Rt, -(Rt @ self.translation) / self.scale)


def umeyama_sim3(source: np.ndarray, target: np.ndarray) -> Sim3:
    """Least-squares ``s, R, t`` minimizing ``sum |y - (s R x + t)|^2``."""
    X = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if X.shape != Y.shape:
        raise ConfigurationError(f"point counts differ: {len(X)} vs {len(Y)}")
    n = len(X)
    if n < 3:
        raise DegenerateInputError(f"need at least 3 correspondences, got {n}")
    mx = X.mean(axis=0)
    my = Y.mean(axis=0)
    Xc = X - mx
    Yc = Y - my
    var_x = (Xc**2).sum() / n
    cov = Yc.T @ Xc / n
    U, D, Vt = np.linalg.svd(cov)
    scale_ref = max(D[0], var_x, 1e-300)
    # collinear or coincident points leave at least two singular values at zero
    if var_x <= 1e-24 or D[1] <= 1e-12 * scale_ref:
        raise DegenerateInputError("correspondences are collinear or coincident (rank-deficient covariance)")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_x)
    t = my - s * R @ mx
    return Sim3(s, R, t)


def associate(est: Trajectory, ref: Trajectory, tolerance: float = DEFAULT_TIME_TOLERANCE) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp pairs ``(est_index, ref_index)``, each ref used once."""
    pairs = []
    used = set()
    for i, t in enumerate(est.timestamps):
        j = ref.nearest(float(t), tolerance)
        if j is not None and j not in used:
            used.add(j)
            pairs.append((i, j))
    return pairs


@dataclass(frozen=True)
class AteResult:
    rmse: float
    pairs: int
    aligned: bool
    transform: Sim3 | None = None


def ate_rmse(
    est: Trajectory, ref: Trajectory, align: bool = True, tolerance: float = DEFAULT_TIME_TOLERANCE
) -> AteResult:
    """RMS distance between associated camera positions, optionally after sim3 alignment."""
    pairs = associate(est, ref, tolerance)
    if not pairs:
        raise AssociationError(f"no timestamps of the two trajectories lie within {tolerance} s")
    pe = est.positions()[[i for i, _ in pairs]]
    pr = ref.positions()[[j for _, j in pairs]]
    transform = None
    if align:
        transform = umeyama_sim3(pe, pr)
        pe = transform.apply(pe)
    err = np.linalg.norm(pe - pr, axis=1)
    return AteResult(float(np.sqrt(np.mean(err**2))), len(pairs), align, transform)


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return "undefined"
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    return value


def report_dict(obj) -> dict:
    """Flat dict for a stats dataclass; NaN becomes ``"undefined"``."""
    if isinstance(obj, AteResult):
        d = {"ate_rmse": obj.rmse, "pairs": obj.pairs, "aligned": obj.aligned}
        if obj.transform is not None:
            d["scale"] = obj.transform.scale
        return _jsonable(d)
    d = asdict(obj)
    if hasattr(obj, "defined"):
        d["defined"] = obj.defined
    return _jsonable(d)


def format_text(report: dict) -> str:
    """One ``key: value`` line per entry."""
    lines = []
    for k, v in report.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        lines.append(f"{k}: {v}")
    return "\n".join(lines) + "\n"


def write_json(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(_jsonable(report), indent=2) + "\n")


def write_curve_csv(curve: list[CurveSample], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall"])
        for s in curve:
            w.writerow([repr(s.threshold), repr(s.precision), repr(s.recall)])
