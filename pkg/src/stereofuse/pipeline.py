"""Streaming pipeline: dataset ingestion, concurrent stereo and fusion stages,
outputs, timing, configuration and the command-line interface.

Configuration file (all keys optional, command-line flags take precedence)::

    [stereo]
    d_max = 100
    window_radius = 1
    p1 = 10
    p2 = 120
    lr_threshold = 1.0

    [fusion]
    window_size = 3
    epsilon = 0.04
    c_thres = 0.5

    [pipeline]
    dataset = data/seq01
    out_dir = out
    threads = 8
    keyframes = keyframes.txt
    merged_cloud_voxel = 0.01
    time_tolerance = 0.02

Relative paths in the file resolve against the file's directory.

Dataset layout::

    left/<stem>.png  right/<stem>.png   stem = timestamp in nanoseconds
    calib.txt                           see :func:`stereofuse.core.read_calibration`
    poses.txt                           TUM trajectory
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import queue
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import __version__, synth
from .cloud import PointCloud, VoxelGrid, depth_to_points, merge, read_ply, write_ply
from .core import (
    Calibration,
    ConfigurationError,
    FormatError,
    Pose,
    numeric_stem,
    read_calibration,
    read_depth_png16,
    read_image,
    read_pfm,
    read_trajectory,
    rectify,
    to_gray,
    write_depth_png16,
    write_pfm,
)
from .fusion import DepthFrame, FusionParams, FusionWindow, fuse_window
from .metrics import (
    ate_rmse,
    chamfer_metrics,
    dataset_depth_stats,
    depth_abs_error,
    format_text,
    precision_recall_curve,
    report_dict,
    write_curve_csv,
    write_json,
)
from .stereo import SgmParams, StereoConfig, StereoMatcher, set_threads

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# configuration


_STEREO_KEYS = {"d_max": int, "window_radius": int, "p1": int, "p2": int, "lr_threshold": float}
_FUSION_KEYS = {"window_size": int, "epsilon": float, "c_thres": float}
_PIPELINE_KEYS = {
    "dataset": Path,
    "calib": Path,
    "poses": Path,
    "out_dir": Path,
    "threads": int,
    "keyframes": Path,
    "merged_cloud_voxel": float,
    "time_tolerance": float,
}


@dataclass(frozen=True)
class PipelineConfig:
    dataset: Path
    out_dir: Path = Path("out")
    calib: Path | None = None
    poses: Path | None = None
    stereo: StereoConfig = field(default_factory=StereoConfig)
    fusion: FusionParams = field(default_factory=FusionParams)
    threads: int | None = None
    keyframes: Path | None = None
    # 0 keeps every point of the merged cloud; None skips it
    merged_cloud_voxel: float | None = 0.01
    time_tolerance: float = 0.02
    write_depth: bool = True
    write_clouds: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dataset", Path(self.dataset))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        if self.calib is None:
            object.__setattr__(self, "calib", self.dataset / "calib.txt")
        if self.poses is None:
            object.__setattr__(self, "poses", self.dataset / "poses.txt")
        if self.threads is not None and self.threads < 1:
            raise ConfigurationError(f"threads must be positive, got {self.threads}")
        if self.merged_cloud_voxel is not None and self.merged_cloud_voxel < 0:
            raise ConfigurationError("merged_cloud_voxel must be non-negative")
        if not self.time_tolerance >= 0:
            raise ConfigurationError("time_tolerance must be non-negative")

    @property
    def window_size(self) -> int:
        return self.fusion.window_size

    def validate_paths(self) -> None:
        """Raise if any referenced input is missing."""
        for label, p in (("dataset", self.dataset), ("calibration", self.calib), ("poses", self.poses)):
            if not Path(p).exists():
                raise ConfigurationError(f"{label} path does not exist: {p}")
        for sub in ("left", "right"):
            if not (self.dataset / sub).is_dir():
                raise ConfigurationError(f"dataset has no '{sub}/' directory: {self.dataset / sub}")
        if self.keyframes is not None and not Path(self.keyframes).exists():
            raise ConfigurationError(f"keyframe list does not exist: {self.keyframes}")


def _convert(section: str, key: str, raw: str, kind, base: Path):
    try:
        if kind is Path:
            p = Path(raw)
            return p if p.is_absolute() else base / p
        return kind(raw)
    except ValueError as exc:
        raise ConfigurationError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def read_config_file(path: str | Path) -> dict[str, dict]:
    """Parse a config file into ``{"stereo": {...}, "fusion": {...}, "pipeline": {...}}``."""
    path = Path(path)
    parser = configparser.ConfigParser()
    try:
        if not parser.read(path):
            raise ConfigurationError(f"cannot read config file {path}")
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    known = {"stereo": _STEREO_KEYS, "fusion": _FUSION_KEYS, "pipeline": _PIPELINE_KEYS}
    out: dict[str, dict] = {k: {} for k in known}
    for section in parser.sections():
        if section not in known:
            raise ConfigurationError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in known[section]:
                raise ConfigurationError(f"{path}: unknown key '{key}' in [{section}]")
            out[section][key] = _convert(section, key, raw, known[section][key], path.parent)
    return out


def build_config(values: dict[str, dict]) -> PipelineConfig:
    """Assemble a :class:`PipelineConfig` from section dicts (missing keys use defaults)."""
    st = dict(values.get("stereo", {}))
    fu = dict(values.get("fusion", {}))
    pl = dict(values.get("pipeline", {}))
    sgm_defaults = SgmParams()
    sgm = SgmParams(st.pop("p1", sgm_defaults.p1), st.pop("p2", sgm_defaults.p2))
    stereo = StereoConfig(sgm=sgm, **st)
    fusion = FusionParams(**fu)
    if "dataset" not in pl:
        raise ConfigurationError("no dataset given (config [pipeline] dataset or command line)")
    return PipelineConfig(stereo=stereo, fusion=fusion, **pl)


def merge_overrides(base: dict[str, dict], overrides: dict[str, dict]) -> dict[str, dict]:
    """Section-wise update; ``None`` override values are ignored."""
    out = {k: dict(v) for k, v in base.items()}
    for section, vals in overrides.items():
        for k, v in vals.items():
            if v is not None:
                out.setdefault(section, {})[k] = v
    return out


# --------------------------------------------------------------------------
# dataset ingestion


@dataclass(frozen=True)
class DatasetEntry:
    stem: int
    timestamp: float
    left: Path
    right: Path
    pose: Pose
    pose_dt: float


@dataclass
class StereoFrame:
    frame_id: int
    timestamp: float
    left: np.ndarray
    right: np.ndarray
    pose: Pose


@dataclass
class Dataset:
    """Timestamp-ordered frames with associated poses; images load lazily."""

    calibration: Calibration
    entries: list[DatasetEntry]
    skipped: int = 0

    def __len__(self):
        return len(self.entries)

    def load(self, index: int) -> StereoFrame:
        e = self.entries[index]
        left = read_image(e.left)
        right = read_image(e.right)
        cal = self.calibration
        if cal.rectify_left is not None:
            left, _ = rectify(left, cal.rectify_left)
        if cal.rectify_right is not None:
            right, _ = rectify(right, cal.rectify_right)
        return StereoFrame(index, e.timestamp, left, right, e.pose)

    def __iter__(self) -> Iterator[StereoFrame]:
        for i in range(len(self.entries)):
            yield self.load(i)


def _image_stems(folder: Path) -> dict[int, Path]:
    stems = {}
    for p in folder.iterdir():
        if p.suffix.lower() not in (".png", ".jpg", ".jpeg", ".pgm", ".ppm", ".bmp", ".tif", ".tiff"):
            continue
        s = numeric_stem(p)
        if s is None:
            raise FormatError(f"{p}: image names must be numeric timestamps")
        if s in stems:
            raise FormatError(f"{folder}: duplicate timestamp {s}")
        stems[s] = p
    return stems


def read_keyframes(path: str | Path) -> set[int]:
    """Keyframe stems (one integer per line, '#' comments allowed)."""
    ids = set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        try:
            ids.add(int(s))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: expected an integer keyframe id, got {s!r}") from exc
    return ids


def load_dataset(cfg: PipelineConfig) -> Dataset:
    """Pair left/right images by stem, order by time and attach the nearest pose.

    Frames without a pose within ``cfg.time_tolerance`` seconds are skipped
    and counted.
    """
    cfg.validate_paths()
    calib = read_calibration(cfg.calib)
    traj = read_trajectory(cfg.poses)
    left = _image_stems(cfg.dataset / "left")
    right = _image_stems(cfg.dataset / "right")
    if len(left) != len(right) or set(left) != set(right):
        raise ConfigurationError(
            f"left/right image sets differ: {len(left)} left, {len(right)} right, "
            f"{len(set(left) ^ set(right))} unpaired"
        )
    stems = sorted(left)
    if cfg.keyframes is not None:
        keep = read_keyframes(cfg.keyframes)
        stems = [s for s in stems if s in keep]
    entries = []
    skipped = 0
    for s in stems:
        t = s * 1e-9
        j = traj.nearest(t, cfg.time_tolerance)
        if j is None:
            skipped += 1
            continue
        entries.append(DatasetEntry(s, t, left[s], right[s], traj.poses[j], abs(traj.timestamps[j] - t)))
    if skipped:
        logger.warning("skipped %d of %d frames without a pose within %.3f s", skipped, len(stems), cfg.time_tolerance)
    if entries:
        dts = np.array([e.pose_dt for e in entries])
        logger.info(
            "associated %d frames with poses (mean |dt| %.4f s, max %.4f s)", len(entries), dts.mean(), dts.max()
        )
    return Dataset(calib, entries, skipped)


# --------------------------------------------------------------------------
# running


class PipelineError(RuntimeError):
    def __init__(self, frame_id: int, stage: str, cause: BaseException):
        super().__init__(f"{stage} failed on frame {frame_id}: {cause}")
        self.frame_id = frame_id
        self.stage = stage
        self.cause = cause


@dataclass
class TimingReport:
    """Per-frame stage times in milliseconds."""

    load_ms: list[float] = field(default_factory=list)
    stereo_ms: list[float] = field(default_factory=list)
    fusion_ms: list[float] = field(default_factory=list)
    output_ms: list[float] = field(default_factory=list)
    wall_s: float = 0.0
    pipelined: bool = True

    @property
    def frames_in(self) -> int:
        return len(self.stereo_ms)

    @property
    def frames_fused(self) -> int:
        return len(self.fusion_ms)

    @property
    def stage_sum_s(self) -> float:
        return (sum(self.load_ms) + sum(self.stereo_ms) + sum(self.fusion_ms) + sum(self.output_ms)) / 1000.0

    @property
    def throughput_fps(self) -> float:
        return self.frames_in / self.wall_s if self.wall_s > 0 else 0.0

    def to_dict(self) -> dict:
        def mean(x):
            return float(np.mean(x)) if x else None

        return {
            "frames_in": self.frames_in,
            "frames_fused": self.frames_fused,
            "pipelined": self.pipelined,
            "stereo_ms_per_frame": mean(self.stereo_ms),
            "fusion_ms_per_frame": mean(self.fusion_ms),
            "load_ms_per_frame": mean(self.load_ms),
            "output_ms_per_frame": mean(self.output_ms),
            "stereo_ms_total": sum(self.stereo_ms),
            "fusion_ms_total": sum(self.fusion_ms),
            "load_ms_total": sum(self.load_ms),
            "output_ms_total": sum(self.output_ms),
            "stage_sum_s": self.stage_sum_s,
            "wall_s": self.wall_s,
            "total_minutes": self.wall_s / 60.0,
            "throughput_fps": self.throughput_fps,
            "stereo_ms": self.stereo_ms,
            "fusion_ms": self.fusion_ms,
        }

    def table(self) -> str:
        """Summary in the layout of a per-dataset timing table."""
        d = self.to_dict()

        def f(x):
            return "-" if x is None else f"{x:.2f}"

        head = f"{'Frames':>8} {'Fused':>8} {'Stereo (ms/frame)':>18} {'Fusion (ms/frame)':>18} {'Total (min)':>12} {'FPS':>8}"
        row = (
            f"{d['frames_in']:>8} {d['frames_fused']:>8} {f(d['stereo_ms_per_frame']):>18} "
            f"{f(d['fusion_ms_per_frame']):>18} {d['total_minutes']:>12.3f} {d['throughput_fps']:>8.2f}"
        )
        return head + "\n" + row + "\n"


@dataclass
class PipelineResult:
    fused_ids: list[int]
    timing: TimingReport
    out_dir: Path
    merged_cloud: Path | None
    skipped: int
    first_fused_after: int | None


_END = object()


@dataclass
class _Failure:
    frame_id: int
    stage: str
    error: BaseException


def _stereo_stage(dataset: Dataset, cfg: PipelineConfig, timing: TimingReport) -> Iterator[DepthFrame]:
    matcher = StereoMatcher(cfg.stereo, dataset.calibration.rig)
    for i in range(len(dataset)):
        stage = "load"
        try:
            t0 = time.perf_counter()
            fr = dataset.load(i)
            t1 = time.perf_counter()
            stage = "stereo"
            depth, conf = matcher.match(to_gray(fr.left), to_gray(fr.right))
            t2 = time.perf_counter()
        except Exception as exc:
            raise PipelineError(i, stage, exc) from exc
        timing.load_ms.append((t1 - t0) * 1e3)
        timing.stereo_ms.append((t2 - t1) * 1e3)
        yield DepthFrame(depth, conf, fr.pose, fr.frame_id, fr.timestamp, fr.left)


class _FusionStage:
    def __init__(self, dataset: Dataset, cfg: PipelineConfig, timing: TimingReport, on_fused):
        self.cfg = cfg
        self.intr = dataset.calibration.rig.intrinsics
        self.timing = timing
        self.on_fused = on_fused
        self.window = FusionWindow(cfg.window_size)
        self.fused_ids: list[int] = []
        self.consumed = 0
        self.first_fused_after = None
        self.grid = None
        self.merged_points = PointCloud(colors=np.zeros((0, 3), np.uint8))
        if cfg.merged_cloud_voxel:
            self.grid = VoxelGrid(cfg.merged_cloud_voxel)
        (cfg.out_dir / "depth").mkdir(parents=True, exist_ok=True)
        (cfg.out_dir / "clouds").mkdir(parents=True, exist_ok=True)

    def push(self, frame: DepthFrame) -> None:
        self.consumed += 1
        if not self.window.push(frame):
            return
        ref = self.window.reference
        try:
            t0 = time.perf_counter()
            fused = fuse_window(self.window, self.intr, self.cfg.fusion)
            t1 = time.perf_counter()
        except Exception as exc:
            raise PipelineError(ref.frame_id, "fusion", exc) from exc
        try:
            self._write(fused)
        except Exception as exc:
            raise PipelineError(ref.frame_id, "output", exc) from exc
        t2 = time.perf_counter()
        self.timing.fusion_ms.append((t1 - t0) * 1e3)
        self.timing.output_ms.append((t2 - t1) * 1e3)
        if self.first_fused_after is None:
            self.first_fused_after = self.consumed
        self.fused_ids.append(fused.frame_id)
        if self.on_fused is not None:
            self.on_fused(fused)

    def _write(self, fused: DepthFrame) -> None:
        cfg = self.cfg
        k = fused.frame_id
        if cfg.write_depth:
            write_pfm(cfg.out_dir / "depth" / f"depth_{k:06d}.pfm", fused.depth)
            write_pfm(cfg.out_dir / "depth" / f"conf_{k:06d}.pfm", fused.confidence)
            write_depth_png16(cfg.out_dir / "depth" / f"depth_{k:06d}.png", fused.depth)
        need_cloud = cfg.write_clouds or cfg.merged_cloud_voxel is not None
        if not need_cloud:
            return
        pc = depth_to_points(fused, fused.image, self.intr)
        if cfg.write_clouds:
            write_ply(pc, cfg.out_dir / "clouds" / f"cloud_{k:06d}.ply")
        if self.grid is not None:
            self.grid.add(pc)
        elif cfg.merged_cloud_voxel == 0:
            self.merged_points = merge(self.merged_points, PointCloud(pc.points, pc.colors))

    def finish(self) -> Path | None:
        if self.cfg.merged_cloud_voxel is None:
            return None
        path = self.cfg.out_dir / "cloud_full.ply"
        write_ply(self.grid.cloud() if self.grid is not None else self.merged_points, path)
        return path


def run_pipeline(
    cfg: PipelineConfig,
    sequential: bool = False,
    on_fused: Callable[[DepthFrame], None] | None = None,
    dataset: Dataset | None = None,
) -> PipelineResult:
    """Stereo and fusion as two threads joined by a bounded queue.

    The queue holds at most ``window_size`` depth frames; a full queue blocks
    the stereo stage.  ``sequential=True`` runs both stages in the calling
    thread and produces identical outputs.
    """
    dataset = dataset or load_dataset(cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    timing = TimingReport(pipelined=not sequential)
    if cfg.threads is not None:
        set_threads(cfg.threads)
    fusion = _FusionStage(dataset, cfg, timing, on_fused)
    start = time.perf_counter()

    if sequential:
        for frame in _stereo_stage(dataset, cfg, timing):
            fusion.push(frame)
    else:
        q: queue.Queue = queue.Queue(maxsize=cfg.window_size)
        stop = threading.Event()

        def put(item) -> bool:
            while not stop.is_set():
                try:
                    q.put(item, timeout=0.1)
                    return True
                except queue.Full:
                    continue
            return False

        def producer():
            if cfg.threads is not None:
                set_threads(cfg.threads)
            try:
                for frame in _stereo_stage(dataset, cfg, timing):
                    if not put(frame):
                        return
            except PipelineError as exc:
                put(_Failure(exc.frame_id, exc.stage, exc.cause))
                return
            except BaseException as exc:  # noqa: BLE001 - forwarded to the consumer
                put(_Failure(-1, "stereo", exc))
                return
            put(_END)

        worker = threading.Thread(target=producer, name="stereo-stage", daemon=True)
        worker.start()
        try:
            while True:
                item = q.get()
                if item is _END:
                    break
                if isinstance(item, _Failure):
                    raise PipelineError(item.frame_id, item.stage, item.error) from item.error
                fusion.push(item)
        finally:
            stop.set()
            worker.join()

    merged = fusion.finish()
    timing.wall_s = time.perf_counter() - start
    (cfg.out_dir / "timing.json").write_text(json.dumps(timing.to_dict(), indent=2) + "\n")
    (cfg.out_dir / "timing.txt").write_text(timing.table())
    return PipelineResult(fusion.fused_ids, timing, cfg.out_dir, merged, dataset.skipped, fusion.first_fused_after)


# --------------------------------------------------------------------------
# command line


def _read_depth(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".pfm":
        return read_pfm(path).astype(np.float64)
    if path.suffix.lower() == ".png":
        return read_depth_png16(path)
    raise FormatError(f"{path}: depth maps must be .pfm or 16-bit .png")


def _write_depth(path: Path, depth: np.ndarray) -> None:
    if path.suffix.lower() == ".png":
        write_depth_png16(path, depth)
    else:
        write_pfm(path, depth)


def _emit(report: dict, json_path: str | None) -> None:
    sys.stdout.write(format_text(report))
    if json_path:
        write_json(report, json_path)


def _config_from_args(args) -> PipelineConfig:
    base = read_config_file(args.config) if args.config else {"stereo": {}, "fusion": {}, "pipeline": {}}
    overrides = {
        "stereo": {"d_max": args.d_max},
        "fusion": {"window_size": args.window, "epsilon": args.epsilon, "c_thres": args.c_thres},
        "pipeline": {
            "dataset": Path(args.dataset) if args.dataset else None,
            "out_dir": Path(args.out_dir) if args.out_dir else None,
            "threads": args.threads,
            "keyframes": Path(args.keyframes) if args.keyframes else None,
            "merged_cloud_voxel": args.merged_cloud_voxel,
        },
    }
    return build_config(merge_overrides(base, overrides))


def _cmd_run(args) -> int:
    cfg = _config_from_args(args)
    result = run_pipeline(cfg, sequential=args.sequential)
    sys.stdout.write(result.timing.table())
    print(f"fused {len(result.fused_ids)} frames into {result.out_dir} (skipped {result.skipped} without pose)")
    return 0


def _cmd_depth(args) -> int:
    cal = read_calibration(args.calib)
    base = read_config_file(args.config) if args.config else {}
    st = dict(base.get("stereo", {}))
    if args.d_max is not None:
        st["d_max"] = args.d_max
    sgm = SgmParams(st.pop("p1", SgmParams().p1), st.pop("p2", SgmParams().p2))
    scfg = StereoConfig(sgm=sgm, **st)
    if args.threads:
        set_threads(args.threads)
    left = read_image(args.left)
    right = read_image(args.right)
    if cal.rectify_left is not None:
        left, _ = rectify(left, cal.rectify_left)
    if cal.rectify_right is not None:
        right, _ = rectify(right, cal.rectify_right)
    t0 = time.perf_counter()
    depth, conf = StereoMatcher(scfg, cal.rig).match(to_gray(left), to_gray(right))
    ms = (time.perf_counter() - t0) * 1e3
    _write_depth(Path(args.out), depth)
    if args.conf:
        write_pfm(args.conf, conf)
    print(f"wrote {args.out} ({np.count_nonzero(depth > 0)} valid pixels, {ms:.1f} ms)")
    return 0


def _cmd_synth(args) -> int:
    rig = synth.default_rig(args.width, args.height, args.fx, args.baseline)
    if args.surface == "plane":
        surface = synth.SurfaceSpec.plane(args.depth)
    elif args.surface == "ramp":
        surface = synth.SurfaceSpec.ramp(args.d_near, args.d_far, rig)
    else:
        surface = synth.SurfaceSpec.step(args.depth * 0.6, args.depth)
    scene = synth.SyntheticScene(
        surface,
        rig,
        trajectory=synth.lateral_trajectory(args.frames, args.step),
        texture=synth.default_texture(rig, args.depth, seed=args.seed),
        d_max=args.d_max or 100,
        fps=args.fps,
    )
    frames = synth.render_sequence(scene)
    out = synth.write_dataset(scene, frames, args.out_dir)
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def _pair_depth_files(pred: Path, ref: Path) -> list[tuple[Path, Path]]:
    if pred.is_file() and ref.is_file():
        return [(pred, ref)]
    if pred.is_dir() and ref.is_dir():

        def index(d):
            return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in (".pfm", ".png")}

        a, b = index(pred), index(ref)
        common = sorted(set(a) & set(b))
        if not common:
            raise ConfigurationError(f"no depth maps with matching names in {pred} and {ref}")
        return [(a[k], b[k]) for k in common]
    raise ConfigurationError("--pred and --ref must both be files or both be directories")


def _cmd_eval_depth(args) -> int:
    stats = []
    for p, r in _pair_depth_files(Path(args.pred), Path(args.ref)):
        _, s = depth_abs_error(_read_depth(p), _read_depth(r))
        stats.append(s)
    report = report_dict(stats[0]) if len(stats) == 1 else report_dict(dataset_depth_stats(stats))
    _emit(report, args.json)
    return 0


def _cmd_eval_cloud(args) -> int:
    source = read_ply(args.source)
    target = read_ply(args.target)
    aligned = False
    if args.align_est and args.align_ref:
        res = ate_rmse(read_trajectory(args.align_est), read_trajectory(args.align_ref), align=True)
        source = PointCloud(res.transform.apply(source.points), source.colors)
        aligned = True
    m = chamfer_metrics(source, target, args.threshold)
    report = report_dict(m)
    report["source_points"] = len(source)
    report["target_points"] = len(target)
    report["sim3_prealigned"] = aligned
    if args.curve:
        th = np.linspace(args.threshold / 10, args.threshold * 2, 20) if not args.thresholds else [
            float(x) for x in args.thresholds.split(",")
        ]
        write_curve_csv(precision_recall_curve(source, target, th), args.curve)
    _emit(report, args.json)
    return 0


def _cmd_eval_traj(args) -> int:
    res = ate_rmse(read_trajectory(args.est), read_trajectory(args.ref), align=not args.no_align, tolerance=args.tolerance)
    _emit(report_dict(res), args.json)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stereofuse", description="Stereo depth, depth-map fusion and evaluation.")
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run stereo and fusion over a dataset")
    r.add_argument("dataset", nargs="?", help="dataset directory (or [pipeline] dataset in --config)")
    r.add_argument("--config")
    r.add_argument("--out-dir")
    r.add_argument("--threads", type=int)
    r.add_argument("--window", type=int)
    r.add_argument("--epsilon", type=float)
    r.add_argument("--c-thres", type=float)
    r.add_argument("--d-max", type=int)
    r.add_argument("--keyframes")
    r.add_argument("--merged-cloud-voxel", type=float)
    r.add_argument("--sequential", action="store_true", help="run both stages in one thread")
    r.set_defaults(func=_cmd_run)

    d = sub.add_parser("depth", parents=[common], help="depth map for one rectified stereo pair")
    d.add_argument("--left", required=True)
    d.add_argument("--right", required=True)
    d.add_argument("--calib", required=True)
    d.add_argument("--out", required=True, help="output .pfm (or .png for 16-bit millimetres)")
    d.add_argument("--conf", help="optional confidence .pfm")
    d.add_argument("--config")
    d.add_argument("--d-max", type=int)
    d.add_argument("--threads", type=int)
    d.set_defaults(func=_cmd_depth)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--surface", choices=("plane", "ramp", "step"), default="plane")
    s.add_argument("--width", type=int, default=320)
    s.add_argument("--height", type=int, default=240)
    s.add_argument("--fx", type=float, default=300.0)
    s.add_argument("--baseline", type=float, default=0.1)
    s.add_argument("--depth", type=float, default=2.0, help="plane depth (m)")
    s.add_argument("--d-near", type=float, default=10.0, help="ramp disparity at column 0")
    s.add_argument("--d-far", type=float, default=40.0, help="ramp disparity at the last column")
    s.add_argument("--step", type=float, default=0.02, help="camera motion per frame (m)")
    s.add_argument("--fps", type=float, default=15.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--d-max", type=int)
    s.set_defaults(func=_cmd_synth)

    e = sub.add_parser("eval-depth", parents=[common], help="absolute depth error between maps or folders of maps")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--json")
    e.set_defaults(func=_cmd_eval_depth)

    c = sub.add_parser("eval-cloud", parents=[common], help="Chamfer accuracy, completeness, precision and recall")
    c.add_argument("--source", required=True)
    c.add_argument("--target", required=True)
    c.add_argument("--threshold", type=float, default=0.1)
    c.add_argument("--curve", help="write a precision/recall CSV here")
    c.add_argument("--thresholds", help="comma-separated thresholds for --curve")
    c.add_argument("--align-est", help="trajectory of the source cloud, for sim3 pre-alignment")
    c.add_argument("--align-ref", help="reference trajectory, for sim3 pre-alignment")
    c.add_argument("--json")
    c.set_defaults(func=_cmd_eval_cloud)

    t = sub.add_parser("eval-traj", parents=[common], help="absolute trajectory error")
    t.add_argument("--est", required=True)
    t.add_argument("--ref", required=True)
    t.add_argument("--no-align", action="store_true")
    t.add_argument("--tolerance", type=float, default=0.02)
    t.add_argument("--json")
    t.set_defaults(func=_cmd_eval_traj)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except (ConfigurationError, FormatError, PipelineError, OSError, ValueError) as exc:
        print(f"stereofuse {args.command}: error: {exc}", file=sys.stderr)
        return 1
