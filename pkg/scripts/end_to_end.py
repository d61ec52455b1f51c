"""Synthetic sequence through the full pipeline, scored against the analytic surface.

Writes a 30-frame dataset (textured plane, laterally moving rig), runs
stereo and fusion through the on-disk ingestion path, and compares the
merged cloud with points sampled from the exact surface over the same views.

    python3 scripts/end_to_end.py --out-dir /tmp/e2e
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from stereofuse import synth
from stereofuse.cloud import PointCloud, VoxelGrid, depth_to_points, read_ply
from stereofuse.fusion import DepthFrame
from stereofuse.metrics import chamfer_metrics, report_dict
from stereofuse.pipeline import PipelineConfig, run_pipeline
from stereofuse.stereo import StereoConfig

VOXEL = 0.01
THRESHOLD = 0.05


def make_scene(frames: int = 30) -> synth.SyntheticScene:
    rig = synth.default_rig(320, 240, fx=300.0)
    depth = 2.0
    return synth.SyntheticScene(
        synth.SurfaceSpec.plane(depth),
        rig,
        trajectory=synth.lateral_trajectory(frames, 0.02, wobble=0.01),
        texture=synth.default_texture(rig, depth, seed=5),
    )


def write_dataset(scene: synth.SyntheticScene, path: str | Path) -> Path:
    return synth.write_dataset(scene, synth.render_sequence(scene), path)


def surface_samples(scene: synth.SyntheticScene, frame_ids, voxel: float = VOXEL) -> PointCloud:
    """Exact surface points seen by the given frames, voxel-thinned like the pipeline output."""
    grid = VoxelGrid(voxel)
    intr = scene.intrinsics
    for f in synth.render_sequence(scene, with_images=False):
        if f.frame_id in frame_ids:
            grid.add(depth_to_points(DepthFrame(f.gt_depth, np.ones(intr.shape), f.pose, f.frame_id), None, intr))
    return grid.cloud()


def config(dataset: Path, out_dir: Path, threads: int | None = None) -> PipelineConfig:
    return PipelineConfig(dataset, out_dir, stereo=StereoConfig(d_max=64), threads=threads, merged_cloud_voxel=VOXEL)


def evaluate(scene: synth.SyntheticScene, result) -> dict:
    cloud = read_ply(result.merged_cloud)
    gt = surface_samples(scene, set(result.fused_ids))
    m = chamfer_metrics(cloud, gt, THRESHOLD)
    rep = report_dict(m)
    rep.update(points=len(cloud), reference_points=len(gt), fused_frames=len(result.fused_ids))
    return rep


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--threads", type=int)
    p.add_argument("--sequential", action="store_true")
    args = p.parse_args(argv)
    out = Path(args.out_dir)
    scene = make_scene(args.frames)
    ds = write_dataset(scene, out / "dataset")
    result = run_pipeline(config(ds, out / "run", args.threads), sequential=args.sequential)
    rep = evaluate(scene, result)
    rep["timing"] = {k: v for k, v in result.timing.to_dict().items() if not isinstance(v, list)}
    print(result.timing.table(), end="")
    for k, v in rep.items():
        if k != "timing":
            print(f"{k}: {v}")
    (out / "end_to_end.json").write_text(json.dumps(rep, indent=2) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
