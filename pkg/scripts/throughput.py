"""Per-frame stereo and fusion timing on synthetic 800x600 frames.

Renders a textured slanted plane seen by a slowly moving rig, then times
stereo matching (100 disparities, 3x3 SAD, 4-path SGM) and 3-frame fusion
for every frame after a warm-up period.  Rendering is not timed.

    python3 scripts/throughput.py --frames 50 --warmup 5 --json out.json
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import time

import numpy as np

from stereofuse import synth
from stereofuse.fusion import DepthFrame, FusionParams, FusionWindow, fuse_window
from stereofuse.stereo import StereoConfig, StereoMatcher, set_threads

log = logging.getLogger("throughput")


def make_scene(n: int, width: int = 800, height: int = 600, fx: float = 600.0) -> synth.SyntheticScene:
    rig = synth.default_rig(width, height, fx=fx)
    return synth.SyntheticScene(
        synth.SurfaceSpec.ramp(20.0, 60.0, rig),
        rig,
        trajectory=synth.lateral_trajectory(n, 0.01, wobble=0.005),
        texture=synth.default_texture(rig, rig.focal_baseline / 40.0),
    )


def _summary(ms: list[float]) -> dict:
    a = np.asarray(ms)
    return {"mean": float(a.mean()), "median": float(np.median(a)), "max": float(a.max()), "frames": len(a)}


def measure(
    frames: int = 50, warmup: int = 5, width: int = 800, height: int = 600, d_max: int = 100, threads: int | None = None
) -> dict:
    """Millisecond timings of the frames after ``warmup``."""
    if threads is not None:
        set_threads(threads)
    scene = make_scene(frames + warmup, width, height)
    matcher = StereoMatcher(StereoConfig(d_max=d_max, window_radius=1), scene.rig)
    params = FusionParams()
    window = FusionWindow(params.window_size)
    stereo_ms: list[float] = []
    fusion_ms: list[float] = []
    for i, pose in enumerate(scene.trajectory):
        pair = synth.render_stereo_pair(scene, pose)
        t0 = time.perf_counter()
        depth, conf = matcher.match(pair.left, pair.right)
        t1 = time.perf_counter()
        fused = None
        if window.push(DepthFrame(depth, conf, pose, i)):
            t2 = time.perf_counter()
            fused = fuse_window(window, scene.intrinsics, params)
            t3 = time.perf_counter()
        if i >= warmup:
            stereo_ms.append((t1 - t0) * 1e3)
            if fused is not None:
                fusion_ms.append((t3 - t2) * 1e3)
        log.info("frame %d stereo %.0f ms%s", i, (t1 - t0) * 1e3, f" fusion {(t3 - t2) * 1e3:.0f} ms" if fused else "")
    # a full window is ready from the start of timing, so every timed frame fuses once
    return {
        "width": width,
        "height": height,
        "d_max": d_max,
        "cpus": len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count(),
        "stereo_ms": _summary(stereo_ms),
        "fusion_ms": _summary(fusion_ms),
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--width", type=int, default=800)
    p.add_argument("--height", type=int, default=600)
    p.add_argument("--d-max", type=int, default=100)
    p.add_argument("--threads", type=int)
    p.add_argument("--json")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    res = measure(args.frames, args.warmup, args.width, args.height, args.d_max, args.threads)
    print(f"{res['width']}x{res['height']}, {res['d_max']} disparities, {res['cpus']} CPU(s)")
    for stage in ("stereo", "fusion"):
        s = res[f"{stage}_ms"]
        print(
            f"{stage:>7}: mean {s['mean']:7.1f} ms  median {s['median']:7.1f} ms  max {s['max']:7.1f} ms  ({s['frames']} frames)"
        )
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(res, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
