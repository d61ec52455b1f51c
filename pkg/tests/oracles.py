"""Independent reference implementations used as test oracles.

Each is written for clarity, not speed, and shares no code with the package.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from stereofuse import synth
from stereofuse.core import Pose


def sad_literal(L, R, d_max, r):
    """Window SAD as a plain sextuple loop (small images only)."""
    H, W = L.shape
    out = np.zeros((H, W, d_max), dtype=np.int64)
    for y in range(H):
        for x in range(W):
            for d in range(d_max):
                if x - d < 0:
                    out[y, x, d] = 255 * (2 * r + 1) ** 2
                    continue
                s = 0
                for v in range(max(0, y - r), min(H, y + r + 1)):
                    for u in range(max(0, x - r), min(W, x + r + 1)):
                        s += abs(int(L[v, u]) - int(R[v, max(u - d, 0)]))
                out[y, x, d] = s
    return out


def sad_shifted(L, R, d_max, r):
    """Window SAD by summing shifted absolute-difference images, one per window offset."""
    H, W = L.shape
    Li = L.astype(np.int64)
    Ri = R.astype(np.int64)
    out = np.zeros((H, W, d_max), dtype=np.int64)
    cols = np.arange(W)
    for d in range(d_max):
        diff = np.abs(Li - Ri[:, np.maximum(cols - d, 0)])
        pad = np.zeros((H + 2 * r, W + 2 * r), dtype=np.int64)
        pad[r : r + H, r : r + W] = diff
        acc = np.zeros((H, W), dtype=np.int64)
        for dy in range(2 * r + 1):
            for dx in range(2 * r + 1):
                acc += pad[dy : dy + H, dx : dx + W]
        acc[:, cols < d] = 255 * (2 * r + 1) ** 2
        out[:, :, d] = acc
    return out


def sgm_line(cost_line, p1, p2):
    """Path costs along one line, evaluating the recurrence term by term."""
    n, D = cost_line.shape
    Lr = np.zeros((n, D), dtype=np.int64)
    for d in range(D):
        Lr[0, d] = int(cost_line[0, d])
    for x in range(1, n):
        prev = [int(v) for v in Lr[x - 1]]
        mprev = min(prev)
        for d in range(D):
            options = [prev[d], mprev + p2]
            if d > 0:
                options.append(prev[d - 1] + p1)
            if d < D - 1:
                options.append(prev[d + 1] + p1)
            Lr[x, d] = int(cost_line[x, d]) + min(options) - mprev
    return Lr


def sgm_direction(cost, direction, p1, p2):
    """Directional path costs for a full volume built from :func:`sgm_line`."""
    H, W, D = cost.shape
    out = np.zeros((H, W, D), dtype=np.int64)
    if direction in ("left_right", "right_left"):
        for y in range(H):
            line = cost[y] if direction == "left_right" else cost[y, ::-1]
            res = sgm_line(line, p1, p2)
            out[y] = res if direction == "left_right" else res[::-1]
    else:
        for x in range(W):
            line = cost[:, x] if direction == "top_bottom" else cost[::-1, x]
            res = sgm_line(line, p1, p2)
            out[:, x] = res if direction == "top_bottom" else res[::-1]
    return out


def select_pixel(costs, x, floor=1):
    """(disparity, confidence) for one pixel's aggregated costs at column ``x``."""
    c = [int(v) for v in costs]
    top = min(len(c) - 1, x)
    if top == 0:
        return 0.0, 0.0
    admissible = c[: top + 1]
    best = min(admissible)
    bd = admissible.index(best)
    second = min(v for i, v in enumerate(admissible) if i != bd)
    delta = 0.0
    if 0 < bd < top:
        cm, c0, cp = admissible[bd - 1], best, admissible[bd + 1]
        den = cm - 2 * c0 + cp
        if den > 0:
            delta = max(-0.5, min(0.5, (cm - cp) / (2 * den)))
    pkrn = max(second / max(best, floor), 1.0)
    return bd + delta, 1.0 - 1.0 / pkrn


def fuse_pixel(cands, eps, views=(), c_thres=0.0):
    """Scalar fusion of one reference pixel seen by co-located cameras.

    ``cands`` lists ``(Z, C)`` candidates; ``views`` lists the ``(Z_o, C_o)``
    original measurements of the non-reference views at the same pixel.
    Returns ``(depth, confidence, per_candidate)`` where ``per_candidate``
    holds ``(blended depth, blended confidence, final confidence)``; a
    rejected pixel has depth 0.
    """
    # exact rational arithmetic so the oracle has no rounding of its own
    cands = [(Fraction(z), Fraction(c)) for z, c in cands]
    views = [(Fraction(z), Fraction(c)) for z, c in views]
    eps = Fraction(eps)
    per = []
    for zj, _ in cands:
        sup = [i for i, (zi, _) in enumerate(cands) if abs(zi - zj) < eps]
        csum = sum(cands[i][1] for i in sup)
        if csum > 0:
            zs = sum(cands[i][1] * cands[i][0] for i in sup) / csum
        else:
            zs = sum(cands[i][0] for i in sup) / len(sup)
        conflicts = [ci for i, (zi, ci) in enumerate(cands) if i not in sup and zi < zs - eps]
        conflicts += [co for zo, co in views if zo > 0 and zs < zo - eps]
        per.append((zs, csum, csum - sum(conflicts)))
    if not per:
        return 0.0, 0.0, per
    best = None
    for zs, _, c in per:
        if best is None or c > best[1] or (c == best[1] and zs < best[0]):
            best = (zs, c)
    per = [tuple(float(x) for x in p) for p in per]
    if best[1] < c_thres:
        return 0.0, 0.0, per
    return float(best[0]), float(max(best[1], 0)), per


def brute_nearest(a, b):
    """Distance from each point of ``a`` to its nearest point of ``b`` by exhaustive search."""
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    return d.min(axis=1)


def voxel_buckets(points, voxel):
    """Occupied voxels via a dict keyed on integer cell coordinates."""
    buckets = {}
    for p in points:
        key = tuple(int(math.floor(c / voxel)) for c in p)
        buckets.setdefault(key, []).append(p)
    return buckets


def plane_scene(disparity, rig=None, seed=0, trajectory=(Pose(),), **kw):
    rig = rig or synth.default_rig()
    depth = rig.focal_baseline / disparity
    return synth.SyntheticScene(
        synth.SurfaceSpec.plane(depth),
        rig,
        trajectory=trajectory,
        texture=synth.default_texture(rig, depth, seed=seed),
        **kw,
    )


def interior(shape, left_band, margin=4):
    """Pixels away from the image borders and from the ``left_band`` columns
    that have no correspondence in the right view."""
    H, W = shape
    m = np.zeros(shape, dtype=bool)
    m[margin : H - margin, int(math.ceil(left_band)) + margin : W - margin] = True
    return m


def noisy_plane_frames(seed, depth=2.0, confidence=0.4, n=3, step=0.05, rig=None):
    """Fusion inputs over a fronto-parallel plane: sigma 0.05 m noise plus 10% outliers."""
    from stereofuse.fusion import DepthFrame

    rig = rig or synth.default_rig()
    scene = synth.SyntheticScene(
        synth.SurfaceSpec.plane(depth),
        rig,
        trajectory=synth.lateral_trajectory(n, step),
        noise=synth.NoiseSpec(
            sigma=0.05, outlier_fraction=0.1, outlier_range=(1.0, 4.0), confidence=confidence, seed=seed
        ),
    )
    frames = synth.render_sequence(scene, with_images=False)
    return rig, [DepthFrame(f.depth, f.confidence, f.pose, f.frame_id) for f in frames]
