"""Visibility-based fusion of a sliding window of posed depth maps.

All frames of a window are rendered onto the middle (reference) view.  At
each reference pixel the candidates (own depth plus rendered depths) support
each other when closer than ``epsilon``; supporters are blended by a
confidence-weighted mean and their confidences summed.  Candidates are then
penalized for visibility conflicts:

* occlusion: a nearer rendered surface on the same reference ray,
* free-space violation: the candidate sits in front of what another view
  measured along that view's ray.

The candidate with the highest remaining confidence wins if it clears
``c_thres``.  Penalties only change confidences, never depths.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .core import INVALID_DEPTH, ConfigurationError, Intrinsics, Pose

logger = logging.getLogger(__name__)


class OrderingError(ValueError):
    """A frame was pushed whose id does not exceed every id in the window."""


@dataclass(frozen=True)
class FusionParams:
    epsilon: float = 0.04
    c_thres: float = 0.5
    window_size: int = 3

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
        if not self.c_thres >= 0:
            raise ConfigurationError(f"c_thres must be non-negative, got {self.c_thres}")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ConfigurationError(f"window size must be odd and positive, got {self.window_size}")


@dataclass(eq=False)
class DepthFrame:
    """Depth and confidence in the frame's own camera, plus its pose."""

    depth: np.ndarray
    confidence: np.ndarray
    pose: Pose
    frame_id: int
    timestamp: float = 0.0
    image: np.ndarray | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.depth.ndim != 2 or self.depth.shape != self.confidence.shape:
            raise ConfigurationError(
                f"depth {self.depth.shape} and confidence {self.confidence.shape} must be equal 2D shapes"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class FusionWindow:
    """Sliding buffer of the most recent ``size`` frames."""

    size: int = 3
    frames: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ConfigurationError(f"window size must be odd and positive, got {self.size}")
        self.frames = deque(self.frames, maxlen=self.size)

    def __len__(self):
        return len(self.frames)

    @property
    def full(self) -> bool:
        return len(self.frames) == self.size

    @property
    def reference(self) -> DepthFrame:
        if not self.full:
            raise ConfigurationError("window is not full")
        return self.frames[self.size // 2]

    @property
    def others(self) -> list[DepthFrame]:
        """Non-reference frames ordered by frame id."""
        ref = self.size // 2
        return [f for i, f in enumerate(self.frames) if i != ref]

    def push(self, frame: DepthFrame) -> bool:
        """Append ``frame``, evicting the oldest; True when a reference is ready."""
        if self.frames and frame.frame_id <= self.frames[-1].frame_id:
            raise OrderingError(f"frame id {frame.frame_id} does not follow {self.frames[-1].frame_id}")
        if self.frames and frame.shape != self.frames[-1].shape:
            raise ConfigurationError(f"frame {frame.frame_id} has shape {frame.shape}, window holds {self.frames[-1].shape}")
        self.frames.append(frame)
        return self.full


def window_push(window: FusionWindow, frame: DepthFrame) -> DepthFrame | None:
    """Push and return the reference frame when the window is ready."""
    return window.reference if window.push(frame) else None


@dataclass
class CandidateSet:
    """Per reference pixel, up to ``K`` candidates sorted by (depth, confidence).

    Slots beyond ``count`` are padding and must be ignored.
    """

    depth: np.ndarray  # (H, W, K) float64
    confidence: np.ndarray  # (H, W, K) float64
    frame_id: np.ndarray  # (H, W, K) int64
    count: np.ndarray  # (H, W) int64

    @classmethod
    def single(cls, depths, confidences, frame_ids=None) -> CandidateSet:
        """One-pixel set from explicit lists (sorted on construction)."""
        z = np.asarray(depths, dtype=np.float64).ravel()
        c = np.asarray(confidences, dtype=np.float64).ravel()
        f = np.arange(z.size) if frame_ids is None else np.asarray(frame_ids, dtype=np.int64).ravel()
        order = np.lexsort((c, z))
        k = max(z.size, 1)
        out = cls(
            np.zeros((1, 1, k)), np.zeros((1, 1, k)), np.zeros((1, 1, k), dtype=np.int64), np.array([[z.size]])
        )
        out.depth[0, 0, : z.size] = z[order]
        out.confidence[0, 0, : z.size] = c[order]
        out.frame_id[0, 0, : z.size] = f[order]
        return out


@dataclass
class BlendedCandidates:
    """Blended depth and confidence for every candidate slot."""

    candidates: CandidateSet
    depth: np.ndarray
    confidence: np.ndarray
    supporters: np.ndarray  # (H, W, K, K) bool; [.., j, i] = i supports j


@nb.njit(cache=True)
def _render_kernel(depth, conf, R, t, fx, fy, cx, cy, out_z, out_c):
    """Forward-splat one depth map into another camera with a nearest-depth z-buffer.

    Sequential on purpose: scan order fixes the winner on exact depth ties.
    """
    h, w = depth.shape
    ho, wo = out_z.shape
    for v in range(h):
        for u in range(w):
            z = depth[v, u]
            if not (z > 0.0) or not np.isfinite(z):
                continue
            x = (u - cx) * z / fx
            y = (v - cy) * z / fy
            X = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0]
            Y = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1]
            Z = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2]
            if not (Z > 0.0):
                continue
            pu = np.floor(fx * X / Z + cx + 0.5)
            pv = np.floor(fy * Y / Z + cy + 0.5)
            if pu < 0 or pv < 0 or pu >= wo or pv >= ho:
                continue
            iu = int(pu)
            iv = int(pv)
            cur = out_z[iv, iu]
            if cur <= 0.0 or Z < cur:
                out_z[iv, iu] = Z
                out_c[iv, iu] = conf[v, u]


def _relative(src: Pose, dst: Pose) -> tuple[np.ndarray, np.ndarray]:
    rel = dst.compose(src.inverse())
    return np.ascontiguousarray(rel.rotation), np.ascontiguousarray(rel.translation)


def render_to_reference(src: DepthFrame, ref_pose: Pose, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Depth and confidence of ``src`` seen from ``ref_pose``; empty pixels are 0."""
    if src.shape != intr.shape:
        raise ConfigurationError(f"frame {src.frame_id} is {src.shape}, intrinsics expect {intr.shape}")
    out_z = np.zeros(intr.shape)
    out_c = np.zeros(intr.shape)
    R, t = _relative(src.pose, ref_pose)
    _render_kernel(src.depth, src.confidence, R, t, intr.fx, intr.fy, intr.cx, intr.cy, out_z, out_c)
    return out_z, out_c


@nb.njit(cache=True)
def _insert_sorted(zs, cs, fs, n, z, c, f):
    """Insert into the first ``n`` slots keeping (depth, confidence) order.

    The order depends on values only, so which frame a value came from
    never changes the accumulation order.
    """
    i = n
    while i > 0 and (zs[i - 1] > z or (zs[i - 1] == z and cs[i - 1] > c)):
        zs[i] = zs[i - 1]
        cs[i] = cs[i - 1]
        fs[i] = fs[i - 1]
        i -= 1
    zs[i] = z
    cs[i] = c
    fs[i] = f


@nb.njit(parallel=True, cache=True)
def _collect_kernel(zmaps, cmaps, fids, out_z, out_c, out_f, count):
    n, h, w = zmaps.shape
    for v in nb.prange(h):
        for u in range(w):
            k = 0
            for m in range(n):
                z = zmaps[m, v, u]
                if z > 0.0 and np.isfinite(z):
                    _insert_sorted(out_z[v, u], out_c[v, u], out_f[v, u], k, z, cmaps[m, v, u], fids[m])
                    k += 1
            count[v, u] = k


def collect_candidates(window: FusionWindow, intr: Intrinsics) -> CandidateSet:
    """Reference depth plus every other frame rendered onto the reference view."""
    ref = window.reference
    if ref.shape != intr.shape:
        raise ConfigurationError(f"reference frame is {ref.shape}, intrinsics expect {intr.shape}")
    others = sorted(window.others, key=lambda f: f.frame_id)
    zs = [ref.depth]
    cs = [ref.confidence]
    for f in others:
        z, c = render_to_reference(f, ref.pose, intr)
        zs.append(z)
        cs.append(c)
    zmaps = np.ascontiguousarray(np.stack(zs))
    cmaps = np.ascontiguousarray(np.stack(cs))
    fids = np.array([ref.frame_id] + [f.frame_id for f in others], dtype=np.int64)
    h, w = intr.shape
    k = len(zs)
    cand = CandidateSet(np.zeros((h, w, k)), np.zeros((h, w, k)), np.zeros((h, w, k), np.int64), np.zeros((h, w), np.int64))
    _collect_kernel(zmaps, cmaps, fids, cand.depth, cand.confidence, cand.frame_id, cand.count)
    return cand


@nb.njit(parallel=True, cache=True)
def _support_kernel(cz, cc, count, eps, out_z, out_c, sup):
    h, w, k = cz.shape
    for v in nb.prange(h):
        for u in range(w):
            n = count[v, u]
            for j in range(n):
                zj = cz[v, u, j]
                csum = 0.0
                m = 0
                lo = zj
                hi = zj
                for i in range(n):
                    s = abs(cz[v, u, i] - zj) < eps
                    sup[v, u, j, i] = s
                    if s:
                        csum += cc[v, u, i]
                        m += 1
                        lo = min(lo, cz[v, u, i])
                        hi = max(hi, cz[v, u, i])
                # offsets from zj weighted by normalized confidences; an
                # all-zero set falls back to the plain mean
                acc = 0.0
                for i in range(n):
                    if sup[v, u, j, i]:
                        wgt = cc[v, u, i] / csum if csum > 0.0 else 1.0 / m
                        acc += wgt * (cz[v, u, i] - zj)
                out_z[v, u, j] = min(max(zj + acc, lo), hi)
                out_c[v, u, j] = csum


def fuse_supports(cand: CandidateSet, params: FusionParams) -> BlendedCandidates:
    """Blend every candidate with the candidates within ``epsilon`` of it.

    Offsets are accumulated relative to the candidate's own depth, so a set of
    identical depths blends back to exactly that depth.
    """
    h, w, k = cand.depth.shape
    out_z = np.zeros((h, w, k))
    out_c = np.zeros((h, w, k))
    sup = np.zeros((h, w, k, k), dtype=np.bool_)
    _support_kernel(cand.depth, cand.confidence, cand.count, float(params.epsilon), out_z, out_c, sup)
    return BlendedCandidates(cand, out_z, out_c, sup)


@nb.njit(parallel=True, cache=True)
def _penalty_kernel(cz, cc, count, bz, bc, sup, eps, fx, fy, cx, cy, Rs, ts, oz, oc, out):
    h, w, k = cz.shape
    nv = oz.shape[0]
    ho = oz.shape[1]
    wo = oz.shape[2]
    for v in nb.prange(h):
        # penalties are sorted before summing so frame order cannot change the result
        pen = np.empty(k + nv)
        for u in range(w):
            n = count[v, u]
            for j in range(n):
                zs = bz[v, u, j]
                m = 0
                # occlusion: a nearer, non-supporting candidate on the reference ray
                for i in range(n):
                    if not sup[v, u, j, i] and cz[v, u, i] < zs - eps:
                        pen[m] = cc[v, u, i]
                        m += 1
                # free-space violation: in front of another view's measurement
                x = (u - cx) * zs / fx
                y = (v - cy) * zs / fy
                for l in range(nv):
                    X = Rs[l, 0, 0] * x + Rs[l, 0, 1] * y + Rs[l, 0, 2] * zs + ts[l, 0]
                    Y = Rs[l, 1, 0] * x + Rs[l, 1, 1] * y + Rs[l, 1, 2] * zs + ts[l, 1]
                    Z = Rs[l, 2, 0] * x + Rs[l, 2, 1] * y + Rs[l, 2, 2] * zs + ts[l, 2]
                    if not (Z > 0.0):
                        continue
                    pu = np.floor(fx * X / Z + cx + 0.5)
                    pv = np.floor(fy * Y / Z + cy + 0.5)
                    if pu < 0 or pv < 0 or pu >= wo or pv >= ho:
                        continue
                    zo = oz[l, int(pv), int(pu)]
                    if zo > 0.0 and np.isfinite(zo) and Z < zo - eps:
                        pen[m] = oc[l, int(pv), int(pu)]
                        m += 1
                c = bc[v, u, j]
                if m > 0:
                    total = 0.0
                    for p in np.sort(pen[:m]):
                        total += p
                    c -= total
                out[v, u, j] = c


def apply_visibility_penalties(
    blended: BlendedCandidates, window: FusionWindow, intr: Intrinsics, params: FusionParams
) -> np.ndarray:
    """Blended confidences reduced by occlusion and free-space conflicts.

    Returns the penalized confidence per candidate slot; may be negative.
    """
    cand = blended.candidates
    ref = window.reference
    others = sorted(window.others, key=lambda f: f.frame_id)
    if others:
        rel = [_relative(ref.pose, f.pose) for f in others]
        Rs = np.ascontiguousarray(np.stack([r for r, _ in rel]))
        ts = np.ascontiguousarray(np.stack([t for _, t in rel]))
        oz = np.ascontiguousarray(np.stack([f.depth for f in others]))
        oc = np.ascontiguousarray(np.stack([f.confidence for f in others]))
    else:
        Rs = np.zeros((0, 3, 3))
        ts = np.zeros((0, 3))
        oz = np.zeros((0,) + intr.shape)
        oc = np.zeros((0,) + intr.shape)
    out = np.zeros_like(blended.confidence)
    _penalty_kernel(
        cand.depth, cand.confidence, cand.count, blended.depth, blended.confidence, blended.supporters,
        float(params.epsilon), intr.fx, intr.fy, intr.cx, intr.cy, Rs, ts, oz, oc, out,
    )
    return out


@nb.njit(parallel=True, cache=True)
def _select_kernel(bz, conf, count, c_thres, out_z, out_c):
    h, w, k = bz.shape
    for v in nb.prange(h):
        for u in range(w):
            n = count[v, u]
            best = -1
            for j in range(n):
                if best < 0 or conf[v, u, j] > conf[v, u, best] or (
                    conf[v, u, j] == conf[v, u, best] and bz[v, u, j] < bz[v, u, best]
                ):
                    best = j
            if best < 0 or conf[v, u, best] < c_thres:
                out_z[v, u] = 0.0
                out_c[v, u] = 0.0
            else:
                out_z[v, u] = bz[v, u, best]
                out_c[v, u] = max(conf[v, u, best], 0.0)


def select_fused(
    blended: BlendedCandidates, penalized: np.ndarray, params: FusionParams
) -> tuple[np.ndarray, np.ndarray]:
    """Highest-confidence candidate per pixel (ties to the nearer depth)."""
    h, w, _ = blended.depth.shape
    out_z = np.full((h, w), INVALID_DEPTH)
    out_c = np.zeros((h, w))
    _select_kernel(blended.depth, penalized, blended.candidates.count, float(params.c_thres), out_z, out_c)
    return out_z, out_c


def fuse_window(window: FusionWindow, intr: Intrinsics, params: FusionParams) -> DepthFrame:
    """Fused depth frame on the reference view of a full window."""
    ref = window.reference
    cand = collect_candidates(window, intr)
    blended = fuse_supports(cand, params)
    penalized = apply_visibility_penalties(blended, window, intr, params)
    depth, conf = select_fused(blended, penalized, params)
    return DepthFrame(depth, conf, ref.pose, ref.frame_id, ref.timestamp, ref.image)


def fuse_frames(frames: list[DepthFrame], intr: Intrinsics, params: FusionParams) -> DepthFrame:
    """Fuse an explicit list of frames; the middle one (by frame id) is the reference."""
    window = FusionWindow(len(frames))
    for f in sorted(frames, key=lambda f: f.frame_id):
        window.push(f)
    return fuse_window(window, intr, params)
