"""Dense stereo for one rectified pair.

Stages, each a separate function so they can be tested in isolation:

1. :func:`compute_cost_volume` -- SAD over a square window, O(1) per window
   via running (summed-area) sums.  Volume shape is ``(H, W, D)`` uint16 with
   disparity innermost.
2. :func:`sgm_optimize` -- four-direction semi-global aggregation, int32.
3. :func:`select_disparity` -- winner-take-all, parabola sub-pixel offset and
   PKRN confidence.
4. :func:`lr_consistency_filter` -- left/right check, the right map being
   re-indexed out of the same aggregated volume.

Border convention for the SAD window: the window is truncated at the image
edges (only in-image pixels are summed) and a right-image column ``u - d``
that falls left of the image is clamped to column 0.  Entries with
``x - d < 0`` hold the sentinel ``255 * (2r + 1)**2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from .core import INVALID_DISPARITY, ConfigurationError, StereoRig, disparity_to_depth, to_gray

_BAND_ROWS = 16
_COL_BLOCK = 32
_MAX_RADIUS = 7

DIRECTIONS = ("left_right", "right_left", "top_bottom", "bottom_top")


@dataclass(frozen=True)
class SgmParams:
    p1: int = 10
    p2: int = 120

    def __post_init__(self):
        if not 0 < self.p1 < self.p2:
            raise ConfigurationError(f"SGM penalties need 0 < p1 < p2, got p1={self.p1}, p2={self.p2}")

    @property
    def paths(self) -> int:
        return 4


@dataclass(frozen=True)
class StereoConfig:
    d_max: int = 100
    window_radius: int = 1
    sgm: SgmParams = field(default_factory=SgmParams)
    lr_threshold: float = 1.0
    # PKRN denominator floor; keeps perfect matches finite
    pkrn_floor: int = 1

    def __post_init__(self):
        if self.d_max < 2:
            raise ConfigurationError(f"d_max must be at least 2, got {self.d_max}")
        if not 0 <= self.window_radius <= _MAX_RADIUS:
            raise ConfigurationError(f"window_radius must be in [0, {_MAX_RADIUS}], got {self.window_radius}")
        if not self.lr_threshold >= 0:
            raise ConfigurationError("lr_threshold must be non-negative")
        if self.pkrn_floor < 1:
            raise ConfigurationError("pkrn_floor must be >= 1")

    @property
    def sentinel(self) -> int:
        return 255 * (2 * self.window_radius + 1) ** 2


# --------------------------------------------------------------------------
# cost volume


@njit(cache=True, nogil=True)
def _abs_diff_row(L, Rrev, v, D, ad):
    """``ad[u, d] = |L(u, v) - R(u - d, v)|`` with ``u - d`` clamped at 0.

    ``Rrev`` holds each right row reversed so that ``R(u - d)`` becomes the
    forward read ``Rrev[W - 1 - u + d]``.
    """
    W = L.shape[1]
    rr = Rrev[v]
    edge = np.int16(rr[W - 1])
    for u in range(W):
        a = np.int16(L[v, u])
        o = ad[u]
        inside = min(D, u + 1)
        base = W - 1 - u
        for d in range(inside):
            o[d] = np.uint8(abs(np.int16(a - np.int16(rr[base + d]))))
        ev = np.uint8(abs(np.int16(a - edge)))
        for d in range(inside, D):
            o[d] = ev


@njit(cache=True, nogil=True)
def _slide(colsum, entering, leaving):
    W, D = colsum.shape
    for u in range(W):
        c = colsum[u]
        n = entering[u]
        o = leaving[u]
        for d in range(D):
            c[d] = np.int32(c[d] + np.int32(n[d]) - np.int32(o[d]))


@njit(cache=True, parallel=True, nogil=True)
def _sad_volume(L, Rrev, r, sentinel, band, out):
    H, W = L.shape
    D = out.shape[2]
    nbands = (H + band - 1) // band
    fill = np.uint16(sentinel)
    nslots = 2 * r + 2
    for b in prange(nbands):
        y0 = b * band
        y1 = min(H, y0 + band)
        # Column sums of the absolute-difference rows inside the vertical
        # window, updated incrementally; the ring buffer keeps the rows that
        # still have to leave the window.  The horizontal extent is a running
        # sum over x, so each window costs O(1) whatever its size.
        colsum = np.zeros((W, D), dtype=np.int32)
        ring = np.empty((nslots, W, D), dtype=np.uint8)
        zero = np.zeros((W, D), dtype=np.uint8)
        acc = np.empty(D, dtype=np.int32)
        for v in range(max(0, y0 - r), min(H, y0 + r + 1)):
            slot = ring[v % nslots]
            _abs_diff_row(L, Rrev, v, D, slot)
            _slide(colsum, slot, zero)
        for y in range(y0, y1):
            if y > y0:
                v_in = y + r
                v_out = y - r - 1
                entering = zero
                if v_in < H:
                    entering = ring[v_in % nslots]
                    _abs_diff_row(L, Rrev, v_in, D, entering)
                leaving = ring[v_out % nslots] if v_out >= 0 else zero
                _slide(colsum, entering, leaving)
            acc[:] = 0
            for u in range(min(W, r + 1)):
                cs = colsum[u]
                for d in range(D):
                    acc[d] = np.int32(acc[d] + cs[d])
            for x in range(W):
                if x > 0:
                    if x + r < W:
                        cs = colsum[x + r]
                        for d in range(D):
                            acc[d] = np.int32(acc[d] + cs[d])
                    if x - r - 1 >= 0:
                        cs = colsum[x - r - 1]
                        for d in range(D):
                            acc[d] = np.int32(acc[d] - cs[d])
                o = out[y, x]
                inside = min(D, x + 1)
                for d in range(inside):
                    o[d] = np.uint16(acc[d])
                for d in range(inside, D):
                    o[d] = fill
    return out


def _check_pair(left: np.ndarray, right: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    L = to_gray(left)
    R = to_gray(right)
    if L.shape != R.shape:
        raise ConfigurationError(f"left image {L.shape} and right image {R.shape} differ in size")
    return np.ascontiguousarray(L), np.ascontiguousarray(R)


def compute_cost_volume(
    left: np.ndarray, right: np.ndarray, cfg: StereoConfig, out: np.ndarray | None = None
) -> np.ndarray:
    """SAD cost volume ``cost[y, x, d]`` of shape (H, W, d_max), uint16."""
    L, R = _check_pair(left, right)
    shape = L.shape + (cfg.d_max,)
    if out is None:
        out = np.empty(shape, dtype=np.uint16)
    elif out.shape != shape or out.dtype != np.uint16:
        raise ConfigurationError(f"out must be a uint16 array of shape {shape}")
    Rrev = np.ascontiguousarray(R[:, ::-1])
    return _sad_volume(L, Rrev, cfg.window_radius, cfg.sentinel, _BAND_ROWS, out)


# --------------------------------------------------------------------------
# semi-global aggregation


_BIG = np.int32(2**30)


@njit(cache=True, nogil=True, inline="always")
def _path_step(c, prev, mp, cur, p1, p2):
    """One recurrence step from the previous pixel's path costs ``prev``.

    ``mp`` is ``min(prev)``; returns ``min(cur)``.  Every intermediate is cast
    back to int32: numba widens int32 arithmetic to int64 otherwise, which
    defeats vectorization of the inner loop.
    """
    D = prev.shape[0]
    jump = np.int32(mp + p2)
    m = _BIG
    if D == 1:
        v = np.int32(np.int32(c[0]) + min(prev[0], jump) - mp)
        cur[0] = v
        return v
    b = min(prev[0], np.int32(prev[1] + p1), jump)
    v = np.int32(np.int32(c[0]) + b - mp)
    cur[0] = v
    m = min(m, v)
    for d in range(1, D - 1):
        b = min(prev[d], np.int32(min(prev[d - 1], prev[d + 1]) + p1), jump)
        v = np.int32(np.int32(c[d]) + b - mp)
        cur[d] = v
        m = min(m, v)
    b = min(prev[D - 1], np.int32(prev[D - 2] + p1), jump)
    v = np.int32(np.int32(c[D - 1]) + b - mp)
    cur[D - 1] = v
    return min(m, v)


@njit(cache=True, nogil=True, inline="always")
def _path_start(c, cur):
    m = _BIG
    for d in range(c.shape[0]):
        v = np.int32(c[d])
        cur[d] = v
        m = min(m, v)
    return m


@njit(cache=True, parallel=True, nogil=True)
def _scan_rows(cost, out, p1, p2, reverse, accumulate):
    H, W, D = cost.shape
    for y in prange(H):
        # parity-indexed double buffer; swapping array references blocks SIMD
        buf = np.empty((2, D), dtype=np.int32)
        mp = _BIG
        for i in range(W):
            x = W - 1 - i if reverse else i
            cur = buf[i & 1]
            if i == 0:
                mp = _path_start(cost[y, x], cur)
            else:
                mp = _path_step(cost[y, x], buf[(i + 1) & 1], mp, cur, p1, p2)
            o = out[y, x]
            if accumulate:
                for d in range(D):
                    o[d] = np.int32(o[d] + cur[d])
            else:
                for d in range(D):
                    o[d] = cur[d]


@njit(cache=True, parallel=True, nogil=True)
def _scan_cols(cost, out, p1, p2, reverse, accumulate, block):
    H, W, D = cost.shape
    nblocks = (W + block - 1) // block
    for b in prange(nblocks):
        x0 = b * block
        x1 = min(W, x0 + block)
        n = x1 - x0
        buf = np.empty((2, n, D), dtype=np.int32)
        mins = np.zeros(n, dtype=np.int32)
        for i in range(H):
            y = H - 1 - i if reverse else i
            cur = buf[i & 1]
            prev = buf[(i + 1) & 1]
            for k in range(n):
                x = x0 + k
                if i == 0:
                    mins[k] = _path_start(cost[y, x], cur[k])
                else:
                    mins[k] = _path_step(cost[y, x], prev[k], mins[k], cur[k], p1, p2)
                o = out[y, x]
                ck = cur[k]
                if accumulate:
                    for d in range(D):
                        o[d] = np.int32(o[d] + ck[d])
                else:
                    for d in range(D):
                        o[d] = ck[d]


@njit(cache=True, parallel=True, nogil=True)
def _scan_rows_pair(cost, out, p1, p2):
    """``out = L_left_right + L_right_left``; the first pass stays in a row buffer."""
    H, W, D = cost.shape
    for y in prange(H):
        rowbuf = np.empty((W, D), dtype=np.int32)
        buf = np.empty((2, D), dtype=np.int32)
        mp = _BIG
        for x in range(W):
            cur = buf[x & 1]
            if x == 0:
                mp = _path_start(cost[y, x], cur)
            else:
                mp = _path_step(cost[y, x], buf[(x + 1) & 1], mp, cur, p1, p2)
            h = rowbuf[x]
            for d in range(D):
                h[d] = cur[d]
        for i in range(W):
            x = W - 1 - i
            cur = buf[i & 1]
            if i == 0:
                mp = _path_start(cost[y, x], cur)
            else:
                mp = _path_step(cost[y, x], buf[(i + 1) & 1], mp, cur, p1, p2)
            o = out[y, x]
            h = rowbuf[x]
            for d in range(D):
                o[d] = np.int32(h[d] + cur[d])


def _run_path(cost, out, direction, params, accumulate):
    p1 = np.int32(params.p1)
    p2 = np.int32(params.p2)
    if direction == "left_right":
        _scan_rows(cost, out, p1, p2, False, accumulate)
    elif direction == "right_left":
        _scan_rows(cost, out, p1, p2, True, accumulate)
    elif direction == "top_bottom":
        _scan_cols(cost, out, p1, p2, False, accumulate, _COL_BLOCK)
    elif direction == "bottom_top":
        _scan_cols(cost, out, p1, p2, True, accumulate, _COL_BLOCK)
    else:
        raise ValueError(f"unknown direction {direction!r}")


def sgm_path(cost: np.ndarray, direction: str, params: SgmParams) -> np.ndarray:
    """Path costs ``L_r`` along a single scan direction (int32, same shape)."""
    cost = np.ascontiguousarray(cost)
    out = np.empty(cost.shape, dtype=np.int32)
    _run_path(cost, out, direction, params, False)
    return out


def sgm_optimize(cost: np.ndarray, params: SgmParams, out: np.ndarray | None = None) -> np.ndarray:
    """Sum of the four directional path costs (int32).

    ``out`` may be a preallocated int32 array of the volume's shape.
    """
    cost = np.ascontiguousarray(cost)
    if out is None:
        out = np.empty(cost.shape, dtype=np.int32)
    elif out.shape != cost.shape or out.dtype != np.int32:
        raise ConfigurationError("out must be an int32 array shaped like the cost volume")
    p1 = np.int32(params.p1)
    p2 = np.int32(params.p2)
    _scan_rows_pair(cost, out, p1, p2)
    _scan_cols(cost, out, p1, p2, False, True, _COL_BLOCK)
    _scan_cols(cost, out, p1, p2, True, True, _COL_BLOCK)
    return out


# --------------------------------------------------------------------------
# disparity selection


@njit(cache=True, nogil=True, inline="always")
def _subpixel(cm, c0, cp):
    den = cm - 2.0 * c0 + cp
    if den <= 0.0:
        return 0.0
    delta = (cm - cp) / (2.0 * den)
    if delta > 0.5:
        return 0.5
    if delta < -0.5:
        return -0.5
    return delta


@njit(cache=True, nogil=True, inline="always")
def _confidence(best, second, floor):
    den = best if best > floor else floor
    ratio = second / den
    if ratio < 1.0:
        ratio = 1.0
    return 1.0 - 1.0 / ratio


@njit(cache=True, nogil=True, inline="always")
def _select_left_row(row, disp, conf, floor):
    W, D = row.shape
    for x in range(W):
        top = min(D - 1, x)
        c = row[x]
        if top == 0:
            disp[x] = 0.0
            conf[x] = 0.0
            continue
        best = c[0]
        for d in range(1, top + 1):
            best = min(best, c[d])
        bd = 0
        while c[bd] != best:
            bd += 1
        second = _BIG
        for d in range(top + 1):
            if d != bd:
                second = min(second, c[d])
        delta = 0.0
        if 0 < bd < top:
            delta = _subpixel(float(c[bd - 1]), float(c[bd]), float(c[bd + 1]))
        disp[x] = bd + delta
        conf[x] = _confidence(float(best), float(second), float(floor))


@njit(cache=True, nogil=True, inline="always")
def _select_right_row(row, disp):
    W, D = row.shape
    for xr in range(W):
        top = min(D - 1, W - 1 - xr)
        bd = 0
        best = row[xr, 0]
        for d in range(1, top + 1):
            v = row[xr + d, d]
            if v < best:
                best = v
                bd = d
        delta = 0.0
        if 0 < bd < top:
            delta = _subpixel(float(row[xr + bd - 1, bd - 1]), float(best), float(row[xr + bd + 1, bd + 1]))
        disp[xr] = bd + delta


@njit(cache=True, parallel=True, nogil=True)
def _select_left(agg, floor):
    H, W, D = agg.shape
    disp = np.empty((H, W), dtype=np.float64)
    conf = np.empty((H, W), dtype=np.float64)
    for y in prange(H):
        _select_left_row(agg[y], disp[y], conf[y], floor)
    return disp, conf


@njit(cache=True, parallel=True, nogil=True)
def _select_right(agg):
    H, W, D = agg.shape
    disp = np.empty((H, W), dtype=np.float64)
    for y in prange(H):
        _select_right_row(agg[y], disp[y])
    return disp


@njit(cache=True, parallel=True, nogil=True)
def _select_both(agg, floor):
    # one pass while each aggregated row is still in cache
    H, W, D = agg.shape
    disp = np.empty((H, W), dtype=np.float64)
    conf = np.empty((H, W), dtype=np.float64)
    rdisp = np.empty((H, W), dtype=np.float64)
    for y in prange(H):
        _select_left_row(agg[y], disp[y], conf[y], floor)
        _select_right_row(agg[y], rdisp[y])
    return disp, conf, rdisp


def select_disparity(agg: np.ndarray, cfg: StereoConfig) -> tuple[np.ndarray, np.ndarray]:
    """Winner-take-all disparity with sub-pixel refinement, plus confidence.

    Only disparities ``d <= x`` are considered at column ``x``.  Ties go to
    the smaller disparity.  The parabola offset is clamped to [-0.5, 0.5] and
    skipped at either end of the admissible range.  Confidence is
    ``1 - 1/PKRN`` with PKRN = second-smallest / max(smallest, floor), and
    PKRN itself floored at 1.
    """
    return _select_left(np.ascontiguousarray(agg), cfg.pkrn_floor)


def right_disparity(agg: np.ndarray) -> np.ndarray:
    """Right-view disparity map from the left-referenced volume (``agg[y, x + d, d]``)."""
    return _select_right(np.ascontiguousarray(agg))


def lr_consistency_filter(left_disp: np.ndarray, right_disp: np.ndarray, threshold: float) -> np.ndarray:
    """Invalidate left disparities that the right map does not confirm."""
    if left_disp.shape != right_disp.shape:
        raise ConfigurationError("left and right disparity maps differ in size")
    out = np.array(left_disp, dtype=np.float64, copy=True)
    if np.isinf(threshold):
        return out
    H, W = out.shape
    valid = out >= 0
    xr = np.arange(W)[None, :] - np.floor(out + 0.5).astype(np.int64)
    inside = valid & (xr >= 0) & (xr < W)
    rows = np.broadcast_to(np.arange(H)[:, None], (H, W))
    other = np.full((H, W), INVALID_DISPARITY)
    other[inside] = right_disp[rows[inside], xr[inside]]
    keep = inside & (other >= 0) & (np.abs(out - other) <= threshold)
    out[~keep] = INVALID_DISPARITY
    return out


class StereoMatcher:
    """Reusable matcher that keeps its cost and aggregation volumes between frames.

    Reallocating two volumes of several hundred megabytes per frame costs
    tens of milliseconds in page faults at 800x600x100.
    """

    def __init__(self, cfg: StereoConfig, rig: StereoRig | None = None):
        self.cfg = cfg
        self.rig = rig
        self._cost = None
        self._agg = None

    def _buffers(self, shape):
        if self._agg is None or self._agg.shape != shape:
            self._cost = np.empty(shape, dtype=np.uint16)
            self._agg = np.empty(shape, dtype=np.int32)
        return self._cost, self._agg

    def disparity(self, left: np.ndarray, right: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.cfg
        shape = to_gray(left).shape + (cfg.d_max,)
        cost_buf, agg_buf = self._buffers(shape)
        cost = compute_cost_volume(left, right, cfg, out=cost_buf)
        agg = sgm_optimize(cost, cfg.sgm, out=agg_buf)
        disp, conf, rdisp = _select_both(agg, cfg.pkrn_floor)
        disp = lr_consistency_filter(disp, rdisp, cfg.lr_threshold)
        conf[disp < 0] = 0.0
        return disp, conf

    def match(self, left: np.ndarray, right: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.rig is None:
            raise ConfigurationError("StereoMatcher needs a StereoRig to produce depth")
        if to_gray(left).shape != self.rig.intrinsics.shape:
            raise ConfigurationError(
                f"image size {left.shape[:2]} does not match calibration {self.rig.intrinsics.shape}"
            )
        disp, conf = self.disparity(left, right)
        depth = disparity_to_depth(disp, self.rig)
        conf[depth <= 0] = 0.0
        return depth, conf


def stereo_disparity(left: np.ndarray, right: np.ndarray, cfg: StereoConfig) -> tuple[np.ndarray, np.ndarray]:
    """Full disparity pipeline; invalid pixels carry disparity -1 and confidence 0."""
    return StereoMatcher(cfg).disparity(left, right)


def stereo_match(
    left: np.ndarray, right: np.ndarray, rig: StereoRig, cfg: StereoConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Depth (metres) and confidence maps for a rectified pair."""
    return StereoMatcher(cfg, rig).match(left, right)


def set_threads(n: int) -> int:
    """Limit numba worker threads; returns the count actually applied."""
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n
