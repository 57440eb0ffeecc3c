"""Dense disparity from a rectified pair.

Stages, in pipeline order:

1. :func:`compute_disparity` - exhaustive ZNCC search over integer candidates,
   scoring only the chessboard half of each window.
2. :func:`cleanup_pass` - alternating 8-ray outlier removal with a growing
   radius and two hole-filling passes (radial, disc).
3. :func:`refine_disparities` - anti-shrink Laplacian smoothing of the discrete
   disparities, re-selecting each discrete value against ZNCC plus a
   quadratic pull toward the smoothed value.
4. :func:`disparity_to_cloud` - camera-frame points, colors and normals.

Every pass reads a frozen input grid and writes a fresh output grid. Each
pass has a numba kernel and a numpy fallback (see :mod:`._accel`); both
accumulate in the same order and agree bit-for-bit except for the normal
fit, which calls two different eigen-solvers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ._accel import dispatch, njit
from .core import StereoRig

DIRECTIONS = np.array(
    [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)], dtype=np.int64
)  # (dx, dy)
ZNCC_EPS = 1e-3


@dataclass(frozen=True)
class StereoParams:
    window: int = 11
    d_min: int = -20
    d_max: int = 80
    neighbor_jump_threshold: float = 2.5
    outlier_radius_start: int = 10
    outlier_radius_step: int = 10
    cleanup_iterations: int = 3
    fill_radius_radial: int = 50
    fill_radius_disc: int = 20
    fill_support_radial: int = 4  # rays out of 8
    fill_support_disc: float = 0.25  # fraction of disc pixels
    smoothing_radius: int = 15
    alpha: float = 0.1
    eta_smooth: float = 0.01
    refine_iterations: int = 10
    min_zncc: float = 0.5
    refine_search: int = 5
    normal_window: int = 7

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if not self.d_min < self.d_max:
            raise ValueError("d_min must be below d_max")
        radii = (
            self.outlier_radius_start,
            self.outlier_radius_step,
            self.fill_radius_radial,
            self.fill_radius_disc,
            self.smoothing_radius,
        )
        if min(radii) <= 0:
            raise ValueError("all radii must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def half(self) -> int:
        return self.window // 2


@dataclass(frozen=True, eq=False)
class DisparityMap:
    disparity: np.ndarray  # (H, W) float64, pixels
    valid: np.ndarray  # (H, W) bool

    @property
    def height(self) -> int:
        return self.disparity.shape[0]

    @property
    def width(self) -> int:
        return self.disparity.shape[1]

    @classmethod
    def empty(cls, height: int, width: int) -> DisparityMap:
        return cls(np.zeros((height, width)), np.zeros((height, width), dtype=bool))


@dataclass(frozen=True, eq=False)
class StereoCloud:
    """Per-pixel camera-frame points with normals and colors."""

    points: np.ndarray  # (H, W, 3) mm
    normals: np.ndarray  # (H, W, 3) unit, facing the camera
    colors: np.ndarray  # (H, W, 3) uint8
    valid: np.ndarray  # (H, W) bool

    def flat(self):
        """Valid entries as flat arrays ``(points, normals, colors, pixels)``; pixels are (u, v)."""
        vs, us = np.nonzero(self.valid)
        return (
            self.points[vs, us],
            self.normals[vs, us],
            self.colors[vs, us],
            np.stack([us, vs], axis=1),
        )

    @property
    def count(self) -> int:
        return int(self.valid.sum())


def _as_int_image(img) -> np.ndarray:
    a = np.asarray(img)
    if a.ndim != 2:
        raise ValueError("expected a single-channel image")
    return np.ascontiguousarray(a, dtype=np.int64)


# --------------------------------------------------------------------------
# ZNCC


def chessboard_mask(window: int) -> np.ndarray:
    """Sampling mask for a window: offsets with even ``dx + dy`` (center included)."""
    h = window // 2
    dy, dx = np.mgrid[-h : h + 1, -h : h + 1]
    return (dx + dy) % 2 == 0


@njit
def _zncc_from_sums(n, sx, sy, sxx, syy, sxy):
    num = n * sxy - sx * sy
    vx = n * sxx - sx * sx
    vy = n * syy - sy * sy
    if vx <= 0.0 or vy <= 0.0:
        return np.nan
    z = num / math.sqrt(vx * vy)
    if z > 1.0:
        return 1.0
    if z < -1.0:
        return -1.0
    return z


def zncc_score(left_patch, right_patch) -> float:
    """ZNCC of two equally sized square patches over the chessboard samples.

    Returns ``nan`` when either sampled patch has zero variance.
    """
    a = np.asarray(left_patch, dtype=np.float64)
    b = np.asarray(right_patch, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("patches must be equal square windows")
    m = chessboard_mask(a.shape[0])
    a = a[m]
    b = b[m]
    n = float(a.size)
    return float(
        _zncc_from_sums(n, a.sum(), b.sum(), (a * a).sum(), (b * b).sum(), (a * b).sum())
    )


@njit
def _window_sums(img, v, u, h):
    s = 0
    ss = 0
    for dy in range(-h, h + 1):
        for dx in range(-h, h + 1):
            if (dx + dy) & 1:
                continue
            a = img[v + dy, u + dx]
            s += a
            ss += a * a
    return s, ss


@njit
def _zncc_at(L, R, v, u, d, h, n, sx, sxx):
    """ZNCC of the left window at (u, v) against the right window at (u - d, v)."""
    W = L.shape[1]
    ur = u - d
    if ur - h < 0 or ur + h >= W:
        return np.nan
    sy = 0
    syy = 0
    sxy = 0
    for dy in range(-h, h + 1):
        for dx in range(-h, h + 1):
            if (dx + dy) & 1:
                continue
            a = L[v + dy, u + dx]
            b = R[v + dy, ur + dx]
            sy += b
            syy += b * b
            sxy += a * b
    return _zncc_from_sums(float(n), float(sx), float(sy), float(sxx), float(syy), float(sxy))


@njit
def _parity_integrals(a, S):
    """``S[p]`` = integral image of ``a`` restricted to pixels with ``(x + y) % 2 == p``."""
    H, W = a.shape
    for y in range(H):
        r0 = 0
        r1 = 0
        for x in range(W):
            if (x + y) & 1:
                r1 += a[y, x]
            else:
                r0 += a[y, x]
            S[0, y + 1, x + 1] = S[0, y, x + 1] + r0
            S[1, y + 1, x + 1] = S[1, y, x + 1] + r1


@njit
def _own_box(S, v, u, h):
    p = (u + v) & 1
    return S[p, v + h + 1, u + h + 1] - S[p, v - h, u + h + 1] - S[p, v + h + 1, u - h] + S[p, v - h, u - h]


@njit
def _disparity_numba(L, R, h, d_min, d_max, min_zncc):
    H, W = L.shape
    n = float(((2 * h + 1) * (2 * h + 1) + 1) // 2)
    X = np.zeros((2, H + 1, W + 1), dtype=np.int64)
    XX = np.zeros((2, H + 1, W + 1), dtype=np.int64)
    Y = np.zeros((2, H + 1, W + 1), dtype=np.int64)
    YY = np.zeros((2, H + 1, W + 1), dtype=np.int64)
    S = np.zeros((2, H + 1, W + 1), dtype=np.int64)
    _parity_integrals(L, X)
    _parity_integrals(L * L, XX)
    _parity_integrals(R, Y)
    _parity_integrals(R * R, YY)
    best = np.full((H, W), -np.inf)
    best_d = np.zeros((H, W))
    P = np.zeros((H, W), dtype=np.int64)
    for d in range(d_min, d_max + 1):
        for y in range(H):
            for x in range(W):
                xr = x - d
                P[y, x] = L[y, x] * R[y, xr] if 0 <= xr < W else 0
        _parity_integrals(P, S)
        for v in range(h, H - h):
            for u in range(max(h, h + d), min(W - h, W - h + d)):
                sx = float(_own_box(X, v, u, h))
                sxx = float(_own_box(XX, v, u, h))
                sy = float(_own_box(Y, v, u - d, h))
                syy = float(_own_box(YY, v, u - d, h))
                sxy = float(_own_box(S, v, u, h))
                z = _zncc_from_sums(n, sx, sy, sxx, syy, sxy)
                if z > best[v, u]:  # nan compares false
                    best[v, u] = z
                    best_d[v, u] = d
    valid = best >= min_zncc
    disp = np.where(valid, best_d, 0.0)
    return disp, valid


@njit
def _zncc_volume_numba(L, R, h, d_lo, d_hi):
    H, W = L.shape
    n = float(((2 * h + 1) * (2 * h + 1) + 1) // 2)
    X = np.zeros((2, H + 1, W + 1), dtype=np.int64)
    XX = np.zeros((2, H + 1, W + 1), dtype=np.int64)
    Y = np.zeros((2, H + 1, W + 1), dtype=np.int64)
    YY = np.zeros((2, H + 1, W + 1), dtype=np.int64)
    S = np.zeros((2, H + 1, W + 1), dtype=np.int64)
    _parity_integrals(L, X)
    _parity_integrals(L * L, XX)
    _parity_integrals(R, Y)
    _parity_integrals(R * R, YY)
    vol = np.full((d_hi - d_lo + 1, H, W), np.nan)
    P = np.zeros((H, W), dtype=np.int64)
    for i in range(d_hi - d_lo + 1):
        d = d_lo + i
        for y in range(H):
            for x in range(W):
                xr = x - d
                P[y, x] = L[y, x] * R[y, xr] if 0 <= xr < W else 0
        _parity_integrals(P, S)
        for v in range(h, H - h):
            for u in range(max(h, h + d), min(W - h, W - h + d)):
                vol[i, v, u] = _zncc_from_sums(
                    n,
                    float(_own_box(X, v, u, h)),
                    float(_own_box(Y, v, u - d, h)),
                    float(_own_box(XX, v, u, h)),
                    float(_own_box(YY, v, u - d, h)),
                    float(_own_box(S, v, u, h)),
                )
    return vol


def _box_sum(a, h):
    """Sum over the (2h+1)^2 window centred at each pixel; zero where it leaves the image."""
    H, W = a.shape
    S = np.zeros((H + 1, W + 1), dtype=a.dtype)
    S[1:, 1:] = a.cumsum(0).cumsum(1)
    out = np.zeros_like(a)
    k = 2 * h + 1
    if H < k or W < k:
        return out
    out[h : H - h, h : W - h] = S[k:, k:] - S[:-k, k:] - S[k:, :-k] + S[:-k, :-k]
    return out


def _own_parity_box(a, h):
    """Chessboard window sum where each pixel samples its own parity class."""
    H, W = a.shape
    par = (np.arange(H)[:, None] + np.arange(W)[None, :]) & 1
    s0 = _box_sum(np.where(par == 0, a, 0), h)
    s1 = _box_sum(np.where(par == 1, a, 0), h)
    return np.where(par == 0, s0, s1)


def _zncc_volume_numpy(L, R, h, d_lo, d_hi):
    """ZNCC for every pixel and every integer disparity in [d_lo, d_hi] (nan if undefined)."""
    H, W = L.shape
    n = float(((2 * h + 1) * (2 * h + 1) + 1) // 2)
    SX = _own_parity_box(L, h).astype(np.float64)
    SXX = _own_parity_box(L * L, h).astype(np.float64)
    SY = _own_parity_box(R, h).astype(np.float64)
    SYY = _own_parity_box(R * R, h).astype(np.float64)
    uu = np.arange(W)[None, :]
    vv = np.arange(H)[:, None]
    left_ok = (vv >= h) & (vv < H - h) & (uu >= h) & (uu < W - h)
    vol = np.full((d_hi - d_lo + 1, H, W), np.nan)
    for i, d in enumerate(range(d_lo, d_hi + 1)):
        ur = uu - d
        ok = left_ok & (ur - h >= 0) & (ur + h < W)
        if not ok.any():
            continue
        P = np.zeros_like(L)
        if d >= 0:
            P[:, d:] = L[:, d:] * R[:, : W - d]
        else:
            P[:, : W + d] = L[:, : W + d] * R[:, -d:]
        SXY = _own_parity_box(P, h).astype(np.float64)
        urc = np.clip(ur, 0, W - 1)
        sy = SY[vv, urc]
        syy = SYY[vv, urc]
        num = n * SXY - SX * sy
        vx = n * SXX - SX * SX
        vy = n * syy - sy * sy
        with np.errstate(invalid="ignore", divide="ignore"):
            z = num / np.sqrt(vx * vy)
        z = np.clip(z, -1.0, 1.0)
        z[~ok | (vx <= 0) | (vy <= 0)] = np.nan
        vol[i] = z
    return vol


def _disparity_numpy(L, R, h, d_min, d_max, min_zncc):
    H, W = L.shape
    vol = _zncc_volume_numpy(L, R, h, d_min, d_max)
    best = np.full((H, W), -np.inf)
    best_d = np.zeros((H, W))
    for i, d in enumerate(range(d_min, d_max + 1)):
        z = vol[i]
        better = z > best
        best[better] = z[better]
        best_d[better] = d
    valid = best >= min_zncc
    disp = np.where(valid, best_d, 0.0)
    return disp, valid


def compute_disparity(left, right, params: StereoParams = StereoParams()) -> DisparityMap:
    """Integer disparity by exhaustive ZNCC search.

    Every candidate ``d`` in ``[d_min, d_max]`` is scored and the first
    maximum wins. A pixel is invalid when its best score is undefined or below
    ``min_zncc``, or when its window, or the right window of any candidate,
    leaves the image: near the left border the true match may not exist in the
    right view at all, and a partial search there picks confident wrong matches.
    """
    L = _as_int_image(left)
    R = _as_int_image(right)
    if L.shape != R.shape:
        raise ValueError(f"image size mismatch: {L.shape} vs {R.shape}")
    kernel = dispatch(_disparity_numba, _disparity_numpy)
    h = params.half
    disp, valid = kernel(L, R, h, params.d_min, params.d_max, float(params.min_zncc))
    uu = np.arange(L.shape[1])
    full_range = (uu - params.d_max - h >= 0) & (uu - params.d_min + h < L.shape[1])
    valid &= full_range[None, :]
    disp[~valid] = 0.0
    return DisparityMap(disp, valid)


# --------------------------------------------------------------------------
# outlier removal


@njit
def _remove_outliers_numba(D, valid, radius, thr, dirs):
    H, W = D.shape
    out = valid.copy()
    for v in range(H):
        for u in range(W):
            if not valid[v, u]:
                continue
            keep = False
            for k in range(8):
                dx = dirs[k, 0]
                dy = dirs[k, 1]
                prev = D[v, u]
                ok = True
                for s in range(1, radius + 1):
                    x = u + s * dx
                    y = v + s * dy
                    if x < 0 or x >= W or y < 0 or y >= H or not valid[y, x]:
                        ok = False
                        break
                    cur = D[y, x]
                    if abs(cur - prev) > thr:
                        ok = False
                        break
                    prev = cur
                if ok:
                    keep = True
                    break
            out[v, u] = keep
    return out


def _shift(a, dx, dy, fill):
    """``out[v, u] = a[v + dy, u + dx]`` with ``fill`` outside the image."""
    H, W = a.shape
    out = np.full_like(a, fill)
    if abs(dx) >= W or abs(dy) >= H:
        return out
    ys = slice(max(0, -dy), min(H, H - dy))
    xs = slice(max(0, -dx), min(W, W - dx))
    ys_src = slice(max(0, dy), min(H, H + dy))
    xs_src = slice(max(0, dx), min(W, W + dx))
    out[ys, xs] = a[ys_src, xs_src]
    return out


def _remove_outliers_numpy(D, valid, radius, thr, dirs):
    keep = np.zeros_like(valid)
    for dx, dy in dirs:
        ok = valid.copy()
        prev = D
        for s in range(1, radius + 1):
            cur = _shift(D, s * dx, s * dy, 0.0)
            cur_valid = _shift(valid, s * dx, s * dy, False)
            ok &= cur_valid & (np.abs(cur - prev) <= thr)
            prev = cur
        keep |= ok
    return keep & valid


def remove_outliers(dmap: DisparityMap, radius: int, threshold: float) -> DisparityMap:
    """Drop valid pixels with no smooth, fully valid ray of length ``radius``.

    A ray passes when all of its ``radius`` steps are valid in-image pixels and
    each consecutive pair (starting at the pixel itself) differs by at most
    ``threshold``. Disparity values are never modified.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    kernel = dispatch(_remove_outliers_numba, _remove_outliers_numpy)
    valid = kernel(
        np.ascontiguousarray(dmap.disparity, dtype=np.float64),
        np.ascontiguousarray(dmap.valid),
        int(radius),
        float(threshold),
        DIRECTIONS,
    )
    return DisparityMap(np.where(valid, dmap.disparity, 0.0), valid)


# --------------------------------------------------------------------------
# hole filling

_SQRT2 = math.sqrt(2.0)


def disc_offsets(radius: int, include_center: bool = False) -> np.ndarray:
    """Integer offsets (dx, dy) with dx^2 + dy^2 <= radius^2, raster order."""
    r = int(radius)
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    m = dx * dx + dy * dy <= r * r
    if not include_center:
        m &= (dx != 0) | (dy != 0)
    return np.ascontiguousarray(np.stack([dx[m], dy[m]], axis=1).astype(np.int64))


@njit
def _fill_radial_numba(D, valid, radius, min_support, dirs):
    H, W = D.shape
    outD = D.copy()
    outV = valid.copy()
    for v in range(H):
        for u in range(W):
            if valid[v, u]:
                continue
            num = 0.0
            den = 0.0
            hits = 0
            for k in range(8):
                dx = dirs[k, 0]
                dy = dirs[k, 1]
                step = _SQRT2 if dx != 0 and dy != 0 else 1.0
                for s in range(1, radius + 1):
                    x = u + s * dx
                    y = v + s * dy
                    if x < 0 or x >= W or y < 0 or y >= H:
                        break
                    if valid[y, x]:
                        w = 1.0 / (s * step)
                        num += D[y, x] * w
                        den += w
                        hits += 1
                        break
            if hits >= min_support and hits > 0:
                outD[v, u] = num / den
                outV[v, u] = True
    return outD, outV


def _fill_radial_numpy(D, valid, radius, min_support, dirs):
    num = np.zeros_like(D)
    den = np.zeros_like(D)
    hits = np.zeros(D.shape, dtype=np.int64)
    for dx, dy in dirs:
        step = _SQRT2 if dx != 0 and dy != 0 else 1.0
        found = np.zeros_like(valid)
        val = np.zeros_like(D)
        w = np.zeros_like(D)
        for s in range(1, radius + 1):
            cv = _shift(valid, s * dx, s * dy, False)
            new = cv & ~found
            if new.any():
                val[new] = _shift(D, s * dx, s * dy, 0.0)[new]
                w[new] = 1.0 / (s * step)
                found |= new
        num[found] += val[found] * w[found]
        den[found] += w[found]
        hits += found
    fill = ~valid & (hits >= min_support) & (hits > 0)
    outD = D.copy()
    outD[fill] = num[fill] / den[fill]
    return outD, valid | fill


@njit
def _fill_disc_numba(D, valid, offsets, min_support):
    H, W = D.shape
    outD = D.copy()
    outV = valid.copy()
    for v in range(H):
        for u in range(W):
            if valid[v, u]:
                continue
            num = 0.0
            den = 0.0
            hits = 0
            for k in range(offsets.shape[0]):
                dx = offsets[k, 0]
                dy = offsets[k, 1]
                x = u + dx
                y = v + dy
                if x < 0 or x >= W or y < 0 or y >= H or not valid[y, x]:
                    continue
                w = 1.0 / math.sqrt(float(dx * dx + dy * dy))
                num += D[y, x] * w
                den += w
                hits += 1
            if hits >= min_support and hits > 0:
                outD[v, u] = num / den
                outV[v, u] = True
    return outD, outV


def _fill_disc_numpy(D, valid, offsets, min_support):
    num = np.zeros_like(D)
    den = np.zeros_like(D)
    hits = np.zeros(D.shape, dtype=np.int64)
    for dx, dy in offsets:
        cv = _shift(valid, dx, dy, False) & ~valid
        if not cv.any():
            continue
        w = 1.0 / math.sqrt(float(dx * dx + dy * dy))
        num[cv] += _shift(D, dx, dy, 0.0)[cv] * w
        den[cv] += w
        hits += cv
    fill = ~valid & (hits >= min_support) & (hits > 0)
    outD = D.copy()
    outD[fill] = num[fill] / den[fill]
    return outD, valid | fill


def fill_holes(dmap: DisparityMap, mode: str, radius: int, min_support: int) -> DisparityMap:
    """Inverse-distance interpolation of invalid pixels from valid neighbours.

    ``mode="radial"`` takes the first valid pixel along each of the 8 rays
    (support counts rays); ``mode="disc"`` takes every valid pixel within
    ``radius`` (support counts pixels). Valid pixels are returned untouched.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    D = np.ascontiguousarray(dmap.disparity, dtype=np.float64)
    V = np.ascontiguousarray(dmap.valid)
    if mode == "radial":
        kernel = dispatch(_fill_radial_numba, _fill_radial_numpy)
        outD, outV = kernel(D, V, int(radius), int(min_support), DIRECTIONS)
    elif mode == "disc":
        kernel = dispatch(_fill_disc_numba, _fill_disc_numpy)
        outD, outV = kernel(D, V, disc_offsets(radius), int(min_support))
    else:
        raise ValueError(f"unknown fill mode {mode!r}")
    return DisparityMap(outD, outV)


def disc_support(radius: int, fraction: float) -> int:
    return int(math.ceil(fraction * len(disc_offsets(radius))))


def cleanup_pass(dmap: DisparityMap, params: StereoParams = StereoParams()) -> DisparityMap:
    """Alternate outlier removal (growing radius) with radial then disc filling."""
    out = dmap
    disc_min = disc_support(params.fill_radius_disc, params.fill_support_disc)
    for k in range(params.cleanup_iterations):
        radius = params.outlier_radius_start + k * params.outlier_radius_step
        out = remove_outliers(out, radius, params.neighbor_jump_threshold)
        out = fill_holes(out, "radial", params.fill_radius_radial, params.fill_support_radial)
        out = fill_holes(out, "disc", params.fill_radius_disc, disc_min)
    return out


# --------------------------------------------------------------------------
# anti-shrink Laplacian refinement


@njit
def _row_prefix(a):
    H, W = a.shape
    C = np.zeros((H, W + 1))
    for y in range(H):
        acc = 0.0
        for x in range(W):
            acc += a[y, x]
            C[y, x + 1] = acc
    return C


@njit
def _disc_mean_numba(vals, valid, spans):
    H, W = vals.shape
    r = (spans.shape[0] - 1) // 2
    C = _row_prefix(vals)
    N = _row_prefix(valid.astype(np.float64))
    out = np.zeros((H, W))
    for v in range(H):
        for u in range(W):
            if not valid[v, u]:
                continue
            s = 0.0
            c = 0.0
            for i in range(spans.shape[0]):
                y = v + i - r
                if y < 0 or y >= H:
                    continue
                w = spans[i]
                lo = max(u - w, 0)
                hi = min(u + w + 1, W)
                s += C[y, hi] - C[y, lo]
                c += N[y, hi] - N[y, lo]
            out[v, u] = s / c
    return out


def _disc_mean_numpy(vals, valid, spans):
    H, W = vals.shape
    r = (spans.shape[0] - 1) // 2
    C = np.zeros((H, W + 1))
    C[:, 1:] = np.cumsum(vals, axis=1)
    N = np.zeros((H, W + 1))
    N[:, 1:] = np.cumsum(valid.astype(np.float64), axis=1)
    uu = np.arange(W)
    s = np.zeros((H, W))
    c = np.zeros((H, W))
    for i in range(spans.shape[0]):
        dy = i - r
        w = spans[i]
        lo = np.maximum(uu - w, 0)
        hi = np.minimum(uu + w + 1, W)
        ys = np.arange(H) + dy
        inside = (ys >= 0) & (ys < H)
        yc = np.clip(ys, 0, H - 1)
        ds = C[yc][:, hi] - C[yc][:, lo]
        dc = N[yc][:, hi] - N[yc][:, lo]
        s[inside] += ds[inside]
        c[inside] += dc[inside]
    out = np.zeros((H, W))
    out[valid] = s[valid] / c[valid]
    return out


def disc_spans(radius: int) -> np.ndarray:
    """Half-width of each row of a Euclidean disc, rows ``-radius..radius``."""
    r = int(radius)
    return np.array([int(math.floor(math.sqrt(r * r - dy * dy))) for dy in range(-r, r + 1)], dtype=np.int64)


@njit
def _select_discrete_numba(L, R, d, valid, h, search, lo_band, hi_band, eta, eps, vol, vol_lo):
    H, W = L.shape
    o = np.zeros((H, W))
    n = ((2 * h + 1) * (2 * h + 1) + 1) // 2
    nvol = vol.shape[0]
    for v in range(H):
        for u in range(W):
            if not valid[v, u]:
                continue
            dv = d[v, u]
            c0 = max(math.ceil(dv - search), lo_band)
            c1 = min(math.floor(dv + search), hi_band)
            inside = v >= h and v < H - h and u >= h and u < W - h
            best = np.inf
            best_c = c0
            for c in range(c0, c1 + 1):
                z = np.nan
                if inside:
                    i = c - vol_lo
                    if 0 <= i < nvol:
                        z = vol[i, v, u]
                    else:
                        sx, sxx = _window_sums(L, v, u, h)
                        z = _zncc_at(L, R, v, u, c, h, n, sx, sxx)
                if z > eps:
                    f = 1.0 / z
                else:
                    f = 1.0 / eps
                diff = c - dv
                cost = f + eta * (diff * diff)
                if cost < best:
                    best = cost
                    best_c = c
            o[v, u] = best_c
    return o


def _zncc_direct(L, R, v, u, d, h):
    H, W = L.shape
    if v < h or v >= H - h or u < h or u >= W - h or u - d - h < 0 or u - d + h >= W:
        return np.nan
    m = chessboard_mask(2 * h + 1)
    a = L[v - h : v + h + 1, u - h : u + h + 1][m]
    b = R[v - h : v + h + 1, u - d - h : u - d + h + 1][m]
    n = float(a.size)
    return _zncc_from_sums(
        n, float(a.sum()), float(b.sum()), float((a * a).sum()), float((b * b).sum()), float((a * b).sum())
    )


def _select_discrete_numpy(L, R, d, valid, h, search, lo_band, hi_band, eta, eps, vol, vol_lo):
    H, W = L.shape
    c0 = np.maximum(np.ceil(d - search), lo_band)
    c1 = np.minimum(np.floor(d + search), hi_band)
    best = np.full((H, W), np.inf)
    best_c = c0.copy()
    vv, uu = np.nonzero(valid)
    for k in range(2 * search + 1):
        c = c0 + k
        active = valid & (c <= c1)
        if not active.any():
            break
        idx = (c[vv, uu] - vol_lo).astype(np.int64)
        z = np.full((H, W), np.nan)
        ok = (idx >= 0) & (idx < vol.shape[0])
        zz = np.full(idx.shape, np.nan)
        zz[ok] = vol[idx[ok], vv[ok], uu[ok]]
        for j in np.nonzero(~ok & active[vv, uu])[0]:
            zz[j] = _zncc_direct(L, R, int(vv[j]), int(uu[j]), int(c[vv[j], uu[j]]), h)
        z[vv, uu] = zz
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(z > eps, 1.0 / z, 1.0 / eps)
        diff = c - d
        cost = f + eta * (diff * diff)
        better = active & (cost < best)
        best[better] = cost[better]
        best_c[better] = c[better]
    return np.where(valid, best_c, 0.0)


def _volume_band(o, valid, params, lo_band, hi_band):
    """Disparity range worth tabulating: the discrete values plus a margin."""
    vals = o[valid]
    margin = 2 * params.refine_search + 2
    lo = max(lo_band, int(math.floor(vals.min())) - margin)
    hi = min(hi_band, int(math.ceil(vals.max())) + margin)
    return lo, hi


def refine_trace(dmap: DisparityMap, left, right, params: StereoParams = StereoParams()):
    """Run the refinement, yielding ``(o, d)`` after every iteration.

    Each iteration: ``d = mean(o)`` over the smoothing disc, the anti-shrink
    correction ``b = d - alpha*o - (1 - alpha)*d_prev`` is computed and
    ``d -= mean(b)``; then each ``o`` is re-chosen among integers within
    ``refine_search`` of ``d`` by minimizing ``1/max(zncc, eps) + eta*(o - d)^2``.
    ``d`` is clamped to ``[d_min - refine_search, d_max + refine_search]``.
    """
    L = _as_int_image(left)
    R = _as_int_image(right)
    valid = np.ascontiguousarray(dmap.valid)
    o = np.where(valid, dmap.disparity, 0.0).astype(np.float64)
    if not valid.any():
        return
    lo_band = params.d_min - params.refine_search
    hi_band = params.d_max + params.refine_search
    spans = disc_spans(params.smoothing_radius)
    vol_lo, vol_hi = _volume_band(o, valid, params, lo_band, hi_band)
    vol = dispatch(_zncc_volume_numba, _zncc_volume_numpy)(L, R, params.half, vol_lo, vol_hi)
    mean = dispatch(_disc_mean_numba, _disc_mean_numpy)
    select = dispatch(_select_discrete_numba, _select_discrete_numpy)
    alpha = params.alpha
    d_prev = o.copy()
    for _ in range(params.refine_iterations):
        d1 = mean(o, valid, spans)
        b = np.where(valid, d1 - alpha * o - (1.0 - alpha) * d_prev, 0.0)
        d = d1 - mean(b, valid, spans)
        d = np.where(valid, np.clip(d, lo_band, hi_band), 0.0)
        o = select(
            L, R, d, valid, params.half, params.refine_search, lo_band, hi_band, params.eta_smooth, ZNCC_EPS, vol, vol_lo
        )
        d_prev = d
        yield o, d


def refine_disparities(dmap: DisparityMap, left, right, params: StereoParams = StereoParams()) -> DisparityMap:
    """Smooth discrete disparities into continuous ones while re-matching them.

    The validity mask is fixed; returns the continuous disparities of the last
    iteration (see :func:`refine_trace` for the update rule).
    """
    d = np.where(dmap.valid, dmap.disparity, 0.0).astype(np.float64)
    for _, d in refine_trace(dmap, left, right, params):
        pass
    return DisparityMap(d, dmap.valid.copy())


def stereo_stage(left, right, params: StereoParams = StereoParams()) -> DisparityMap:
    """Matching, cleanup and refinement in sequence."""
    raw = compute_disparity(left, right, params)
    clean = cleanup_pass(raw, params)
    return refine_disparities(clean, left, right, params)


# --------------------------------------------------------------------------
# point cloud


@njit
def _moments_numba(P, valid, h):
    H, W = valid.shape
    cnt = np.zeros((H, W))
    C = np.zeros((H, W, 3, 3))
    for v in range(H):
        for u in range(W):
            if not valid[v, u]:
                continue
            n = 0
            m0 = m1 = m2 = 0.0
            for y in range(max(0, v - h), min(H, v + h + 1)):
                for x in range(max(0, u - h), min(W, u + h + 1)):
                    if valid[y, x]:
                        n += 1
                        m0 += P[y, x, 0]
                        m1 += P[y, x, 1]
                        m2 += P[y, x, 2]
            m0 /= n
            m1 /= n
            m2 /= n
            c00 = c01 = c02 = c11 = c12 = c22 = 0.0
            for y in range(max(0, v - h), min(H, v + h + 1)):
                for x in range(max(0, u - h), min(W, u + h + 1)):
                    if valid[y, x]:
                        a = P[y, x, 0] - m0
                        b = P[y, x, 1] - m1
                        c = P[y, x, 2] - m2
                        c00 += a * a
                        c01 += a * b
                        c02 += a * c
                        c11 += b * b
                        c12 += b * c
                        c22 += c * c
            cnt[v, u] = n
            C[v, u, 0, 0] = c00
            C[v, u, 0, 1] = C[v, u, 1, 0] = c01
            C[v, u, 0, 2] = C[v, u, 2, 0] = c02
            C[v, u, 1, 1] = c11
            C[v, u, 1, 2] = C[v, u, 2, 1] = c12
            C[v, u, 2, 2] = c22
    return cnt, C


def _moments_numpy(P, valid, h):
    """Neighbour count and scatter matrix per pixel from shifted raw moments."""
    H, W = valid.shape
    Pm = np.where(valid[..., None], P, 0.0)
    cnt = np.zeros((H, W))
    S = np.zeros((H, W, 3))
    SS = np.zeros((H, W, 3, 3))
    for dy in range(-h, h + 1):
        for dx in range(-h, h + 1):
            vs = _shift(valid, dx, dy, False)
            ps = np.stack([_shift(Pm[..., i], dx, dy, 0.0) for i in range(3)], axis=-1)
            cnt += vs
            S += ps
            SS += ps[..., :, None] * ps[..., None, :]
    m = S / np.maximum(cnt, 1)[..., None]
    return cnt, SS - cnt[..., None, None] * (m[..., :, None] * m[..., None, :])


def _normals(P, valid, h, min_count):
    """Smallest-eigenvector plane normal per valid pixel, facing the camera.

    Falls back to the reversed view ray when fewer than ``min_count``
    neighbours are valid or the neighbourhood is degenerate.
    """
    N = np.zeros(P.shape)
    vs, us = np.nonzero(valid)
    if len(vs) == 0:
        return N
    cnt, C = dispatch(_moments_numba, _moments_numpy)(P, valid, h)
    px = P[vs, us]
    fallback = -px / np.linalg.norm(px, axis=1, keepdims=True)
    ok = cnt[vs, us] >= min_count
    w, V = np.linalg.eigh(C[vs, us])
    ok &= w[:, 1] > 1e-12 * np.maximum(w[:, 2], 1e-300)
    n = V[:, :, 0]
    flip = np.sum(n * px, axis=1) > 0
    n[flip] = -n[flip]
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    N[vs, us] = np.where(ok[:, None], n, fallback)
    return N


def disparity_to_cloud(dmap: DisparityMap, color, rig: StereoRig, normal_window: int = 7) -> StereoCloud:
    """Back-project valid positive disparities; fit a plane per pixel for its normal."""
    k = rig.intrinsics
    H, W = dmap.disparity.shape
    valid = dmap.valid & (dmap.disparity > 0)
    with np.errstate(divide="ignore"):
        z = np.where(valid, k.focal_x * rig.baseline / np.where(valid, dmap.disparity, 1.0), 0.0)
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    P = np.stack([z * (uu - k.center_x) / k.focal_x, z * (vv - k.center_y) / k.focal_y, z], axis=-1)
    P[~valid] = 0.0
    P = np.ascontiguousarray(P)
    N = _normals(P, np.ascontiguousarray(valid), normal_window // 2, 6)
    if color is None:
        colors = np.zeros((H, W, 3), dtype=np.uint8)
    else:
        colors = np.asarray(color, dtype=np.uint8)
        if colors.ndim == 2:
            colors = np.repeat(colors[..., None], 3, axis=2)
    return StereoCloud(P, N, colors, valid)


def with_params(params: StereoParams, **kw) -> StereoParams:
    return replace(params, **kw)
