"""Corner features, binary descriptors, matching and displacement voting.

Corners come from the 16-pixel segment test (arc of at least 9), descriptors
are 256 seeded comparisons of box-smoothed samples without orientation
normalization, and matching is mutual-nearest-neighbour in Hamming distance.
:func:`histogram_vote` then ranks matches by how popular their image
displacement is, which orders the control-point hypotheses of the tracker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._accel import dispatch, njit

# Bresenham circle of radius 3, clockwise from the top, as (dx, dy)
CIRCLE = np.array(
    [
        (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
        (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
    ],
    dtype=np.int64,
)
ARC = 9
PATCH = 31
SAMPLE_SPAN = 13  # pair coordinates lie in [-13, 13]
SMOOTH = 2  # 5x5 box
BORDER = PATCH // 2 + 1
N_BITS = 256
PATTERN_SEED = 0x5EED


@dataclass(frozen=True)
class FeatureParams:
    max_count: int = 3000
    threshold: int = 20  # segment-test intensity margin
    max_hamming: int = 64
    bin_size: float = 10.0  # displacement voting bin, pixels

    def __post_init__(self):
        if self.max_count <= 0 or self.threshold <= 0 or self.max_hamming < 0 or self.bin_size <= 0:
            raise ValueError("feature parameters out of range")


def _make_pattern(seed: int = PATTERN_SEED) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pts = np.rint(rng.normal(0.0, PATCH / 5.0, size=(N_BITS, 4)))
    return np.clip(pts, -SAMPLE_SPAN, SAMPLE_SPAN).astype(np.int64)  # x1, y1, x2, y2


PATTERN = _make_pattern()


@dataclass
class Feature:
    position: np.ndarray  # (u, v) pixels
    descriptor: np.ndarray  # 32 bytes = 256 bits
    depth: float = math.nan
    world_point: np.ndarray | None = None


@dataclass
class FeatureSet:
    """Array-backed list of features; indexing yields :class:`Feature`."""

    positions: np.ndarray  # (N, 2) float64 (u, v)
    descriptors: np.ndarray  # (N, 32) uint8
    depth: np.ndarray = None  # (N,) mm, nan if unknown
    world_points: np.ndarray = None  # (N, 3), nan rows if unset

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=np.uint8).reshape(-1, N_BITS // 8)
        n = len(self.positions)
        if len(self.descriptors) != n:
            raise ValueError("positions and descriptors differ in length")
        if self.depth is None:
            self.depth = np.full(n, np.nan)
        if self.world_points is None:
            self.world_points = np.full((n, 3), np.nan)

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> Feature:
        wp = self.world_points[i]
        return Feature(self.positions[i], self.descriptors[i], float(self.depth[i]), None if np.isnan(wp).any() else wp)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def empty(cls) -> FeatureSet:
        return cls(np.zeros((0, 2)), np.zeros((0, N_BITS // 8), np.uint8))


# --------------------------------------------------------------------------
# corners


@njit
def _corner_scores_numba(img, t, circle, arc):
    H, W = img.shape
    score = np.zeros((H, W), dtype=np.int64)
    ring = np.zeros(16, dtype=np.int64)
    for v in range(3, H - 3):
        for u in range(3, W - 3):
            c = img[v, u]
            for k in range(16):
                ring[k] = img[v + circle[k, 1], u + circle[k, 0]]
            best = 0
            for sign in (1, -1):
                run = 0
                hit = False
                for k in range(32):
                    if sign * (ring[k % 16] - c) > t:
                        run += 1
                        if run >= arc:
                            hit = True
                            break
                    else:
                        run = 0
                if hit:
                    s = 0
                    for k in range(16):
                        e = sign * (ring[k] - c) - t
                        if e > 0:
                            s += e
                    if s > best:
                        best = s
            score[v, u] = best
    return score


def _corner_scores_numpy(img, t, circle, arc):
    H, W = img.shape
    score = np.zeros((H, W), dtype=np.int64)
    if H < 7 or W < 7:
        return score
    c = img[3 : H - 3, 3 : W - 3]
    ring = np.stack([img[3 + dy : H - 3 + dy, 3 + dx : W - 3 + dx] for dx, dy in circle])
    best = np.zeros_like(c)
    for sign in (1, -1):
        diff = sign * (ring - c[None])
        flag = diff > t
        ext = np.concatenate([flag, flag[: arc - 1]])
        hit = np.zeros(c.shape, dtype=bool)
        for k in range(16):
            hit |= ext[k : k + arc].all(axis=0)
        s = np.where(diff - t > 0, diff - t, 0).sum(axis=0)
        best = np.where(hit & (s > best), s, best)
    score[3 : H - 3, 3 : W - 3] = best
    return score


def corner_scores(img, threshold: int) -> np.ndarray:
    """Segment-test score per pixel (0 where not a corner).

    The score is the summed excess ``|I_p - I_c| - threshold`` over ring
    pixels on the side (brighter or darker) that formed the arc.
    """
    a = np.ascontiguousarray(np.asarray(img), dtype=np.int64)
    kernel = dispatch(_corner_scores_numba, _corner_scores_numpy)
    return kernel(a, int(threshold), CIRCLE, ARC)


def _nms3(score):
    """Keep pixels not beaten by any 3x3 neighbour; equal scores go to the earlier raster index."""
    H, W = score.shape
    keep = score > 0
    pad = np.zeros((H + 2, W + 2), dtype=score.dtype)
    pad[1:-1, 1:-1] = score
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            nb = pad[1 + dy : H + 1 + dy, 1 + dx : W + 1 + dx]
            earlier = dy < 0 or (dy == 0 and dx < 0)
            keep &= (nb < score) | ((nb == score) & (not earlier))
    return keep


def detect_corners(img, max_count: int = 3000, threshold: int = 20) -> np.ndarray:
    """Segment-test corners after 3x3 non-maximum suppression.

    Returns an ``(N, 2)`` int array of ``(u, v)`` sorted by score descending,
    ties in raster order, at most ``max_count`` rows.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    score = corner_scores(img, threshold)
    keep = _nms3(score)
    vs, us = np.nonzero(keep)
    s = score[vs, us]
    order = np.lexsort((vs * score.shape[1] + us, -s))[:max_count]
    return np.stack([us[order], vs[order]], axis=1).astype(np.int64)


# --------------------------------------------------------------------------
# descriptors


def _box_integral(img):
    a = np.asarray(img, dtype=np.int64)
    S = np.zeros((a.shape[0] + 1, a.shape[1] + 1), dtype=np.int64)
    S[1:, 1:] = a.cumsum(0).cumsum(1)
    return S


def describe(img, corners, max_count: int | None = None) -> FeatureSet:
    """Binary descriptors for corners at least ``BORDER`` pixels from the edge.

    Bit ``k`` is ``box(p1_k) < box(p2_k)`` with 5x5 box sums at the seeded
    pattern offsets; comparisons only, so any global intensity offset leaves
    the descriptor unchanged.
    """
    img = np.asarray(img)
    H, W = img.shape
    c = np.asarray(corners, dtype=np.int64).reshape(-1, 2)
    ok = (c[:, 0] >= BORDER) & (c[:, 0] < W - BORDER) & (c[:, 1] >= BORDER) & (c[:, 1] < H - BORDER)
    c = c[ok]
    if max_count is not None:
        c = c[:max_count]
    if len(c) == 0:
        return FeatureSet.empty()
    S = _box_integral(img)
    r = SMOOTH

    def box(x, y):
        return S[y + r + 1, x + r + 1] - S[y - r, x + r + 1] - S[y + r + 1, x - r] + S[y - r, x - r]

    u = c[:, 0:1]
    v = c[:, 1:2]
    a = box(u + PATTERN[None, :, 0], v + PATTERN[None, :, 1])
    b = box(u + PATTERN[None, :, 2], v + PATTERN[None, :, 3])
    bits = (a < b).astype(np.uint8)
    return FeatureSet(c.astype(np.float64), np.packbits(bits, axis=1))


def extract(img, max_count: int = 3000, threshold: int = 20) -> FeatureSet:
    """Detect then describe; keeps the ``max_count`` strongest describable corners."""
    corners = detect_corners(img, max_count=max(4 * max_count, max_count), threshold=threshold)
    return describe(img, corners, max_count=max_count)


# --------------------------------------------------------------------------
# matching

_POP8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


@njit
def _hamming_numba(A, B, pop):
    n, m = A.shape[0], B.shape[0]
    out = np.zeros((n, m), dtype=np.int64)
    for i in range(n):
        for j in range(m):
            s = 0
            for k in range(A.shape[1]):
                s += pop[A[i, k] ^ B[j, k]]
            out[i, j] = s
    return out


def _hamming_numpy(A, B, pop):
    out = np.zeros((len(A), len(B)), dtype=np.int64)
    step = 128
    for s in range(0, len(A), step):
        x = A[s : s + step, None, :] ^ B[None, :, :]
        out[s : s + step] = pop[x].sum(axis=2)
    return out


def hamming_matrix(A, B) -> np.ndarray:
    A = np.ascontiguousarray(A, dtype=np.uint8)
    B = np.ascontiguousarray(B, dtype=np.uint8)
    if len(A) == 0 or len(B) == 0:
        return np.zeros((len(A), len(B)), dtype=np.int64)
    return dispatch(_hamming_numba, _hamming_numpy)(A, B, _POP8)


@dataclass
class MatchSet:
    """Correspondences between feature lists ``a`` and ``b``.

    ``order`` positions are the priority ranks; a freshly matched set is in
    index order with rank ``i`` at row ``i``.
    """

    idx_a: np.ndarray
    idx_b: np.ndarray
    hamming: np.ndarray
    pts_a: np.ndarray  # (N, 2) pixel positions in frame a
    pts_b: np.ndarray
    weight: np.ndarray = None
    priority: np.ndarray = None  # histogram vote per match (0 before voting)
    rank: np.ndarray = field(default=None)

    def __post_init__(self):
        self.idx_a = np.asarray(self.idx_a, dtype=np.int64).reshape(-1)
        self.idx_b = np.asarray(self.idx_b, dtype=np.int64).reshape(-1)
        self.hamming = np.asarray(self.hamming, dtype=np.int64).reshape(-1)
        self.pts_a = np.asarray(self.pts_a, dtype=np.float64).reshape(-1, 2)
        self.pts_b = np.asarray(self.pts_b, dtype=np.float64).reshape(-1, 2)
        n = len(self.idx_a)
        if self.weight is None:
            self.weight = np.ones(n)
        if self.priority is None:
            self.priority = np.zeros(n, dtype=np.int64)
        if self.rank is None:
            self.rank = np.arange(n)
        if not (len(self.idx_b) == len(self.hamming) == len(self.pts_a) == len(self.pts_b) == n):
            raise ValueError("inconsistent match arrays")
        if len(np.unique(self.idx_a)) != n or len(np.unique(self.idx_b)) != n:
            raise ValueError("match indices must be unique per side")

    def __len__(self):
        return len(self.idx_a)

    @property
    def displacement(self) -> np.ndarray:
        return self.pts_b - self.pts_a

    def take(self, order) -> MatchSet:
        order = np.asarray(order, dtype=np.int64)
        return MatchSet(
            self.idx_a[order], self.idx_b[order], self.hamming[order], self.pts_a[order], self.pts_b[order],
            self.weight[order], self.priority[order], self.rank[order],
        )

    @classmethod
    def empty(cls) -> MatchSet:
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, np.zeros((0, 2)), np.zeros((0, 2)))


def match_features(a: FeatureSet, b: FeatureSet, max_hamming: int = 64) -> MatchSet:
    """Mutual nearest neighbours under Hamming distance (ties go to the lower index)."""
    if len(a) == 0 or len(b) == 0:
        return MatchSet.empty()
    D = hamming_matrix(a.descriptors, b.descriptors)
    j_of_i = np.argmin(D, axis=1)
    i_of_j = np.argmin(D, axis=0)
    i = np.arange(len(a))
    dist = D[i, j_of_i]
    keep = (i_of_j[j_of_i] == i) & (dist <= max_hamming)
    i = i[keep]
    j = j_of_i[keep]
    return MatchSet(i, j, dist[keep], a.positions[i], b.positions[j])


def histogram_vote(matches: MatchSet, bin_size: float = 10.0) -> MatchSet:
    """Rank matches by the vote count of their displacement bin and its 8 neighbours.

    Sort key: vote descending, then Hamming distance, then input position.
    Returns the reordered set with ``priority`` (vote) and ``rank`` filled in.
    """
    if bin_size <= 0:
        raise ValueError("bin_size must be positive")
    n = len(matches)
    if n == 0:
        return MatchSet.empty()
    bins = np.floor(matches.displacement / bin_size).astype(np.int64)
    uniq, inv, counts = np.unique(bins, axis=0, return_inverse=True, return_counts=True)
    lookup = {(int(x), int(y)): int(c) for (x, y), c in zip(uniq, counts)}
    votes = np.zeros(n, dtype=np.int64)
    for k, (bx, by) in enumerate(uniq):
        s = 0
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                s += lookup.get((int(bx) + dx, int(by) + dy), 0)
        votes[inv.reshape(-1) == k] = s
    order = np.lexsort((np.arange(n), matches.hamming, -votes))
    out = matches.take(order)
    out.priority = votes[order]
    out.rank = np.arange(n)
    return out


# --------------------------------------------------------------------------
# injected matches


def read_match_file(path) -> MatchSet:
    """Precomputed matches, one ``u1 v1 u2 v2`` line each (``#`` comments allowed)."""
    pa, pb = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 'u1 v1 u2 v2', got {line.strip()!r}")
            try:
                u1, v1, u2, v2 = (float(p) for p in parts)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value in {line.strip()!r}") from None
            pa.append((u1, v1))
            pb.append((u2, v2))
    n = len(pa)
    idx = np.arange(n)
    return MatchSet(idx, idx, np.zeros(n, dtype=np.int64), np.array(pa).reshape(-1, 2), np.array(pb).reshape(-1, 2))


def write_match_file(matches: MatchSet, path) -> None:
    with open(path, "w") as fh:
        for (u1, v1), (u2, v2) in zip(matches.pts_a, matches.pts_b):
            fh.write(f"{u1:.6g} {v1:.6g} {u2:.6g} {v2:.6g}\n")
