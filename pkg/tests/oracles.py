"""Brute-force reference implementations used as test oracles.

Everything here is written for clarity, not speed: plain loops over pixels,
no integral images, no vectorised tricks shared with the package.
"""

import math

import numpy as np

RAYS = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)]


# ---------------------------------------------------------------- stereo


def chessboard_samples(patch):
    n = patch.shape[0]
    h = n // 2
    y, x = np.mgrid[0:n, 0:n]
    return patch[(y - h + x - h) % 2 == 0].astype(float)


def naive_zncc(a, b):
    a = chessboard_samples(a)
    b = chessboard_samples(b)
    a = a - a.mean()
    b = b - b.mean()
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0 or nb == 0:
        return None
    return float(a @ b) / (na * nb)


def naive_disparity(left, right, window, d_min, d_max, min_zncc):
    """Exhaustive matcher: full candidate range must fit, first maximum wins."""
    H, W = left.shape
    h = window // 2
    disp = np.zeros((H, W))
    valid = np.zeros((H, W), dtype=bool)
    for v in range(h, H - h):
        for u in range(h, W - h):
            if u - d_max - h < 0 or u - d_min + h > W - 1:
                continue
            lp = left[v - h : v + h + 1, u - h : u + h + 1]
            best, best_d = None, None
            for d in range(d_min, d_max + 1):
                rp = right[v - h : v + h + 1, u - d - h : u - d + h + 1]
                z = naive_zncc(lp, rp)
                if z is None:
                    continue
                if best is None or z > best:
                    best, best_d = z, d
            if best is not None and best >= min_zncc:
                disp[v, u] = best_d
                valid[v, u] = True
    return disp, valid


def naive_remove_outliers(D, valid, radius, thr):
    H, W = D.shape
    out = np.zeros_like(valid)
    for v in range(H):
        for u in range(W):
            if not valid[v, u]:
                continue
            for dx, dy in RAYS:
                path = [(u + s * dx, v + s * dy) for s in range(radius + 1)]
                if not all(0 <= x < W and 0 <= y < H and valid[y, x] for x, y in path):
                    continue
                vals = [D[y, x] for x, y in path]
                if all(abs(vals[i + 1] - vals[i]) <= thr for i in range(radius)):
                    out[v, u] = True
                    break
    return out


def naive_fill_radial(D, valid, radius, min_support):
    H, W = D.shape
    outD, outV = D.copy(), valid.copy()
    for v in range(H):
        for u in range(W):
            if valid[v, u]:
                continue
            num = den = 0.0
            hits = 0
            for dx, dy in RAYS:
                for s in range(1, radius + 1):
                    x, y = u + s * dx, v + s * dy
                    if not (0 <= x < W and 0 <= y < H):
                        break
                    if valid[y, x]:
                        w = 1.0 / (s * math.hypot(dx, dy))
                        num += D[y, x] * w
                        den += w
                        hits += 1
                        break
            if hits and hits >= min_support:
                outD[v, u] = num / den
                outV[v, u] = True
    return outD, outV


def naive_fill_disc(D, valid, radius, min_support):
    H, W = D.shape
    outD, outV = D.copy(), valid.copy()
    for v in range(H):
        for u in range(W):
            if valid[v, u]:
                continue
            num = den = 0.0
            hits = 0
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    if (dx == 0 and dy == 0) or dx * dx + dy * dy > radius * radius:
                        continue
                    x, y = u + dx, v + dy
                    if 0 <= x < W and 0 <= y < H and valid[y, x]:
                        w = 1.0 / math.sqrt(dx * dx + dy * dy)
                        num += D[y, x] * w
                        den += w
                        hits += 1
            if hits and hits >= min_support:
                outD[v, u] = num / den
                outV[v, u] = True
    return outD, outV


def naive_cleanup(D, valid, iterations, r0, dr, thr, radial_r, radial_support, disc_r, disc_fraction):
    n_disc = sum(
        1 for dy in range(-disc_r, disc_r + 1) for dx in range(-disc_r, disc_r + 1)
        if (dx or dy) and dx * dx + dy * dy <= disc_r * disc_r
    )
    disc_support = math.ceil(disc_fraction * n_disc)
    for k in range(iterations):
        valid = naive_remove_outliers(D, valid, r0 + k * dr, thr)
        D = np.where(valid, D, 0.0)
        D, valid = naive_fill_radial(D, valid, radial_r, radial_support)
        D, valid = naive_fill_disc(D, valid, disc_r, disc_support)
    return D, valid


def spike_field(rng, H, W, spike_fraction=0.2, hole_fraction=0.05):
    """Smooth ramp with random spikes and holes."""
    yy, xx = np.mgrid[0:H, 0:W]
    D = 20 + 0.3 * xx + 0.2 * yy + rng.uniform(-0.5, 0.5, (H, W))
    spikes = rng.random((H, W)) < spike_fraction
    D[spikes] += rng.choice([-1, 1], spikes.sum()) * rng.uniform(4, 15, spikes.sum())
    valid = rng.random((H, W)) >= hole_fraction
    return np.where(valid, D, 0.0), valid


# ---------------------------------------------------------------- features


BRESENHAM16 = [
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
]


def naive_segment_test(img, u, v, t, arc=9):
    c = int(img[v, u])
    ring = [int(img[v + dy, u + dx]) for dx, dy in BRESENHAM16]
    for sign in (1, -1):
        flags = [sign * (p - c) > t for p in ring]
        run = 0
        for f in flags + flags:
            run = run + 1 if f else 0
            if run >= arc:
                return True
    return False


def naive_corner_mask(img, t):
    H, W = img.shape
    m = np.zeros((H, W), dtype=bool)
    for v in range(3, H - 3):
        for u in range(3, W - 3):
            m[v, u] = naive_segment_test(img, u, v, t)
    return m


def naive_hamming(a, b):
    return sum(bin(int(x) ^ int(y)).count("1") for x, y in zip(a, b))


def naive_mutual_nn(da, db, max_hamming):
    """Mutual nearest neighbours; ties resolved to the lower index."""
    if len(da) == 0 or len(db) == 0:
        return []
    D = np.array([[naive_hamming(x, y) for y in db] for x in da])
    pairs = []
    for i in range(len(da)):
        j = int(np.argmin(D[i]))
        if int(np.argmin(D[:, j])) == i and D[i, j] <= max_hamming:
            pairs.append((i, j, int(D[i, j])))
    return pairs


def naive_vote_priority(displacements, bin_size):
    bins = [(math.floor(du / bin_size), math.floor(dv / bin_size)) for du, dv in displacements]
    pri = []
    for bx, by in bins:
        pri.append(sum(1 for cx, cy in bins if abs(cx - bx) <= 1 and abs(cy - by) <= 1))
    return pri


# ---------------------------------------------------------------- pnp / refine


def random_rotation(rng, max_angle=math.pi):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    ang = rng.uniform(0, max_angle)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(ang) * K + (1 - math.cos(ang)) * K @ K


def rotation_error_deg(Ra, Rb):
    c = (np.trace(Ra @ Rb.T) - 1) / 2
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def tukey_rho(r, c):
    if abs(r) <= c:
        return c * c / 6 * (1 - (1 - (r / c) ** 2) ** 3)
    return c * c / 6


def central_difference(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    J = np.zeros((f0.size, x.size))
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        J[:, k] = (np.asarray(f(x + e)) - np.asarray(f(x - e))).ravel() / (2 * h)
    return J


def kabsch_ate(est, gt):
    """RMSE of camera centres after the best rigid alignment of est onto gt."""
    est = np.asarray(est, float)
    gt = np.asarray(gt, float)
    me, mg = est.mean(0), gt.mean(0)
    A = (gt - mg).T @ (est - me)
    U, _, Vt = np.linalg.svd(A)
    S = np.diag([1, 1, np.sign(np.linalg.det(U @ Vt))])
    R = U @ S @ Vt
    aligned = (est - me) @ R.T + mg
    return float(np.sqrt(np.mean(np.sum((aligned - gt) ** 2, axis=1))))
