"""Robust pose from 3D-2D matches: control-point PnP with dynamic re-matching.

For a control match ``o`` and any other match ``i`` with ``S_i = X_i - X_o``
the camera-frame geometry reads ``lambda_i x_i = x_o + mu R S_i`` where ``x``
are homogeneous pixel rays ``[u - cx, (v - cy) fx/fy, fx]``, ``lambda_i`` is
the depth of ``i`` relative to the control point and ``mu`` the inverse
control depth (times the focal length). The weighted objective

    f(R, mu, lambda) = sum_i w_i |lambda_i x_i - x_o - mu R S_i|^2

is minimized block-wise: lambda in closed form, then (R, mu) jointly by a
weighted Procrustes step and a scalar least squares. Weights are re-derived
from reprojection errors after every sweep: a point within ``H`` pixels
gets full weight and one at ``e > H`` is scaled by ``H / e`` (either
directly or multiplied onto its previous weight, see ``reweight_step``).
Once the static phase has converged, nearby unmatched map points are pulled
in as extra, damped candidate matches.

Control hypotheses are tried in histogram-vote priority order; the first
one reaching ``min_inliers`` wins and is refitted on its consensus set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .core import CameraIntrinsics, RigidPose


class DegenerateGeometryError(ValueError):
    """All offsets ``S_i`` are collinear: the rotation is not observable."""


@dataclass(frozen=True)
class PnPParams:
    inlier_threshold: float = 5.0  # H, pixels
    eta: float = 2.0  # candidate gate is eta * H
    ramp: int = 5  # T, iterations until a candidate reaches full weight
    max_iters: int = 100
    tol: float = 1e-6
    max_control_trials: int = 20
    min_inliers: int = 20
    dynamic: bool = True
    weight_rule: str = "cumulative"  # or "direct"
    free_control: bool = False  # re-estimate the control ray's pixel as its own block
    refit_iters: int = 1000  # block sweeps for the final consensus refit
    refit_rounds: int = 3
    extrapolate: bool = True  # safeguarded over-step after each sweep


@dataclass
class PnPProblem:
    """Matches between stored 3D points and current-frame pixels.

    ``stored_points``/``frame_points`` are the full pools the dynamic update
    searches (defaulting to the matched points themselves);
    ``match_stored[i]``/``match_frame[i]`` locate match ``i`` in them.
    """

    world_points: np.ndarray  # (N, 3)
    image_points: np.ndarray  # (N, 2)
    intrinsics: CameraIntrinsics
    weights: np.ndarray = None
    priority: np.ndarray = None  # match indices, best first
    stored_points: np.ndarray = None  # (M, 3)
    frame_points: np.ndarray = None  # (F, 2)
    match_stored: np.ndarray = None
    match_frame: np.ndarray = None
    prior: RigidPose | None = None  # previous camera pose; identity when the world is that camera

    def __post_init__(self):
        self.world_points = np.asarray(self.world_points, dtype=np.float64).reshape(-1, 3)
        self.image_points = np.asarray(self.image_points, dtype=np.float64).reshape(-1, 2)
        n = len(self.world_points)
        if len(self.image_points) != n:
            raise ValueError("world and image point counts differ")
        self.weights = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        self.priority = np.arange(n) if self.priority is None else np.asarray(self.priority, dtype=np.int64)
        if len(self.weights) != n:
            raise ValueError("weights length mismatch")
        if sorted(self.priority.tolist()) != list(range(n)):
            raise ValueError("priority must be a permutation of the match indices")
        if self.stored_points is None:
            self.stored_points = self.world_points
            self.match_stored = np.arange(n)
        if self.frame_points is None:
            self.frame_points = self.image_points
            self.match_frame = np.arange(n)
        self.stored_points = np.asarray(self.stored_points, dtype=np.float64).reshape(-1, 3)
        self.frame_points = np.asarray(self.frame_points, dtype=np.float64).reshape(-1, 2)
        self.match_stored = np.asarray(self.match_stored, dtype=np.int64)
        self.match_frame = np.asarray(self.match_frame, dtype=np.int64)
        if len(self.match_stored) != n or len(self.match_frame) != n:
            raise ValueError("match index arrays must have one entry per match")

    def __len__(self):
        return len(self.world_points)


@dataclass
class DynamicCandidates:
    feature: np.ndarray  # frame-feature index
    stored: np.ndarray  # stored-point index
    error: np.ndarray  # reprojection error, pixels
    base_weight: np.ndarray  # min(H/e, 1)
    damping: np.ndarray  # min((k - k0)/T, 1)
    weight: np.ndarray  # after row normalization
    match_weight: np.ndarray  # original-match weights after row normalization

    @classmethod
    def empty(cls, match_weight):
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return cls(zi, zi, z, z, z, z, np.asarray(match_weight, dtype=np.float64).copy())


@dataclass
class PnPSolution:
    pose: RigidPose
    scale: float  # mu
    depths: np.ndarray  # lambda per match
    inliers: np.ndarray  # bool per match
    errors: np.ndarray  # reprojection error per match, pixels
    weights: np.ndarray  # per match after the last update
    control: int
    converged: bool
    iterations: int
    candidates: DynamicCandidates | None = None
    tracking_failure: bool = False
    trials: int = 1
    history: list = field(default_factory=list)

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


# --------------------------------------------------------------------------
# building blocks


def rays(points_uv, k: CameraIntrinsics) -> np.ndarray:
    """Homogeneous pixel rays ``[u - cx, (v - cy) fx / fy, fx]``; camera point = (z / fx) * ray."""
    p = np.asarray(points_uv, dtype=np.float64).reshape(-1, 2)
    return np.stack(
        [p[:, 0] - k.center_x, (p[:, 1] - k.center_y) * k.focal_x / k.focal_y, np.full(len(p), k.focal_x)], axis=1
    )


def reweight(errors, H: float = 5.0) -> np.ndarray:
    """Robust weights: 1 within ``H`` pixels, ``H / e`` beyond."""
    e = np.asarray(errors, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(e <= H, 1.0, H / e)


def reweight_step(prev, errors, H: float = 5.0, rule: str = "cumulative") -> np.ndarray:
    """Next robust factor from the current errors.

    ``direct`` assigns ``reweight(e)``. ``cumulative`` multiplies the previous
    factor by ``H / e`` and caps at 1, so a point that stays far off keeps
    losing weight while a point that comes back within ``H`` recovers.
    """
    if rule == "direct":
        return reweight(errors, H)
    if rule != "cumulative":
        raise ValueError(f"unknown weight rule {rule!r}")
    e = np.asarray(errors, dtype=np.float64)
    with np.errstate(divide="ignore"):
        ratio = np.where(e > 0, H / e, np.inf)
    return np.minimum(1.0, np.asarray(prev, dtype=np.float64) * ratio)


def reprojection_errors(pose: RigidPose, world, uv, k: CameraIntrinsics) -> np.ndarray:
    """Pixel distance between observations and projections; ``inf`` behind the camera."""
    Xc = pose.apply(np.asarray(world, dtype=np.float64).reshape(-1, 3))
    z = Xc[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    u = k.center_x + k.focal_x * Xc[:, 0] / zs
    v = k.center_y + k.focal_y * Xc[:, 1] / zs
    e = np.hypot(u - uv[:, 0], v - uv[:, 1])
    return np.where(ok, e, np.inf)


def objective(x, xo, S, w, R, mu, lam) -> float:
    r = lam[:, None] * x - xo[None, :] - mu * (S @ R.T)
    return float(np.sum(w * np.sum(r * r, axis=1)))


def update_depths(x, xo, S, R, mu) -> np.ndarray:
    """Exact minimizer over each lambda_i given R and mu."""
    target = xo[None, :] + mu * (S @ R.T)
    return np.sum(x * target, axis=1) / np.sum(x * x, axis=1)


def update_rotation_scale(x, xo, S, w, lam, mu_prev=1.0):
    """Exact joint minimizer over (R, mu > 0) given lambda."""
    a = lam[:, None] * x - xo[None, :]
    M = (w[:, None] * a).T @ S
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    num = float(np.sum(w * np.sum(a * (S @ R.T), axis=1)))
    den = float(np.sum(w * np.sum(S * S, axis=1)))
    mu = num / den if den > 0 and num > 0 else mu_prev
    return R, mu


def update_control(x, S, w, lam, R, mu, f) -> np.ndarray:
    """Exact minimizer over the pixel part of ``x_o`` (third component stays ``f``)."""
    b = lam[:, None] * x - mu * (S @ R.T)
    xo = np.sum(w[:, None] * b, axis=0) / np.sum(w)
    xo[2] = f
    return xo


def extrapolate_step(x, S, w, prev, cur, beta: float):
    """Try continuing the last sweep's step by ``beta``; keep it only if the objective drops.

    ``prev`` and ``cur`` are ``(R, mu, xo)`` triples. Returns the accepted
    triple and the next ``beta``.
    """
    R0, mu0, xo0 = prev
    R1, mu1, xo1 = cur
    base = objective(x, xo1, S, w, R1, mu1, update_depths(x, xo1, S, R1, mu1))
    d = Rotation.from_matrix(R1 @ R0.T).as_rotvec()
    Re = Rotation.from_rotvec(beta * d).as_matrix() @ R1
    mue = mu1 + beta * (mu1 - mu0)
    xoe = xo1 + beta * (xo1 - xo0)
    if mue > 0:
        cost = objective(x, xoe, S, w, Re, mue, update_depths(x, xoe, S, Re, mue))
        if cost < base:
            return (Re, mue, xoe), min(2.0 * beta, 64.0)
    return cur, 1.0


def check_rank(S, tol: float = 1e-9) -> None:
    if len(S) < 2:
        raise DegenerateGeometryError("need at least two offset vectors")
    s = np.linalg.svd(S, compute_uv=False)
    if s[0] == 0 or s[1] <= tol * s[0]:
        raise DegenerateGeometryError("world points are collinear with the control point")


def _pose_from(R, mu, xo, Xo, k) -> RigidPose:
    t = xo / mu - R @ Xo  # camera control point is (1/mu) x_o in fx-scaled units
    return RigidPose.from_matrix(R, t)


def _pose_change(a: RigidPose, b: RigidPose, scale: float) -> float:
    dR = np.linalg.norm(a.R - b.R)
    dt = np.linalg.norm(a.t - b.t) / max(scale, 1e-12)
    return float(dR + dt)


# --------------------------------------------------------------------------
# dynamic candidates


def damping(k: int, k0: int, T: int) -> float:
    return min(max(k - k0, 0) / T, 1.0)


def candidate_weight(e, H: float = 5.0, eta: float = 2.0):
    """Undamped candidate weight ``min(H/e, 1)`` or ``None`` outside the ``eta*H`` gate."""
    if not e < eta * H:
        return None
    return 1.0 if e <= 0 else min(H / e, 1.0)


def dynamic_match_update(
    pose: RigidPose,
    problem: PnPProblem,
    match_weights,
    k: int,
    first_seen: dict,
    params: PnPParams = PnPParams(),
) -> DynamicCandidates:
    """Collect map points projecting near frame features and normalize weight rows.

    A candidate pair (feature i, stored point j) is any pair other than an
    existing match whose reprojection error is below ``eta * H``; its weight is
    ``min(H/e, 1) * min((k - k0)/T, 1)`` with ``k0`` the iteration it was first
    seen (``first_seen`` is updated in place and forgets pairs that drop out).
    Every feature row holding a positive candidate weight is then normalized
    to sum to 1 together with that feature's original match weight.
    """
    H, eta, T = params.inlier_threshold, params.eta, params.ramp
    mw = np.asarray(match_weights, dtype=np.float64).copy()
    k_int = problem.intrinsics
    Xc = pose.apply(problem.stored_points)
    front = np.nonzero(Xc[:, 2] > 1e-9)[0]
    if len(front) == 0 or len(problem.frame_points) == 0:
        first_seen.clear()
        return DynamicCandidates.empty(mw)
    z = Xc[front, 2]
    proj = np.stack(
        [k_int.center_x + k_int.focal_x * Xc[front, 0] / z, k_int.center_y + k_int.focal_y * Xc[front, 1] / z], axis=1
    )
    tree = cKDTree(problem.frame_points)
    gate = eta * H
    hits = tree.query_ball_point(proj, r=gate)
    matched = set(zip(problem.match_frame.tolist(), problem.match_stored.tolist()))
    feat, stored, err = [], [], []
    for a, lst in enumerate(hits):
        j = int(front[a])
        for i in sorted(lst):
            if (i, j) in matched:
                continue
            e = float(np.hypot(*(problem.frame_points[i] - proj[a])))
            if e < gate:
                feat.append(i)
                stored.append(j)
                err.append(e)
    order = np.lexsort((np.array(stored, dtype=np.int64), np.array(feat, dtype=np.int64))) if feat else []
    feat = np.array(feat, dtype=np.int64)[order] if len(feat) else np.zeros(0, dtype=np.int64)
    stored = np.array(stored, dtype=np.int64)[order] if len(stored) else np.zeros(0, dtype=np.int64)
    err = np.array(err)[order] if len(err) else np.zeros(0)
    alive = set()
    damp = np.zeros(len(feat))
    for c, (i, j) in enumerate(zip(feat.tolist(), stored.tolist())):
        key = (i, j)
        alive.add(key)
        if key not in first_seen:
            first_seen[key] = k
        damp[c] = damping(k, first_seen[key], T)
    for key in list(first_seen):
        if key not in alive:
            del first_seen[key]
    with np.errstate(divide="ignore"):
        base = np.where(err <= 0, 1.0, np.minimum(H / np.where(err > 0, err, 1.0), 1.0))
    w = base * damp
    # row sums: candidate weights plus the feature's original match weight
    n_feat = len(problem.frame_points)
    cand_sum = np.bincount(feat, weights=w, minlength=n_feat)
    row = cand_sum.copy()
    np.add.at(row, problem.match_frame, mw)
    norm_rows = cand_sum > 0
    scale = np.ones(n_feat)
    scale[norm_rows] = 1.0 / row[norm_rows]
    return DynamicCandidates(feat, stored, err, base, damp, w * scale[feat], mw * scale[problem.match_frame])


# --------------------------------------------------------------------------
# solver


def _init_state(problem: PnPProblem):
    """Previous-camera prior: its rotation, and ``mu = f / median depth`` in its frame."""
    k = problem.intrinsics
    prior = problem.prior if problem.prior is not None else RigidPose.identity()
    depth = prior.apply(problem.world_points)[:, 2]
    pos = depth[depth > 0]
    med = float(np.median(pos)) if len(pos) else 1.0
    return prior.R, k.focal_x / med


def r1ppnp_core(
    problem: PnPProblem,
    o: int,
    params: PnPParams = PnPParams(),
    R0=None,
    mu0=None,
) -> PnPSolution:
    """Control-point PnP for a single hypothesis ``o`` with robust re-weighting.

    Phase 1 alternates block updates with robust re-weighting until the
    pose change drops below ``tol``; phase 2 (``params.dynamic``) continues
    with dynamic candidates until it converges again. Both phases share the
    ``max_iters`` budget.
    """
    n = len(problem)
    if n < 6:
        raise ValueError("need at least 6 matches")
    k = problem.intrinsics
    X = problem.world_points
    x = rays(problem.image_points, k)
    xo, Xo = x[o], X[o]
    S = X - Xo
    others = np.arange(n) != o
    check_rank(S[others])
    R, mu = _init_state(problem)
    if R0 is not None:
        R = np.asarray(R0, dtype=np.float64)
    if mu0 is not None:
        mu = float(mu0)
    base_w = problem.weights.copy()
    pose = _pose_from(R, mu, xo, Xo, k)
    err = reprojection_errors(pose, X, problem.image_points, k)
    robust = reweight(err, params.inlier_threshold)
    w = base_w * robust
    lam = update_depths(x, xo, S, R, mu)
    scale = max(float(np.median(np.linalg.norm(S, axis=1))), 1e-9)

    cand = None
    first_seen: dict = {}
    phase = 1
    converged = False
    it = 0
    history = []
    prev_change = np.inf
    beta = 1.0
    calm = 0  # consecutive sweeps below tol
    while it < params.max_iters:
        it += 1
        if cand is not None and len(cand.feature):
            xa = np.vstack([x, rays(problem.frame_points[cand.feature], k)])
            Sa = np.vstack([S, problem.stored_points[cand.stored] - Xo])
            wa = np.concatenate([cand.match_weight, cand.weight])
        else:
            xa, Sa = x, S
            wa = cand.match_weight if cand is not None else w
        prev = (R, mu, xo)
        lam_a = update_depths(xa, xo, Sa, R, mu)
        R, mu = update_rotation_scale(xa, xo, Sa, wa, lam_a, mu)
        if params.free_control:
            xo = update_control(xa, Sa, wa, lam_a, R, mu, k.focal_x)
        if params.extrapolate:
            (R, mu, xo), beta = extrapolate_step(xa, Sa, wa, prev, (R, mu, xo), beta)
        lam = update_depths(x, xo, S, R, mu)
        new_pose = _pose_from(R, mu, xo, Xo, k)
        step = _pose_change(new_pose, pose, scale)
        # sweeps contract linearly, so the remaining change is about step / (1 - rate)
        rate = min(step / prev_change, 0.999) if prev_change > 0 else 0.0
        change = step / (1.0 - rate)
        prev_change = step
        pose = new_pose
        err = reprojection_errors(pose, X, problem.image_points, k)
        robust = reweight_step(robust, err, params.inlier_threshold, params.weight_rule)
        w = base_w * robust
        history.append(objective(xa, xo, Sa, wa, R, mu, lam_a))
        if phase == 2:
            cand = dynamic_match_update(pose, problem, w, it, first_seen, params)
        calm = calm + 1 if change < params.tol else 0
        if calm >= 3:
            calm = 0
            if phase == 1 and params.dynamic:
                phase = 2
                prev_change = np.inf
                cand = dynamic_match_update(pose, problem, w, it, first_seen, params)
                continue
            if phase == 2 and cand is not None and np.any(cand.damping < 1.0):
                continue  # let ramping candidates settle
            converged = True
            break
    inl = err < params.inlier_threshold
    return PnPSolution(
        pose=pose,
        scale=mu,
        depths=lam,
        inliers=inl,
        errors=err,
        weights=cand.match_weight if cand is not None else w,
        control=o,
        converged=converged,
        iterations=it,
        candidates=cand,
        history=history,
    )


def refit_inliers(problem: PnPProblem, sol: PnPSolution, params: PnPParams = PnPParams()) -> PnPSolution:
    """Re-solve on the consensus set with unit weights and re-classify.

    The control ray becomes a free block anchored only by its own
    observation, so its pixel noise is averaged like every other point's.
    Repeats while the consensus set keeps changing.
    """
    k = problem.intrinsics
    p2 = replace(
        params, inlier_threshold=np.inf, max_iters=params.refit_iters, dynamic=False, free_control=True
    )
    for _ in range(params.refit_rounds):
        if sol.n_inliers < 6:
            return sol
        keep = sol.inliers.copy()
        keep[sol.control] = True
        idx = np.nonzero(keep)[0]
        sub = PnPProblem(problem.world_points[idx], problem.image_points[idx], k)
        o = int(np.nonzero(idx == sol.control)[0][0])
        try:
            s2 = r1ppnp_core(sub, o, p2, R0=sol.pose.R, mu0=sol.scale)
        except DegenerateGeometryError:
            return sol
        err = reprojection_errors(s2.pose, problem.world_points, problem.image_points, k)
        inl = err < params.inlier_threshold
        if inl.sum() < 0.9 * sol.n_inliers:
            return sol
        same = np.array_equal(inl, sol.inliers)
        X = problem.world_points
        Xo = X[sol.control]
        xo = s2.scale * s2.pose.apply(Xo)  # refitted control ray
        lam = update_depths(rays(problem.image_points, k), xo, X - Xo, s2.pose.R, s2.scale)
        sol = PnPSolution(
            pose=s2.pose, scale=s2.scale, depths=lam,
            inliers=inl, errors=err, weights=reweight(err, params.inlier_threshold), control=sol.control,
            converged=sol.converged and s2.converged, iterations=sol.iterations + s2.iterations,
            candidates=sol.candidates, trials=sol.trials, history=sol.history,
        )
        if same:
            break
    return sol


def dynamic_r1ppnp(problem: PnPProblem, params: PnPParams = PnPParams()) -> PnPSolution:
    """Try control hypotheses in priority order; first with enough inliers wins.

    Raises ``ValueError`` on an empty problem. When no hypothesis reaches
    ``min_inliers`` the best one is returned with ``tracking_failure`` set.
    """
    if len(problem) == 0:
        raise ValueError("empty PnP problem")
    best = None
    trials = 0
    for o in problem.priority[: params.max_control_trials]:
        o = int(o)
        trials += 1
        try:
            sol = r1ppnp_core(problem, o, params)
        except DegenerateGeometryError:
            continue
        sol.trials = trials
        if best is None or sol.n_inliers > best.n_inliers:
            best = sol
        if sol.n_inliers >= params.min_inliers:
            sol = refit_inliers(problem, sol, params)
            sol.trials = trials
            return sol
    if best is None:
        raise DegenerateGeometryError("no usable control hypothesis")
    best.tracking_failure = True
    best.trials = trials
    return best
