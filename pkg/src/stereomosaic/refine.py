"""Keyframe selection and windowed pose refinement.

The refinement cost over a window of frames is

    C = sum_obs |uv_obs - proj(R_f x_l + t_f)|^2 + beta^2 sum_icp r~_i^2

where the first term is the reprojection error of landmark observations and
the second a robust point-to-plane distance between the fused model and the
keyframe's own stereo cloud. ``r~ = sign(r) sqrt(2 rho(r))`` with Tukey's
``rho`` so ``r~^2 / 2`` is exactly the Tukey penalty of the plane distance.

Minimization alternates two Levenberg-Marquardt blocks per sweep: every free
landmark alone (3x3 systems), then every free pose alone (6x6 systems, the
keyframe's also carrying the ICP term). Both blocks are separable given the
other, so each variable carries its own damping and keeps its step only if
its own share of the cost strictly drops.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
from scipy import sparse

from .core import CameraIntrinsics, RigidPose, pose_difference, skew
from .fusion import SurfelCloud, rasterize
from .stereo import StereoCloud

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# keyframes


@dataclass(frozen=True)
class KeyframePolicy:
    min_matches: int = 50
    min_frame_gap: int = 10
    pose_threshold: float = 10.0

    def __post_init__(self):
        if self.min_matches <= 0 or self.min_frame_gap <= 0 or self.pose_threshold <= 0:
            raise ValueError("keyframe policy values must be positive")


def keyframe_decision(
    n_inliers: int, pose: RigidPose, last_keyframe_pose: RigidPose, frames_since: int, policy: KeyframePolicy = KeyframePolicy()
) -> bool:
    """Enough inliers, and either enough frames elapsed or enough motion."""
    if n_inliers < policy.min_matches:
        return False
    if frames_since >= policy.min_frame_gap:
        return True
    return pose_difference(pose, last_keyframe_pose) > policy.pose_threshold


@dataclass(frozen=True)
class LoopParams:
    """Re-matching of earlier keyframes that overlap the current one."""

    max_candidates: int = 3
    min_overlap: float = 0.25  # fraction of sampled sight rays

    def __post_init__(self):
        if self.max_candidates < 0 or not 0.0 <= self.min_overlap <= 1.0:
            raise ValueError("loop parameters out of range")


def _sample_grid(k: CameraIntrinsics, nx: int, ny: int):
    us = np.floor((np.arange(nx) + 0.5) * k.width / nx).astype(np.int64)
    vs = np.floor((np.arange(ny) + 0.5) * k.height / ny).astype(np.int64)
    uu, vv = np.meshgrid(us, vs)
    return uu.ravel(), vv.ravel()


def overlap_score(
    current: RigidPose, candidate: RigidPose, hits: np.ndarray, k: CameraIntrinsics, max_angle_deg: float = 60.0
) -> float:
    """Fraction of model hits (world points seen from ``current``) that ``candidate`` also sees.

    A hit counts if it projects inside the candidate image, in front of it,
    and the two viewing rays differ by less than ``max_angle_deg``.
    """
    if len(hits) == 0:
        return 0.0
    Xc = candidate.apply(hits)
    z = Xc[:, 2]
    zs = np.where(z > 0, z, 1.0)
    u = k.center_x + k.focal_x * Xc[:, 0] / zs
    v = k.center_y + k.focal_y * Xc[:, 1] / zs
    # same pixel footprint as the rasterizer: nearest pixel inside the image
    inside = (z > 0) & (u >= -0.5) & (u < k.width - 0.5) & (v >= -0.5) & (v < k.height - 0.5)
    a = hits - current.center
    b = hits - candidate.center
    cos = np.sum(a * b, axis=1) / np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-300)
    ok = inside & (cos > np.cos(np.radians(max_angle_deg)))
    return float(ok.mean())


def select_matching_keyframes(
    current_pose: RigidPose,
    history: list,
    model: SurfelCloud,
    k: CameraIntrinsics,
    max_candidates: int = 3,
    min_overlap: float = 0.25,
    grid: tuple[int, int] = (16, 12),
    exclude_last: bool = True,
) -> list:
    """Previous keyframes ranked by view overlap with the current pose.

    ``history`` holds ``(keyframe_id, pose)`` in creation order; the last
    entry is the preceding keyframe, already part of the window, and is
    skipped when ``exclude_last``. Sight rays are sampled on a grid of the
    current image and intersected with the model through its z-buffer.
    """
    pool = list(history[:-1] if exclude_last else history)
    if not pool or len(model) == 0:
        return []
    raster = rasterize(model, current_pose, k)
    uu, vv = _sample_grid(k, *grid)
    ids = raster.ids[vv, uu]
    hits = model.positions[ids[ids >= 0]]
    scored = []
    for order, (kid, pose) in enumerate(pool):
        s = overlap_score(current_pose, pose, hits, k)
        if s > 0 and s >= min_overlap:
            scored.append((-s, order, kid))
    scored.sort()
    return [kid for _, _, kid in scored[:max_candidates]]


# --------------------------------------------------------------------------
# window and residuals


@dataclass
class OptimizationWindow:
    """Frames, landmarks and observations of one refinement problem.

    ``keyframe`` is the slot of the current keyframe (the only pose with an
    ICP term); ``fixed_pose`` / ``fixed_landmark`` mark what stays untouched.
    """

    poses: list
    landmarks: np.ndarray  # (L, 3) world, mm
    obs_frame: np.ndarray  # (M,) pose slot
    obs_landmark: np.ndarray  # (M,) landmark slot
    obs_uv: np.ndarray  # (M, 2) pixels
    intrinsics: CameraIntrinsics
    keyframe: int = 0
    fixed_pose: np.ndarray = None
    fixed_landmark: np.ndarray = None
    frame_ids: list = None
    landmark_ids: np.ndarray = None

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64).reshape(-1, 3)
        self.obs_frame = np.asarray(self.obs_frame, dtype=np.int64).reshape(-1)
        self.obs_landmark = np.asarray(self.obs_landmark, dtype=np.int64).reshape(-1)
        self.obs_uv = np.asarray(self.obs_uv, dtype=np.float64).reshape(-1, 2)
        F, L = len(self.poses), len(self.landmarks)
        if self.fixed_pose is None:
            self.fixed_pose = np.zeros(F, dtype=bool)
        if self.fixed_landmark is None:
            self.fixed_landmark = np.zeros(L, dtype=bool)
        self.fixed_pose = np.asarray(self.fixed_pose, dtype=bool)
        self.fixed_landmark = np.asarray(self.fixed_landmark, dtype=bool)
        if self.frame_ids is None:
            self.frame_ids = list(range(F))
        if self.landmark_ids is None:
            self.landmark_ids = np.arange(L)
        if not (len(self.obs_landmark) == len(self.obs_uv) == len(self.obs_frame)):
            raise ValueError("observation arrays differ in length")
        if len(self.obs_frame) and (self.obs_frame.max() >= F or self.obs_landmark.max() >= L or self.obs_frame.min() < 0):
            raise ValueError("observation refers to a missing pose or landmark")
        if len(self.fixed_pose) != F or len(self.fixed_landmark) != L:
            raise ValueError("fixed flags must match the poses and landmarks")
        if not 0 <= self.keyframe < max(F, 1):
            raise ValueError("keyframe slot out of range")

    @classmethod
    def with_anchor(cls, poses, landmarks, obs_frame, obs_landmark, obs_uv, k, keyframe, anchor, **kw):
        """Window whose ``anchor`` slot (the last keyframe) and its landmarks are fixed."""
        obs_frame = np.asarray(obs_frame, dtype=np.int64)
        obs_landmark = np.asarray(obs_landmark, dtype=np.int64)
        fixed_pose = np.zeros(len(poses), dtype=bool)
        fixed_landmark = np.zeros(len(landmarks), dtype=bool)
        if anchor is not None:
            fixed_pose[anchor] = True
            fixed_landmark[obs_landmark[obs_frame == anchor]] = True
        return cls(list(poses), landmarks, obs_frame, obs_landmark, obs_uv, k, keyframe, fixed_pose, fixed_landmark, **kw)

    def copy(self) -> OptimizationWindow:
        return replace(
            self, poses=list(self.poses), landmarks=self.landmarks.copy(), fixed_pose=self.fixed_pose.copy(),
            fixed_landmark=self.fixed_landmark.copy(),
        )

    @property
    def n_params(self) -> int:
        return 6 * len(self.poses) + 3 * len(self.landmarks)


def _obs_geometry(window: OptimizationWindow, poses=None, landmarks=None):
    poses = window.poses if poses is None else poses
    X = window.landmarks if landmarks is None else landmarks
    R = np.stack([p.R for p in poses]) if poses else np.zeros((0, 3, 3))
    t = np.stack([p.t for p in poses]) if poses else np.zeros((0, 3))
    f, l = window.obs_frame, window.obs_landmark
    Xc = np.einsum("nij,nj->ni", R[f], X[l]) + t[f]
    return Xc, R[f]


def _project_obs(window: OptimizationWindow, Xc):
    k = window.intrinsics
    z = Xc[:, 2]
    valid = z > 1e-9
    zs = np.where(valid, z, 1.0)
    proj = np.stack([k.center_x + k.focal_x * Xc[:, 0] / zs, k.center_y + k.focal_y * Xc[:, 1] / zs], axis=1)
    return proj, valid, zs


def project_observations(window: OptimizationWindow) -> np.ndarray:
    """Predicted pixel of every observation (M, 2); rows behind the camera are NaN."""
    Xc, _ = _obs_geometry(window)
    proj, valid, _ = _project_obs(window, Xc)
    return np.where(valid[:, None], proj, np.nan)


def ba_blocks(window: OptimizationWindow, poses=None, landmarks=None):
    """Residuals ``uv_obs - proj`` (M, 2), validity, and Jacobian blocks.

    Returns ``(r, valid, J_pose (M, 2, 6), J_landmark (M, 2, 3))``; rows of
    observations behind their camera are zero and flagged invalid. Pose
    columns use the left perturbation ``[dt, dtheta]`` of ``RigidPose.retract``.
    """
    k = window.intrinsics
    Xc, R = _obs_geometry(window, poses, landmarks)
    proj, valid, z = _project_obs(window, Xc)
    r = np.where(valid[:, None], window.obs_uv - proj, 0.0)
    M = len(r)
    dproj = np.zeros((M, 2, 3))
    dproj[:, 0, 0] = k.focal_x / z
    dproj[:, 0, 2] = -k.focal_x * Xc[:, 0] / z**2
    dproj[:, 1, 1] = k.focal_y / z
    dproj[:, 1, 2] = -k.focal_y * Xc[:, 1] / z**2
    dXc = np.zeros((M, 3, 6))
    dXc[:, :, :3] = np.eye(3)
    sk = np.zeros((M, 3, 3))
    sk[:, 0, 1], sk[:, 0, 2] = -Xc[:, 2], Xc[:, 1]
    sk[:, 1, 0], sk[:, 1, 2] = Xc[:, 2], -Xc[:, 0]
    sk[:, 2, 0], sk[:, 2, 1] = -Xc[:, 1], Xc[:, 0]
    dXc[:, :, 3:] = -sk
    Jp = -np.einsum("nij,njk->nik", dproj, dXc)
    Jl = -np.einsum("nij,njk->nik", dproj, R)
    Jp[~valid] = 0.0
    Jl[~valid] = 0.0
    return r, valid, Jp, Jl


def ba_residuals(window: OptimizationWindow):
    """Stacked residual vector (2M,), sparse Jacobian (2M, 6F + 3L), validity (M,).

    Fixed poses and landmarks get identically zero columns.
    """
    r, valid, Jp, Jl = ba_blocks(window)
    M, F = len(r), len(window.poses)
    Jp = Jp * (~window.fixed_pose[window.obs_frame])[:, None, None]
    Jl = Jl * (~window.fixed_landmark[window.obs_landmark])[:, None, None]
    rows = np.repeat(np.arange(2 * M).reshape(M, 2), 1, axis=0)
    pr = np.repeat(rows[:, :, None], 6, axis=2)
    pc = (6 * window.obs_frame)[:, None, None] + np.arange(6)[None, None, :]
    pc = np.broadcast_to(pc, (M, 2, 6))
    lr = np.repeat(rows[:, :, None], 3, axis=2)
    lc = (6 * F + 3 * window.obs_landmark)[:, None, None] + np.arange(3)[None, None, :]
    lc = np.broadcast_to(lc, (M, 2, 3))
    J = sparse.csr_matrix(
        (np.concatenate([Jp.ravel(), Jl.ravel()]), (np.concatenate([pr.ravel(), lr.ravel()]), np.concatenate([pc.ravel(), lc.ravel()]))),
        shape=(2 * M, window.n_params),
    )
    return r.ravel(), J, valid


# --------------------------------------------------------------------------
# ICP


def tukey_rho(r, c: float = 5.0):
    r = np.asarray(r, dtype=np.float64)
    a = np.minimum((r / c) ** 2, 1.0)
    return c * c / 6.0 * (1.0 - (1.0 - a) ** 3)


def tukey_residual(r, c: float = 5.0):
    """``sign(r) sqrt(2 rho(r))`` and its derivative in ``r``."""
    r = np.asarray(r, dtype=np.float64)
    rt = np.sign(r) * np.sqrt(2.0 * tukey_rho(r, c))
    a = (r / c) ** 2
    psi = np.where(a < 1.0, r * (1.0 - a) ** 2, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(np.abs(rt) > 1e-150, psi / rt, 1.0)
    return rt, np.where(a < 1.0, d, 0.0)


def tukey_scale(r, c: float = 5.0):
    """Effective scale ``r~ / r`` of the robust residual (1 at ``r = 0``)."""
    r = np.asarray(r, dtype=np.float64)
    rt, _ = tukey_residual(r, c)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r != 0, rt / np.where(r != 0, r, 1.0), 1.0)


@dataclass
class IcpAssociation:
    model_points: np.ndarray  # (N, 3) world
    targets: np.ndarray  # (N, 3) keyframe camera frame
    normals: np.ndarray  # (N, 3) unit, keyframe camera frame
    valid: np.ndarray  # (N,) bool, rho
    pixels: np.ndarray  # (N, 2) int (u, v)

    @property
    def count(self) -> int:
        return int(self.valid.sum())

    @classmethod
    def empty(cls) -> IcpAssociation:
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, bool), np.zeros((0, 2), np.int64))


def icp_associate(pose: RigidPose, model: SurfelCloud, cloud: StereoCloud, k: CameraIntrinsics, stride: int = 1) -> IcpAssociation:
    """Projective lookup: the visible model point at each pixel pairs with the stereo point there.

    Only every ``stride``-th pixel in each direction is used. Entries whose
    pixel lacks a valid stereo depth are kept with ``valid = False``.
    """
    if len(model) == 0:
        return IcpAssociation.empty()
    raster = rasterize(model, pose, k)
    sub = np.zeros_like(raster.covered)
    sub[::stride, ::stride] = True
    vs, us = np.nonzero(raster.covered & sub)
    ids = raster.ids[vs, us]
    return IcpAssociation(
        model.positions[ids], cloud.points[vs, us], cloud.normals[vs, us], cloud.valid[vs, us].copy(), np.stack([us, vs], 1)
    )


def icp_residuals(pose: RigidPose, assoc: IcpAssociation, c: float = 5.0):
    """Robust plane distances ``r~`` (N,), Jacobian (N, 6) in pose, raw distances (N,).

    Invalid associations give zero rows.
    """
    Xc = pose.apply(assoc.model_points)
    r = np.sum(assoc.normals * (Xc - assoc.targets), axis=1)
    r = np.where(assoc.valid, r, 0.0)
    rt, d = tukey_residual(r, c)
    J = np.zeros((len(r), 6))
    J[:, :3] = assoc.normals
    J[:, 3:] = np.cross(Xc, assoc.normals)  # n . (-[Xc]x dtheta) = (Xc x n) . dtheta
    J *= (d * assoc.valid)[:, None]
    return np.where(assoc.valid, rt, 0.0), J, r


def icp_beta(n_features: int, n_icp: int, factor: float = 0.1) -> float:
    return factor * n_features / n_icp if n_icp > 0 else 0.0


# --------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class RefineParams:
    max_outer: int = 20
    lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    max_retries: int = 10
    lambda_max: float = 1e16
    rel_tol: float = 1e-8
    tukey_c: float = 5.0
    beta_factor: float = 0.1
    beta: float | None = None  # fixed beta; None derives it from the counts
    icp_stride: int = 4


@dataclass
class RefineResult:
    window: OptimizationWindow
    converged: bool
    sweeps: int
    costs: list = field(default_factory=list)  # per sweep: start cost, then the cost after each accepted step
    initial_cost: float = 0.0
    final_cost: float = 0.0
    beta: float = 0.0
    n_features: int = 0
    n_icp: int = 0


def _landmark_costs(window, r, valid):
    c = np.where(valid, np.sum(r * r, axis=1), 0.0)
    return np.bincount(window.obs_landmark, weights=c, minlength=len(window.landmarks))


def _frame_costs(window, r, valid):
    c = np.where(valid, np.sum(r * r, axis=1), 0.0)
    return np.bincount(window.obs_frame, weights=c, minlength=len(window.poses))


def _lm_solve(A, g, lam):
    """Solve ``(A + lam diag(A)) x = g`` by Cholesky; None when not positive definite."""
    D = np.diag(np.diag(A))
    try:
        cf = scipy.linalg.cho_factor(A + lam * D, check_finite=True)
    except (np.linalg.LinAlgError, ValueError):
        return None
    return scipy.linalg.cho_solve(cf, g)


class _Cost:
    """Cost bookkeeping for one sweep (associations and beta frozen)."""

    def __init__(self, window, assoc, beta, c):
        self.window, self.assoc, self.beta2, self.c = window, assoc, beta * beta, c

    @property
    def active(self) -> bool:
        return self.assoc is not None and self.beta2 > 0.0

    def icp(self, pose):
        if not self.active:
            return 0.0
        rt, _, _ = icp_residuals(pose, self.assoc, self.c)
        return self.beta2 * float(rt @ rt)

    def total(self, poses=None, landmarks=None):
        w = self.window
        poses = w.poses if poses is None else poses
        r, valid, _, _ = ba_blocks(w, poses, landmarks)
        return float(np.sum(r[valid] ** 2)) + self.icp(poses[w.keyframe])


def _landmark_step(window: OptimizationWindow, lam: np.ndarray, pending: np.ndarray):
    """One LM attempt on the pending landmarks, each with its own damping.

    Returns ``(trial landmarks, accepted, solvable)`` masks over landmarks.
    """
    r, valid, _, Jl = ba_blocks(window)
    L = len(window.landmarks)
    l = window.obs_landmark
    use = valid & pending[l]
    A = np.zeros((L, 3, 3))
    g = np.zeros((L, 3))
    np.add.at(A, l[use], np.einsum("nki,nkj->nij", Jl[use], Jl[use]))
    np.add.at(g, l[use], -np.einsum("nki,nk->ni", Jl[use], r[use]))
    solvable = pending & (np.bincount(l[use], minlength=L) > 0)
    idx = np.nonzero(solvable)[0]
    step = np.zeros((L, 3))
    if len(idx):
        diag = np.einsum("nii->ni", A[idx])
        Ad = A[idx] + (lam[idx, None] * diag)[:, :, None] * np.eye(3)[None]
        ok = np.all(np.isfinite(Ad), axis=(1, 2))
        try:
            C = np.linalg.cholesky(np.where(ok[:, None, None], Ad, np.eye(3)))
        except np.linalg.LinAlgError:
            ok &= np.array([_is_pd(a) for a in Ad], dtype=bool)
            C = np.linalg.cholesky(np.where(ok[:, None, None], Ad, np.eye(3)))
        y = np.linalg.solve(C, g[idx][:, :, None])
        sol = np.linalg.solve(np.swapaxes(C, 1, 2), y)[:, :, 0]
        step[idx[ok]] = sol[ok]  # non-definite systems keep a zero step and count as rejected
    trial = window.landmarks + step
    old = _landmark_costs(window, r, valid)
    r2, valid2, _, _ = ba_blocks(window, None, trial)
    new = _landmark_costs(window, r2, valid2)
    lost = np.bincount(l, weights=(valid & ~valid2).astype(float), minlength=L) > 0
    accept = solvable & ~lost & (new < old)
    return np.where(accept[:, None], trial, window.landmarks), accept, solvable


def _is_pd(A) -> bool:
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return False
    return True


def _pose_step(window: OptimizationWindow, cost: _Cost, lam: np.ndarray, pending: np.ndarray):
    """One LM attempt on the pending poses, each a 6x6 Cholesky solve with its own damping."""
    r, valid, Jp, _ = ba_blocks(window)
    F = len(window.poses)
    f = window.obs_frame
    old = _frame_costs(window, r, valid)
    trial = list(window.poses)
    solvable = np.zeros(F, dtype=bool)
    for s in np.nonzero(pending)[0]:
        m = (f == s) & valid
        J = Jp[m].reshape(-1, 6)
        A = J.T @ J
        g = -J.T @ r[m].reshape(-1)
        if s == window.keyframe and cost.active:
            rt, Ji, _ = icp_residuals(window.poses[s], cost.assoc, cost.c)
            A = A + cost.beta2 * (Ji.T @ Ji)
            g = g - cost.beta2 * (Ji.T @ rt)
            old[s] += cost.beta2 * float(rt @ rt)
        if not np.any(A):
            continue
        solvable[s] = True
        x = _lm_solve(A, g, lam[s])
        if x is not None:
            trial[s] = window.poses[s].retract(x)
    r2, valid2, _, _ = ba_blocks(window, trial)
    new = _frame_costs(window, r2, valid2)
    if solvable[window.keyframe]:
        new[window.keyframe] += cost.icp(trial[window.keyframe])
    lost = np.bincount(f, weights=(valid & ~valid2).astype(float), minlength=F) > 0
    accept = solvable & ~lost & (new < old)
    return [trial[s] if accept[s] else window.poses[s] for s in range(F)], accept, solvable


def lm_optimize(
    window: OptimizationWindow,
    model: SurfelCloud | None = None,
    cloud: StereoCloud | None = None,
    params: RefineParams = RefineParams(),
) -> RefineResult:
    """Alternating-block Levenberg-Marquardt over a window; the input is not modified."""
    w = window.copy()
    if np.all(w.fixed_pose):
        raise ValueError("window has no free pose")
    k = w.intrinsics
    lam_l = np.full(len(w.landmarks), params.lambda_init)
    lam_p = np.full(len(w.poses), params.lambda_init)
    costs: list = []
    converged = False
    beta = 0.0
    n_feat = n_icp = 0
    initial = None
    sweep = 0
    assoc = None
    for sweep in range(1, params.max_outer + 1):
        _, valid, _, _ = ba_blocks(w)
        n_feat = int(valid.sum())
        if model is not None and cloud is not None and len(model):
            assoc = icp_associate(w.poses[w.keyframe], model, cloud, k, params.icp_stride)
            n_icp = assoc.count
        beta = params.beta if params.beta is not None else icp_beta(n_feat, n_icp, params.beta_factor)
        cost = _Cost(w, assoc, beta, params.tukey_c)
        start = cost.total()
        if initial is None:
            initial = start
        costs.append([start])
        for block in ("landmark", "pose"):
            lam = lam_l if block == "landmark" else lam_p
            pending = ~(w.fixed_landmark if block == "landmark" else w.fixed_pose)
            for _ in range(params.max_retries + 1):
                if block == "landmark":
                    trial, acc, solvable = _landmark_step(w, lam, pending)
                    w.landmarks = trial
                else:
                    trial, acc, solvable = _pose_step(w, cost, lam, pending)
                    w.poses = trial
                lam[acc] /= params.lambda_down
                lam[solvable & ~acc] = np.minimum(lam[solvable & ~acc] * params.lambda_up, params.lambda_max)
                pending = solvable & ~acc
                if acc.any():
                    costs[-1].append(cost.total())
                if not pending.any():
                    break
        end = cost.total()
        if start <= 0.0 or (start - end) <= params.rel_tol * start:
            converged = True
            break
    final = _Cost(w, assoc, beta, params.tukey_c).total() if sweep else 0.0
    if not converged:
        log.warning("refinement stopped after %d sweeps without converging", sweep)
    return RefineResult(w, converged, sweep, costs, float(initial or 0.0), final, beta, n_feat, n_icp)
