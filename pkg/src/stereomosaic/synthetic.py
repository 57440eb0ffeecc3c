"""Procedural scenes with known geometry for tests, benchmarks and demos.

A scene is a surface with a ray-intersection routine and a texture painted in
world ``(x, y)`` coordinates, so every view of a surface point sees the same
intensity. :func:`render_pair` ray-casts a rectified stereo pair and returns
ground-truth depth; :func:`make_orbit_sequence` strings renders together
along a camera path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import CameraIntrinsics, RigidPose, StereoRig


class ValueNoise:
    """Smooth random field: cubic-spline interpolation of a random grid."""

    def __init__(self, rng: np.random.Generator, cell: float, extent: float = 160.0):
        n = int(np.ceil(2 * extent / cell)) + 4
        self.cell = cell
        self.origin = -extent - 2 * cell
        grid = rng.standard_normal((n, n))
        self.coeffs = ndimage.spline_filter(grid, order=3, mode="mirror")

    def __call__(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        cx = (x - self.origin) / self.cell
        cy = (y - self.origin) / self.cell
        out = ndimage.map_coordinates(
            self.coeffs, [cy.ravel(), cx.ravel()], order=3, mode="mirror", prefilter=False
        )
        return out.reshape(x.shape)


@dataclass
class Texture:
    """Multi-octave grey texture plus a low-frequency tint."""

    seed: int = 0
    octaves: tuple = ((0.6, 38.0), (1.5, 30.0), (4.0, 22.0))  # (cell mm, amplitude)
    mean: float = 128.0
    _fields: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self._fields = [(ValueNoise(rng, cell), amp) for cell, amp in self.octaves]
        self._tint = ValueNoise(rng, 12.0)

    def gray(self, x, y):
        g = np.full(np.shape(x), self.mean)
        for f, amp in self._fields:
            g = g + amp * f(x, y)
        return g

    def rgb(self, x, y):
        g = self.gray(x, y)
        tint = 12.0 * self._tint(x, y)
        return np.stack([g + 18.0 + tint, 0.9 * g - tint, 0.75 * g + 8.0], axis=-1)


class SlantedPlane:
    def __init__(self, z0=100.0, slope_x=0.25, slope_y=0.0):
        self.z0, self.sx, self.sy = z0, slope_x, slope_y

    def height(self, x, y):
        return self.z0 + self.sx * x + self.sy * y

    def intersect(self, o, d):
        num = self.z0 + self.sx * o[:, 0] + self.sy * o[:, 1] - o[:, 2]
        den = d[:, 2] - self.sx * d[:, 0] - self.sy * d[:, 1]
        return num / den


class SphereOnPlane:
    """Background plane ``z = plane_z`` with the part of a sphere that lies in front of it."""

    def __init__(self, plane_z=130.0, center=(0.0, 0.0, 150.0), radius=40.0):
        self.plane_z = plane_z
        self.c = np.asarray(center, dtype=np.float64)
        self.r = radius

    def height(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        rr = self.r**2 - (x - self.c[0]) ** 2 - (y - self.c[1]) ** 2
        zs = self.c[2] - np.sqrt(np.maximum(rr, 0.0))
        return np.where((rr > 0) & (zs < self.plane_z), zs, self.plane_z)

    def intersect(self, o, d):
        t_plane = (self.plane_z - o[:, 2]) / d[:, 2]
        oc = o - self.c
        b = np.sum(oc * d, axis=1)
        c = np.sum(oc * oc, axis=1) - self.r**2
        a = np.sum(d * d, axis=1)
        disc = b * b - a * c
        hit = disc > 0
        t_s = np.where(hit, (-b - np.sqrt(np.maximum(disc, 0.0))) / a, np.inf)
        z_s = o[:, 2] + t_s * d[:, 2]
        use = hit & (t_s > 0) & (z_s < self.plane_z)
        return np.where(use, t_s, t_plane)


class Heightfield:
    """``z = z0 + (x^2 + y^2) / (2 R) + A sin(kx x) sin(ky y) + perturbation(x, y)``."""

    def __init__(self, z0=100.0, curvature_radius=180.0, amplitude=2.5, wavelength=(45.0, 60.0), perturbation=None):
        self.z0 = z0
        self.R = curvature_radius
        self.A = amplitude
        self.kx = 2 * np.pi / wavelength[0]
        self.ky = 2 * np.pi / wavelength[1]
        self.perturbation = perturbation

    def height(self, x, y, with_perturbation=True):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        h = self.z0 + (x * x + y * y) / (2 * self.R) + self.A * np.sin(self.kx * x) * np.sin(self.ky * y)
        if with_perturbation and self.perturbation is not None:
            h = h + self.perturbation(x, y)
        return h

    def gradient(self, x, y):
        gx = x / self.R + self.A * self.kx * np.cos(self.kx * x) * np.sin(self.ky * y)
        gy = y / self.R + self.A * self.ky * np.sin(self.kx * x) * np.cos(self.ky * y)
        return gx, gy

    def distance(self, points):
        """Approximate distance of world points to the unperturbed surface (first-order)."""
        p = np.asarray(points, dtype=np.float64)
        gx, gy = self.gradient(p[:, 0], p[:, 1])
        dz = p[:, 2] - self.height(p[:, 0], p[:, 1], with_perturbation=False)
        return dz / np.sqrt(1.0 + gx * gx + gy * gy)

    def intersect(self, o, d):
        t = (self.z0 - o[:, 2]) / d[:, 2]
        for _ in range(40):
            p = o + t[:, None] * d
            g = p[:, 2] - self.height(p[:, 0], p[:, 1])
            gx, gy = self.gradient(p[:, 0], p[:, 1])
            dg = d[:, 2] - gx * d[:, 0] - gy * d[:, 1]
            step = g / dg
            t = t - step
            if np.max(np.abs(step)) < 1e-10:
                break
        return t


class SmoothPerturbation:
    """Zero-mean smooth random depth offset with a given standard deviation."""

    def __init__(self, rng, sigma: float, cell: float = 6.0):
        self.noise = ValueNoise(rng, cell)
        # empirical normalization over the working domain
        xs = np.linspace(-100, 100, 201)
        X, Y = np.meshgrid(xs, xs)
        vals = self.noise(X, Y)
        self.mean = float(vals.mean())
        self.scale = sigma / float(vals.std()) if sigma > 0 else 0.0

    def __call__(self, x, y):
        return self.scale * (self.noise(x, y) - self.mean)


def default_rig(width=320, height=240, focal=400.0, baseline=10.0) -> StereoRig:
    k = CameraIntrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    return StereoRig(k, baseline)


@dataclass
class RenderedPair:
    left: np.ndarray  # (H, W, 3) uint8
    right: np.ndarray
    depth: np.ndarray  # (H, W) left-camera z, mm
    points: np.ndarray  # (H, W, 3) world points seen by the left camera

    def gt_disparity(self, rig: StereoRig) -> np.ndarray:
        return rig.intrinsics.focal_x * rig.baseline / self.depth


def _cast(scene, texture, pose: RigidPose, k: CameraIntrinsics):
    H, W = k.height, k.width
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    dirs_c = np.stack(
        [(uu - k.center_x) / k.focal_x, (vv - k.center_y) / k.focal_y, np.ones_like(uu)], axis=-1
    ).reshape(-1, 3)
    R = pose.R
    origin = pose.center
    dirs_w = dirs_c @ R  # R^T d
    o = np.broadcast_to(origin, dirs_w.shape).copy()
    t = scene.intersect(o, dirs_w)
    pts = o + t[:, None] * dirs_w
    depth = (pts - origin) @ R.T
    rgb = texture.rgb(pts[:, 0], pts[:, 1])
    return rgb.reshape(H, W, 3), depth[:, 2].reshape(H, W), pts.reshape(H, W, 3)


def _quantize(img, rng, noise):
    if noise > 0:
        img = img + rng.uniform(-noise, noise, size=img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def _right_from_offsets(scene, texture, pose: RigidPose, rig: StereoRig, depth, offset, iters: int = 12):
    """Right view of the surface with every point pushed ``offset(x, y)`` mm along its left-camera ray.

    A right pixel shows the left pixel ``u_l`` that satisfies
    ``u_l - f b / (z(u_l) + offset) = u_r``; it is found by fixed-point
    iteration on the left depth map and then shaded from an exact ray cast.
    """
    k = rig.intrinsics
    H, W = k.height, k.width
    _, _, pts = _cast(scene, texture, pose, k)
    dz = offset(pts[..., 0], pts[..., 1])
    zp = depth + dz
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    ul = uu + k.focal_x * rig.baseline / zp
    for _ in range(iters):
        z_at = ndimage.map_coordinates(zp, [vv.ravel(), ul.ravel()], order=1, mode="nearest").reshape(H, W)
        ul = uu + k.focal_x * rig.baseline / z_at
    dirs_c = np.stack([(ul - k.center_x) / k.focal_x, (vv - k.center_y) / k.focal_y, np.ones_like(ul)], -1).reshape(-1, 3)
    dirs_w = dirs_c @ pose.R
    o = np.broadcast_to(pose.center, dirs_w.shape).copy()
    p = o + scene.intersect(o, dirs_w)[:, None] * dirs_w
    return texture.rgb(p[:, 0], p[:, 1]).reshape(H, W, 3)


def render_pair(
    scene, texture: Texture, pose: RigidPose, rig: StereoRig, rng=None, noise: float = 0.5, depth_offset=None
) -> RenderedPair:
    """Rectified pair: the right camera sits ``baseline`` mm along the left camera's +x.

    ``depth_offset(x, y)`` (mm) moves the surface seen by the right camera
    along the left camera's rays, so stereo triangulation recovers a depth off
    by exactly that amount while the left image stays that of ``scene``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    k = rig.intrinsics
    lrgb, depth, pts = _cast(scene, texture, pose, k)
    if depth_offset is None:
        right_pose = RigidPose(pose.rotation, pose.translation - np.array([rig.baseline, 0.0, 0.0]))
        rrgb, _, _ = _cast(scene, texture, right_pose, k)
    else:
        rrgb = _right_from_offsets(scene, texture, pose, rig, depth, depth_offset)
    return RenderedPair(_quantize(lrgb, rng, noise), _quantize(rrgb, rng, noise), depth, pts)


def look_at(center, target, down=(0.0, 1.0, 0.0)) -> RigidPose:
    """World-to-camera pose for a camera at ``center`` looking at ``target`` (image y along ``down``)."""
    c = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - c
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return RigidPose.from_matrix(R, -R @ c)


@dataclass
class Sequence:
    rig: StereoRig
    poses: list  # ground-truth world->camera poses; poses[0] is identity
    frames: list  # RenderedPair per frame
    surface: Heightfield  # unperturbed ground-truth surface
    depth_noise: float

    def path_length(self) -> float:
        c = np.array([p.center for p in self.poses])
        return float(np.sum(np.linalg.norm(np.diff(c, axis=0), axis=1))) if len(c) > 1 else 0.0


def orbit_poses(n_frames: int, radius: float = 20.0, step: float = 3.0, distance: float = 100.0):
    """Camera centers on a circle through the origin, looking down +z at a drifting target."""
    poses = []
    for i in range(n_frames):
        theta = step * i / radius
        c = np.array([radius * np.cos(theta) - radius, radius * np.sin(theta), 0.0])
        target = np.array([0.5 * c[0], 0.5 * c[1], distance])
        poses.append(look_at(c, target))
    return poses


def make_orbit_sequence(
    n_frames: int = 30,
    seed: int = 0,
    depth_noise: float = 0.5,
    rig: StereoRig | None = None,
    step: float = 3.0,
    image_noise: float = 0.5,
) -> Sequence:
    """Textured curved surface seen along an orbit.

    The left views see the rigid noise-free surface. Each right view is
    rendered with its own smooth random depth offset of standard deviation
    ``depth_noise`` mm along the left rays, so every frame's stereo depth
    carries an independent error of that size while tracking sees a rigid
    scene.
    """
    rig = default_rig() if rig is None else rig
    rng = np.random.default_rng(seed)
    texture = Texture(seed=seed + 1)
    base = Heightfield()
    poses = orbit_poses(n_frames, step=step)
    frames = []
    for pose in poses:
        pert = SmoothPerturbation(rng, depth_noise) if depth_noise > 0 else None
        frames.append(render_pair(base, texture, pose, rig, rng, image_noise, depth_offset=pert))
    return Sequence(rig, poses, frames, base, depth_noise)


@dataclass
class PnPCase:
    problem: object  # pnp.PnPProblem
    pose: RigidPose  # ground truth, world -> current camera
    inlier: np.ndarray  # bool per match
    prev_pixels: np.ndarray  # (N, 2) positions in the previous frame


def make_pnp_case(
    rng: np.random.Generator,
    n: int = 200,
    outlier_ratio: float = 0.6,
    rig: StereoRig | None = None,
    max_angle_deg: float = 3.0,
    max_shift: float = 5.0,
    pixel_noise: float = 0.5,
    depth: float = 100.0,
    bin_size: float = 10.0,
) -> PnPCase:
    """Matches between a previous and a current frame with known relative motion.

    The world frame has the previous camera's axes and its origin at the scene
    center, ``depth`` mm in front of it. Inlier observations carry Gaussian
    pixel noise; outliers get uniformly random current-frame pixels. The
    priority order comes from displacement voting between the two frames.
    """
    from .features import MatchSet, histogram_vote
    from .pnp import PnPProblem

    rig = default_rig() if rig is None else rig
    k = rig.intrinsics
    prev = RigidPose(translation=[0.0, 0.0, depth])
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0.0, max_angle_deg))
    shift = rng.standard_normal(3)
    shift *= rng.uniform(0.0, max_shift) / np.linalg.norm(shift)
    rel = RigidPose.from_rotvec(axis * angle, shift)
    cur = rel @ prev
    X, uv_prev, uv_cur = [], [], []
    while len(X) < n:
        u = rng.uniform(10, k.width - 10)
        v = rng.uniform(10, k.height - 10)
        z = depth + rng.uniform(-15.0, 15.0)
        Xp = np.array([z * (u - k.center_x) / k.focal_x, z * (v - k.center_y) / k.focal_y, z])
        Xw = prev.inverse().apply(Xp)
        Xc = cur.apply(Xw)
        uc = k.center_x + k.focal_x * Xc[0] / Xc[2]
        vc = k.center_y + k.focal_y * Xc[1] / Xc[2]
        if not (0 <= uc < k.width and 0 <= vc < k.height):
            continue
        X.append(Xw)
        uv_prev.append((u, v))
        uv_cur.append((uc, vc))
    X = np.array(X)
    uv_prev = np.array(uv_prev)
    uv_cur = np.array(uv_cur) + rng.normal(0.0, pixel_noise, (n, 2))
    n_out = int(round(outlier_ratio * n))
    out_idx = rng.permutation(n)[:n_out]
    inlier = np.ones(n, dtype=bool)
    inlier[out_idx] = False
    uv_cur[out_idx] = np.stack([rng.uniform(0, k.width, n_out), rng.uniform(0, k.height, n_out)], axis=1)
    idx = np.arange(n)
    voted = histogram_vote(MatchSet(idx, idx, np.zeros(n, dtype=np.int64), uv_prev, uv_cur), bin_size)
    problem = PnPProblem(X, uv_cur, k, priority=voted.idx_a, prior=prev)
    return PnPCase(problem, cur, inlier, uv_prev)


@dataclass
class RefineCase:
    truth: object  # refine.OptimizationWindow at ground truth
    start: object  # same window with free poses and landmarks perturbed


def make_refine_case(
    rng: np.random.Generator,
    n_frames: int = 5,
    n_landmarks: int = 150,
    angle_deg: float = 1.0,
    shift_mm: float = 2.0,
    landmark_noise: float = 1.0,
    spread: float = 10.0,
    rig: StereoRig | None = None,
) -> RefineCase:
    """Noise-free refinement window with a fixed anchor in slot 0 and the keyframe last.

    The anchor observes the first half of the landmarks (those stay fixed);
    the other frames observe every landmark they see. Free poses are
    perturbed by exactly ``angle_deg`` about a random axis and ``shift_mm``
    along a random direction.
    """
    from .refine import OptimizationWindow, project_observations

    rig = default_rig() if rig is None else rig
    k = rig.intrinsics
    poses = [RigidPose()]
    for _ in range(n_frames - 1):
        axis = rng.standard_normal(3)
        poses.append(RigidPose.from_rotvec(axis / np.linalg.norm(axis) * np.radians(rng.uniform(0, 3)), rng.uniform(-spread, spread, 3)))
    X = np.stack([rng.uniform(-30, 30, n_landmarks), rng.uniform(-22, 22, n_landmarks), rng.uniform(90, 110, n_landmarks)], 1)
    obs_f, obs_l, obs_uv = [], [], []
    for f, pose in enumerate(poses):
        Xc = pose.apply(X)
        u = k.center_x + k.focal_x * Xc[:, 0] / Xc[:, 2]
        v = k.center_y + k.focal_y * Xc[:, 1] / Xc[:, 2]
        seen = (u >= 0) & (u <= k.width - 1) & (v >= 0) & (v <= k.height - 1)
        if f == 0:
            seen &= np.arange(n_landmarks) < n_landmarks // 2
        for l in np.nonzero(seen)[0]:
            obs_f.append(f)
            obs_l.append(l)
            obs_uv.append((u[l], v[l]))
    truth = OptimizationWindow.with_anchor(
        poses, X, obs_f, obs_l, np.array(obs_uv), k, keyframe=n_frames - 1, anchor=0
    )
    truth.obs_uv = project_observations(truth)  # bit-exact zero residuals
    start = truth.copy()
    for s in range(n_frames):
        if start.fixed_pose[s]:
            continue
        axis = rng.standard_normal(3)
        axis *= np.radians(angle_deg) / np.linalg.norm(axis)
        d = rng.standard_normal(3)
        d *= shift_mm / np.linalg.norm(d)
        p = poses[s]
        start.poses[s] = RigidPose.from_rotvec(axis) @ RigidPose(p.rotation, p.translation + d)
    free = ~start.fixed_landmark
    start.landmarks[free] += rng.normal(0.0, landmark_noise, (int(free.sum()), 3))
    return RefineCase(truth, start)


def write_sequence(seq: Sequence, directory, **config) -> Path:
    """PNG frames, ``calibration.txt`` and a ``config.txt`` (extra ``key=value`` entries) in ``directory``."""
    from .io import save_frame_pair, write_calibration

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(seq.frames):
        save_frame_pair(d, i, fr.left, fr.right)
    write_calibration(seq.rig, d / "calibration.txt")
    entries = {"input_dir": ".", "output_dir": "output", **config}
    path = d / "config.txt"
    path.write_text("".join(f"{k} = {v}\n" for k, v in entries.items()))
    return path
