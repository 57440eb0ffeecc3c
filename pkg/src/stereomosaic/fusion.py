"""Volume-free point fusion of keyframe stereo clouds into one surfel model.

The model is projected into the new keyframe with a z-buffer; a valid stereo
pixel whose depth lies within ``association_gate`` of the surfel rasterized
there is averaged into it, every other valid pixel becomes a new surfel.
Colors are blended with a weight that fades from the image center toward the
corners, so views where a point sits near the border contribute less.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._accel import dispatch, njit
from .core import CameraIntrinsics, RigidPose
from .stereo import StereoCloud


@dataclass(frozen=True)
class FusionParams:
    trunc: float = 10.0  # mm, largest single position increment
    weight_cap: float = 50.0
    association_gate: float = 5.0  # mm, camera-depth difference
    omega_min: float = 0.1  # color weight floor at the image corners


@dataclass
class Surfel:
    position: np.ndarray
    color: np.ndarray
    normal: np.ndarray
    weight: float
    color_weight: float


class SurfelCloud:
    """Growable surfel arrays; ``cloud[i]`` yields a :class:`Surfel` view."""

    def __init__(self, positions=None, colors=None, normals=None, weights=None, color_weights=None):
        self.positions = np.zeros((0, 3)) if positions is None else np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.colors = np.zeros((n, 3)) if colors is None else np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        if normals is None:
            normals = np.tile([0.0, 0.0, -1.0], (n, 1))
        self.normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        self.weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
        self.color_weights = np.ones(n) if color_weights is None else np.asarray(color_weights, dtype=np.float64).reshape(-1)
        if not (len(self.colors) == len(self.normals) == len(self.weights) == len(self.color_weights) == n):
            raise ValueError("surfel arrays differ in length")
        if n and np.abs(np.linalg.norm(self.normals, axis=1) - 1.0).max() > 1e-6:
            raise ValueError("surfel normals must be unit length")
        if np.any(self.weights < 0) or np.any(self.color_weights < 0):
            raise ValueError("surfel weights must be non-negative")

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> Surfel:
        return Surfel(
            self.positions[i], self.colors[i], self.normals[i], float(self.weights[i]), float(self.color_weights[i])
        )

    def append(self, positions, colors, normals, weights, color_weights) -> None:
        self.positions = np.concatenate([self.positions, np.asarray(positions, dtype=np.float64).reshape(-1, 3)])
        self.colors = np.concatenate([self.colors, np.asarray(colors, dtype=np.float64).reshape(-1, 3)])
        self.normals = np.concatenate([self.normals, np.asarray(normals, dtype=np.float64).reshape(-1, 3)])
        self.weights = np.concatenate([self.weights, np.asarray(weights, dtype=np.float64).reshape(-1)])
        self.color_weights = np.concatenate([self.color_weights, np.asarray(color_weights, dtype=np.float64).reshape(-1)])

    def copy(self) -> SurfelCloud:
        return SurfelCloud(
            self.positions.copy(), self.colors.copy(), self.normals.copy(), self.weights.copy(), self.color_weights.copy()
        )

    def colors_u8(self) -> np.ndarray:
        return np.clip(np.rint(self.colors), 0, 255).astype(np.uint8)


@dataclass
class RasterBuffer:
    ids: np.ndarray  # (H, W) int64 surfel index, -1 where empty
    depth: np.ndarray  # (H, W) camera depth of that surfel, inf where empty

    @property
    def covered(self) -> np.ndarray:
        return self.ids >= 0


# --------------------------------------------------------------------------
# rasterization


def _project(model: SurfelCloud, pose: RigidPose, k: CameraIntrinsics):
    """Camera depth and nearest pixel per surfel, plus a mask of contenders."""
    Xc = pose.apply(model.positions)
    z = Xc[:, 2]
    front = z > 0
    zs = np.where(front, z, 1.0)
    u = np.floor(k.center_x + k.focal_x * Xc[:, 0] / zs + 0.5)
    v = np.floor(k.center_y + k.focal_y * Xc[:, 1] / zs + 0.5)
    ok = front & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height) & np.isfinite(z)
    return z, np.where(ok, u, 0).astype(np.int64), np.where(ok, v, 0).astype(np.int64), ok


@njit
def _zbuffer_numba(z, u, v, ok, H, W):
    ids = np.full((H, W), -1, dtype=np.int64)
    depth = np.full((H, W), np.inf)
    for i in range(z.shape[0]):
        if not ok[i]:
            continue
        d = z[i]
        cur = depth[v[i], u[i]]
        if d < cur or (d == cur and i < ids[v[i], u[i]]):
            depth[v[i], u[i]] = d
            ids[v[i], u[i]] = i
    return ids, depth


def _zbuffer_numpy(z, u, v, ok, H, W):
    ids = np.full((H, W), -1, dtype=np.int64)
    depth = np.full((H, W), np.inf)
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return ids, depth
    order = idx[np.lexsort((idx, z[idx]))]  # nearest first, lower id on ties
    pix = v[order] * W + u[order]
    _, first = np.unique(pix, return_index=True)
    win = order[first]
    ids.reshape(-1)[pix[first]] = win
    depth.reshape(-1)[pix[first]] = z[win]
    return ids, depth


def rasterize(model: SurfelCloud, pose: RigidPose, k: CameraIntrinsics) -> RasterBuffer:
    """Z-buffer the model into the camera: nearest surfel per pixel, lower index on ties."""
    if len(model) == 0:
        return RasterBuffer(np.full((k.height, k.width), -1, dtype=np.int64), np.full((k.height, k.width), np.inf))
    z, u, v, ok = _project(model, pose, k)
    kernel = dispatch(_zbuffer_numba, _zbuffer_numpy)
    ids, depth = kernel(z, u, v, ok, k.height, k.width)
    return RasterBuffer(ids, depth)


# --------------------------------------------------------------------------
# fusion


def color_weight(u, v, k: CameraIntrinsics, omega_min: float = 0.1):
    """``clamp(1 - r / half_diagonal, omega_min, 1)`` with ``r`` the distance to the image center."""
    cu, cv = (k.width - 1) / 2.0, (k.height - 1) / 2.0
    r = np.hypot(np.asarray(u, dtype=np.float64) - cu, np.asarray(v, dtype=np.float64) - cv)
    return np.clip(1.0 - r / np.hypot(cu, cv), omega_min, 1.0)


@dataclass
class FusionStats:
    fused: int
    added: int


def fuse_frame(
    model: SurfelCloud,
    cloud: StereoCloud,
    pose: RigidPose,
    k: CameraIntrinsics,
    params: FusionParams = FusionParams(),
    color=None,
) -> FusionStats:
    """Merge one keyframe's camera-frame cloud into ``model`` in place.

    ``pose`` maps world to this keyframe's camera. ``color`` overrides the
    cloud's own per-pixel colors when given.
    """
    if cloud.points.shape[:2] != (k.height, k.width):
        raise ValueError("stereo cloud does not match the camera size")
    colors = cloud.colors if color is None else np.asarray(color)
    if colors.ndim == 2:
        colors = np.repeat(colors[..., None], 3, axis=2)
    raster = rasterize(model, pose, k)
    vs, us = np.nonzero(cloud.valid)
    q = cloud.points[vs, us]
    sid = raster.ids[vs, us]
    dz = np.abs(q[:, 2] - raster.depth[vs, us])
    assoc = (sid >= 0) & (dz <= params.association_gate)
    inv = pose.inverse()
    Rinv = inv.R
    obs = inv.apply(q)
    nrm = cloud.normals[vs, us] @ Rinv.T
    col = colors[vs, us].astype(np.float64)
    cw = color_weight(us, vs, k, params.omega_min)

    a = np.nonzero(assoc)[0]
    if len(a):
        s = sid[a]
        W = model.weights[s]
        d = obs[a] - model.positions[s]
        step = np.linalg.norm(d, axis=1)
        scale = np.where(step > params.trunc, params.trunc / np.maximum(step, 1e-300), 1.0)
        model.positions[s] = model.positions[s] + d * (scale / (W + 1.0))[:, None]
        n = W[:, None] * model.normals[s] + nrm[a]
        nn = np.linalg.norm(n, axis=1, keepdims=True)
        model.normals[s] = np.where(nn > 1e-12, n / np.maximum(nn, 1e-300), model.normals[s])
        model.weights[s] = np.minimum(W + 1.0, params.weight_cap)
        CW = model.color_weights[s]
        w_new = cw[a]
        model.colors[s] = (CW[:, None] * model.colors[s] + w_new[:, None] * col[a]) / (CW + w_new)[:, None]
        model.color_weights[s] = np.minimum(CW + w_new, params.weight_cap)

    b = np.nonzero(~assoc)[0]
    if len(b):
        model.append(obs[b], col[b], nrm[b], np.ones(len(b)), cw[b])
    return FusionStats(int(len(a)), int(len(b)))


def cloud_to_model(cloud: StereoCloud, pose: RigidPose, k: CameraIntrinsics, params: FusionParams = FusionParams()) -> SurfelCloud:
    """Model holding exactly one keyframe's valid stereo points."""
    model = SurfelCloud()
    fuse_frame(model, cloud, pose, k, params)
    return model
