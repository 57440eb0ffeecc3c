"""Frame-by-frame reconstruction: tracking, keyframes, windowed refinement, fusion.

Each frame is matched against the previous one and tracked with the robust
PnP solver. Matched features inherit the landmark of their predecessor;
features without one get a 3D point from the fused model seen from the new
pose. A keyframe additionally runs dense stereo (its features then take
their landmarks from the stereo depth), re-matches earlier keyframes that
overlap it, refines the window of frames since the last keyframe and fuses
its cloud into the model.
"""

from __future__ import annotations

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .core import RigidPose, StereoRig
from .features import FeatureParams, FeatureSet, extract, histogram_vote, match_features
from .fusion import FusionParams, SurfelCloud, fuse_frame, rasterize
from .pnp import PnPParams, PnPProblem, PnPSolution, dynamic_r1ppnp
from .refine import (
    KeyframePolicy,
    LoopParams,
    OptimizationWindow,
    RefineParams,
    keyframe_decision,
    lm_optimize,
    select_matching_keyframes,
)
from .stereo import StereoCloud, StereoParams, disparity_to_cloud, stereo_stage

log = logging.getLogger(__name__)

STAGES = (
    "stereo matching",
    "feature matching + histogram voting",
    "DynamicR1PPnP",
    "refinement",
    "TSDF",
)


class TrackingFailure(RuntimeError):
    def __init__(self, frame_index: int, reason: str):
        super().__init__(f"tracking failed at frame {frame_index}: {reason}")
        self.frame_index = frame_index


@dataclass
class RuntimeReport:
    """Accumulated wall time per stage (ms) and the keyframe count."""

    stage_ms: OrderedDict = field(default_factory=lambda: OrderedDict((s, 0.0) for s in STAGES))
    keyframes: int = 0
    frames: int = 0

    def add(self, stage: str, ms: float) -> None:
        if stage not in self.stage_ms:
            raise KeyError(stage)
        self.stage_ms[stage] += ms

    @property
    def total_ms(self) -> float:
        return float(sum(self.stage_ms.values()))

    def per_keyframe(self, stage: str | None = None) -> float:
        v = self.total_ms if stage is None else self.stage_ms[stage]
        return v / self.keyframes if self.keyframes else 0.0

    def rows(self):
        """``(stage, total ms, ms per keyframe)`` with a closing total row."""
        out = [(s, ms, self.per_keyframe(s)) for s, ms in self.stage_ms.items()]
        out.append(("total", self.total_ms, self.per_keyframe()))
        return out

    def table(self) -> str:
        rows = self.rows()
        w = max(len(r[0]) for r in rows)
        lines = [f"{'stage':<{w}}  {'total ms':>12}  {'ms/keyframe':>12}"]
        for name, tot, per in rows:
            lines.append(f"{name:<{w}}  {tot:>12.3f}  {per:>12.3f}")
        lines.append(f"frames: {self.frames}, keyframes: {self.keyframes}")
        return "\n".join(lines)

    def key_values(self):
        pairs = [("frames", self.frames), ("keyframes", self.keyframes)]
        for name, tot, per in self.rows():
            pairs.append((f"{name}.total_ms", f"{tot:.6f}"))
            pairs.append((f"{name}.per_keyframe_ms", f"{per:.6f}"))
        return pairs


class _Timer:
    def __init__(self, report: RuntimeReport, stage: str):
        self.report, self.stage = report, stage

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.report.add(self.stage, 1000.0 * (time.perf_counter() - self.t0))


@dataclass
class FrameRecord:
    index: int
    pose: RigidPose
    features: FeatureSet
    landmarks: np.ndarray  # landmark id per feature, -1 when none
    keyframe_id: int = -1

    def observations(self):
        """``(landmark ids, pixels)`` of features carrying a landmark."""
        m = self.landmarks >= 0
        return self.landmarks[m], self.features.positions[m]


class LandmarkMap:
    """World positions indexed by landmark id."""

    def __init__(self):
        self._pos = np.zeros((0, 3))

    def __len__(self):
        return len(self._pos)

    def add(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        ids = np.arange(len(self._pos), len(self._pos) + len(points))
        self._pos = np.concatenate([self._pos, points])
        return ids

    def __getitem__(self, ids):
        return self._pos[ids]

    def update(self, ids, points) -> None:
        self._pos[ids] = points


@dataclass
class PipelineParams:
    stereo: StereoParams = field(default_factory=StereoParams)
    features: FeatureParams = field(default_factory=FeatureParams)
    pnp: PnPParams = field(default_factory=PnPParams)
    keyframe: KeyframePolicy = field(default_factory=KeyframePolicy)
    loop: LoopParams = field(default_factory=LoopParams)
    refine: RefineParams = field(default_factory=RefineParams)
    fusion: FusionParams = field(default_factory=FusionParams)

    @classmethod
    def from_config(cls, cfg) -> PipelineParams:
        return cls(cfg.stereo, cfg.features, cfg.pnp, cfg.keyframe, cfg.loop, cfg.refine, cfg.fusion)


def stereo_cloud(left_rgb, right_rgb, rig: StereoRig, params: StereoParams, gray=None):
    """Full dense stereo stage on one RGB pair: disparity map and camera-frame cloud."""
    from .io import luma

    gl = luma(left_rgb) if gray is None else gray
    dmap = stereo_stage(gl, luma(right_rgb), params)
    return dmap, disparity_to_cloud(dmap, left_rgb, rig, params.normal_window)


def _pixel_index(positions, k):
    u = np.clip(np.floor(positions[:, 0] + 0.5).astype(np.int64), 0, k.width - 1)
    v = np.clip(np.floor(positions[:, 1] + 0.5).astype(np.int64), 0, k.height - 1)
    return u, v


class Reconstruction:
    """Incremental state of one run; feed frames in order with :meth:`process`."""

    def __init__(self, rig: StereoRig, params: PipelineParams = PipelineParams(), report: RuntimeReport | None = None):
        self.rig = rig
        self.k = rig.intrinsics
        self.params = params
        self.report = RuntimeReport() if report is None else report
        self.model = SurfelCloud()
        self.landmarks = LandmarkMap()
        self.poses: list = []  # (frame index, world->camera) for every processed frame
        self.keyframes: list = []  # FrameRecord per keyframe, creation order
        self.since_keyframe: list = []  # non-keyframe records after the last keyframe
        self.prev: FrameRecord | None = None
        self.refine_results: list = []

    # ---------------------------------------------------------------- tracking

    def _track(self, index: int, feats: FeatureSet):
        prev = self.prev
        with _Timer(self.report, STAGES[1]):
            matches = histogram_vote(
                match_features(prev.features, feats, self.params.features.max_hamming), self.params.features.bin_size
            )
        lm = prev.landmarks[matches.idx_a]
        keep = lm >= 0
        if keep.sum() < max(6, self.params.pnp.min_inliers):
            raise TrackingFailure(index, f"only {int(keep.sum())} matches with known 3D points")
        m = matches.take(np.nonzero(keep)[0])
        lm = lm[keep]
        stored_ids = np.nonzero(prev.landmarks >= 0)[0]
        slot = np.full(len(prev.landmarks), -1)
        slot[stored_ids] = np.arange(len(stored_ids))
        problem = PnPProblem(
            self.landmarks[lm],
            m.pts_b,
            self.k,
            priority=np.arange(len(m)),
            stored_points=self.landmarks[prev.landmarks[stored_ids]],
            frame_points=feats.positions,
            match_stored=slot[m.idx_a],
            match_frame=m.idx_b,
            prior=prev.pose,
        )
        with _Timer(self.report, STAGES[2]):
            sol = dynamic_r1ppnp(problem, self.params.pnp)
        if sol.tracking_failure:
            raise TrackingFailure(index, f"no pose hypothesis reached {self.params.pnp.min_inliers} inliers")
        ids = np.full(len(feats), -1)
        ids[m.idx_b[sol.inliers]] = lm[sol.inliers]
        return sol, ids

    def _model_landmarks(self, pose: RigidPose, feats: FeatureSet, ids: np.ndarray) -> None:
        """Give features without a landmark the model point rasterized at their pixel."""
        todo = np.nonzero(ids < 0)[0]
        if len(todo) == 0 or len(self.model) == 0:
            return
        raster = rasterize(self.model, pose, self.k)
        u, v = _pixel_index(feats.positions[todo], self.k)
        sid = raster.ids[v, u]
        hit = sid >= 0
        ids[todo[hit]] = self.landmarks.add(self.model.positions[sid[hit]])

    def _stereo_landmarks(self, pose: RigidPose, feats: FeatureSet, ids: np.ndarray, cloud: StereoCloud) -> None:
        todo = np.nonzero(ids < 0)[0]
        u, v = _pixel_index(feats.positions[todo], self.k)
        ok = cloud.valid[v, u]
        pts = pose.inverse().apply(cloud.points[v[ok], u[ok]])
        ids[todo[ok]] = self.landmarks.add(pts)

    # ---------------------------------------------------------------- keyframes

    def _loop_observations(self, index: int, rec: FrameRecord) -> list:
        """Re-match overlapping earlier keyframes; returns the keyframe records that matched."""
        lp = self.params.loop
        if lp.max_candidates == 0 or len(self.keyframes) < 2:
            return []
        with _Timer(self.report, STAGES[3]):
            history = [(kf.keyframe_id, kf.pose) for kf in self.keyframes]
            cand = select_matching_keyframes(rec.pose, history, self.model, self.k, lp.max_candidates, lp.min_overlap)
        matched = []
        by_id = {kf.keyframe_id: kf for kf in self.keyframes}
        for kid in cand:
            kf = by_id[kid]
            with _Timer(self.report, STAGES[1]):
                ms = histogram_vote(
                    match_features(kf.features, rec.features, self.params.features.max_hamming),
                    self.params.features.bin_size,
                )
            lm = kf.landmarks[ms.idx_a]
            keep = np.nonzero(lm >= 0)[0]
            if len(keep) < self.params.keyframe.min_matches:
                continue
            ms, lm = ms.take(keep), lm[keep]
            problem = PnPProblem(self.landmarks[lm], ms.pts_b, self.k, priority=np.arange(len(ms)), prior=rec.pose)
            with _Timer(self.report, STAGES[2]):
                sol = dynamic_r1ppnp(problem, self.params.pnp)
            if sol.tracking_failure or sol.n_inliers < self.params.keyframe.min_matches:
                continue
            new = 0
            for f, l in zip(ms.idx_b[sol.inliers], lm[sol.inliers]):
                if rec.landmarks[f] < 0:
                    rec.landmarks[f] = l
                    new += 1
            log.debug("frame %d: keyframe %d re-matched, %d inliers, %d new observations", index, kid, sol.n_inliers, new)
            matched.append(kf)
        return matched

    def _build_window(self, rec: FrameRecord, loop: list):
        last = self.keyframes[-1]
        frames = [last] + list(self.since_keyframe) + [kf for kf in loop if kf is not last] + [rec]
        obs_f, obs_l, obs_uv = [], [], []
        for slot, fr in enumerate(frames):
            l, uv = fr.observations()
            obs_f.append(np.full(len(l), slot))
            obs_l.append(l)
            obs_uv.append(uv)
        obs_f, obs_l, obs_uv = np.concatenate(obs_f), np.concatenate(obs_l), np.concatenate(obs_uv)
        anchored = np.zeros(len(self.landmarks), bool)
        anchored[obs_l[obs_f == 0]] = True
        counts = np.bincount(obs_l, minlength=len(self.landmarks))
        use_lm = (counts >= 2) | anchored
        keep = use_lm[obs_l]
        obs_f, obs_l, obs_uv = obs_f[keep], obs_l[keep], obs_uv[keep]
        lm_ids, slot_of = np.unique(obs_l, return_inverse=True)
        window = OptimizationWindow.with_anchor(
            [fr.pose for fr in frames], self.landmarks[lm_ids], obs_f, slot_of, obs_uv, self.k,
            keyframe=len(frames) - 1, anchor=0, frame_ids=[fr.index for fr in frames], landmark_ids=lm_ids,
        )
        return window, frames

    def _refine(self, rec: FrameRecord, loop: list, cloud: StereoCloud) -> None:
        window, frames = self._build_window(rec, loop)
        with _Timer(self.report, STAGES[3]):
            res = lm_optimize(window, self.model, cloud, self.params.refine)
        self.refine_results.append(res)
        out = res.window
        for slot, fr in enumerate(frames):
            if not out.fixed_pose[slot]:
                fr.pose = out.poses[slot]
        free = ~out.fixed_landmark
        self.landmarks.update(out.landmark_ids[free], out.landmarks[free])
        pose_of = {fr.index: fr.pose for fr in frames}
        self.poses = [(i, pose_of.get(i, p)) for i, p in self.poses]

    # ---------------------------------------------------------------- driver

    def process(self, index: int, left, right, gray=None) -> FrameRecord:
        """Consume one stereo pair (RGB uint8). Raises :class:`TrackingFailure`."""
        from .io import luma

        g = luma(left) if gray is None else gray
        with _Timer(self.report, STAGES[1]):
            feats = extract(g, self.params.features.max_count, self.params.features.threshold)
        self.report.frames += 1
        if self.prev is None:
            rec = FrameRecord(index, RigidPose(), feats, np.full(len(feats), -1))
            self._keyframe(rec, left, right, g, loop_ok=False)
        else:
            sol, ids = self._track(index, feats)
            rec = FrameRecord(index, sol.pose, feats, ids)
            last = self.keyframes[-1]
            frames_since = len(self.since_keyframe) + 1
            if keyframe_decision(sol.n_inliers, sol.pose, last.pose, frames_since, self.params.keyframe):
                self._keyframe(rec, left, right, g, loop_ok=True)
            else:
                self._model_landmarks(rec.pose, feats, rec.landmarks)
                self.since_keyframe.append(rec)
                self.poses.append((index, rec.pose))
        self.prev = rec
        return rec

    def _keyframe(self, rec: FrameRecord, left, right, gray, loop_ok: bool) -> None:
        with _Timer(self.report, STAGES[0]):
            _, cloud = stereo_cloud(left, right, self.rig, self.params.stereo, gray)
        self.poses.append((rec.index, rec.pose))
        if loop_ok:
            loop = self._loop_observations(rec.index, rec)
            self._refine(rec, loop, cloud)
        rec.keyframe_id = len(self.keyframes)
        with _Timer(self.report, STAGES[4]):
            fuse_frame(self.model, cloud, rec.pose, self.k, self.params.fusion)
        self._stereo_landmarks(rec.pose, rec.features, rec.landmarks, cloud)
        self.keyframes.append(rec)
        self.since_keyframe = []
        self.report.keyframes += 1
        log.info("frame %d: keyframe %d, model %d surfels", rec.index, rec.keyframe_id, len(self.model))
