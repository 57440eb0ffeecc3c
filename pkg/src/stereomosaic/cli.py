"""Command-line entry point: ``run`` for the full pipeline, ``stereo`` for one frame's dense stage."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .fusion import SurfelCloud
from .io import (
    ParseError,
    PipelineConfig,
    disparity_to_pgm16,
    export_ply,
    export_trajectory,
    frame_exists,
    load_calibration,
    load_config,
    load_frame_pair,
    write_key_values,
    write_pgm16,
)
from .pipeline import STAGES, PipelineParams, Reconstruction, RuntimeReport, TrackingFailure, stereo_cloud

log = logging.getLogger("stereomosaic")

MODEL_FILE = "model.ply"
TRAJECTORY_FILE = "trajectory.txt"
REPORT_FILE = "runtime_report.txt"


def run_pipeline(config: PipelineConfig, echo: bool = True) -> Reconstruction:
    """Process frames 0, 1, ... until one is missing (or ``max_frames``) and write all outputs.

    Raises :class:`TrackingFailure`, :class:`ParseError` or ``OSError`` on failure.
    """
    rig = load_calibration(config.calibration_path)
    params = PipelineParams.from_config(config)
    rec = Reconstruction(rig, params)
    i = 0
    while (config.max_frames <= 0 or i < config.max_frames) and frame_exists(config.input_dir, i):
        left, right = load_frame_pair(config.input_dir, i, rig)
        rec.process(i, left, right)
        i += 1
    if i == 0:
        raise FileNotFoundError(f"no frames found in {config.input_dir} (expected left_000000.png)")
    for res in rec.refine_results:
        if not res.converged:
            log.warning("a refinement window stopped after %d sweeps without converging", res.sweeps)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    export_ply(rec.model, out / MODEL_FILE)
    export_trajectory(rec.poses, out / TRAJECTORY_FILE)
    write_key_values(rec.report.key_values(), out / REPORT_FILE)
    if echo:
        print(rec.report.table())
    return rec


def run_stereo_only(config: PipelineConfig, frame_index: int):
    """Dense stereo on one pair: camera-frame PLY and 16-bit disparity PGM in ``output_dir``."""
    rig = load_calibration(config.calibration_path)
    left, right = load_frame_pair(config.input_dir, frame_index, rig)
    dmap, cloud = stereo_cloud(left, right, rig, config.stereo)
    pts, nrm, col, _ = cloud.flat()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ply = out / f"stereo_{frame_index:06d}.ply"
    pgm = out / f"disparity_{frame_index:06d}.pgm"
    export_ply(SurfelCloud(pts, col, nrm), ply)
    write_pgm16(disparity_to_pgm16(dmap.disparity, dmap.valid), pgm)
    return ply, pgm


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stereomosaic", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-frame progress")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "reconstruct a whole sequence"), ("stereo", "dense stereo for a single frame")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="key = value configuration file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if name == "stereo":
            s.add_argument("--frame", type=int, required=True, help="frame index")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config, args.set)
        if args.command == "run":
            run_pipeline(config)
        else:
            for path in run_stereo_only(config, args.frame):
                print(path)
    except TrackingFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ParseError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


__all__ = ["main", "run_pipeline", "run_stereo_only", "RuntimeReport", "STAGES", "build_parser"]
