"""Calibration, configuration and frame input; PLY, trajectory and PGM output.

Every text parser rejects malformed input with a ``file:line`` diagnostic
instead of guessing. Writers are byte-deterministic.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import CameraIntrinsics, RigidPose, StereoRig, quat_normalize
from .features import FeatureParams
from .fusion import FusionParams, SurfelCloud
from .pnp import PnPParams
from .refine import KeyframePolicy, LoopParams, RefineParams
from .stereo import StereoParams


class ParseError(ValueError):
    """Malformed input file; the message starts with ``path:line``."""


def _key_values(path):
    """``(line_no, key, value)`` for every ``key = value`` line; ``#`` starts a comment."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ParseError(f"{path}: cannot read ({e.strerror})") from e
    out = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ParseError(f"{path}:{no}: expected 'key = value', got {raw.strip()!r}")
        out.append((no, key, value))
    return out


# --------------------------------------------------------------------------
# calibration

CALIBRATION_KEYS = ("fx", "fy", "cx", "cy", "baseline_mm", "width", "height")


def load_calibration(path) -> StereoRig:
    """Rectified rig from a ``key = value`` file with keys fx, fy, cx, cy, baseline_mm, width, height."""
    vals, lines = {}, {}
    for no, key, value in _key_values(path):
        if key not in CALIBRATION_KEYS:
            raise ParseError(f"{path}:{no}: unknown calibration key '{key}'")
        if key in vals:
            raise ParseError(f"{path}:{no}: duplicate calibration key '{key}'")
        try:
            vals[key] = float(value)
        except ValueError:
            raise ParseError(f"{path}:{no}: '{key}' is not a number: {value!r}") from None
        if not np.isfinite(vals[key]):
            raise ParseError(f"{path}:{no}: '{key}' must be finite")
        lines[key] = no
    for key in CALIBRATION_KEYS:
        if key not in vals:
            raise ParseError(f"{path}: missing calibration key '{key}'")

    def bad(key, why):
        return ParseError(f"{path}:{lines[key]}: '{key}' {why}")

    for key in ("width", "height"):
        if vals[key] != int(vals[key]) or vals[key] <= 0:
            raise bad(key, "must be a positive integer")
    for key in ("fx", "fy", "baseline_mm"):
        if vals[key] <= 0:
            raise bad(key, "must be positive")
    if not 0 <= vals["cx"] <= vals["width"]:
        raise bad("cx", "must lie within [0, width]")
    if not 0 <= vals["cy"] <= vals["height"]:
        raise bad("cy", "must lie within [0, height]")
    k = CameraIntrinsics(vals["fx"], vals["fy"], vals["cx"], vals["cy"], int(vals["width"]), int(vals["height"]))
    return StereoRig(k, vals["baseline_mm"])


def write_calibration(rig: StereoRig, path) -> None:
    k = rig.intrinsics
    vals = dict(fx=k.focal_x, fy=k.focal_y, cx=k.center_x, cy=k.center_y, baseline_mm=rig.baseline, width=k.width, height=k.height)
    Path(path).write_text("".join(f"{key} = {vals[key]!r}\n" for key in CALIBRATION_KEYS))


# --------------------------------------------------------------------------
# configuration

SECTIONS = {
    "stereo": StereoParams,
    "features": FeatureParams,
    "pnp": PnPParams,
    "keyframe": KeyframePolicy,
    "loop": LoopParams,
    "refine": RefineParams,
    "fusion": FusionParams,
}


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs. Section keys are written ``section.field`` in files."""

    input_dir: str = "."
    calibration: str = ""  # defaults to <input_dir>/calibration.txt
    output_dir: str = "output"
    max_frames: int = 0  # 0 reads until the first missing frame
    stereo: StereoParams = field(default_factory=StereoParams)
    features: FeatureParams = field(default_factory=FeatureParams)
    pnp: PnPParams = field(default_factory=PnPParams)
    keyframe: KeyframePolicy = field(default_factory=KeyframePolicy)
    loop: LoopParams = field(default_factory=LoopParams)
    refine: RefineParams = field(default_factory=RefineParams)
    fusion: FusionParams = field(default_factory=FusionParams)

    @property
    def calibration_path(self) -> Path:
        return Path(self.calibration) if self.calibration else Path(self.input_dir) / "calibration.txt"

    def items(self):
        """Flat ``(key, value)`` pairs in a fixed order."""
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in SECTIONS:
                for g in dataclasses.fields(v):
                    yield f"{f.name}.{g.name}", getattr(v, g.name)
            else:
                yield f.name, v

    @classmethod
    def keys(cls) -> list:
        return [k for k, _ in cls().items()]


def _convert(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if default is None:  # optional number, "auto" keeps it unset
        return None if text.lower() in ("none", "auto") else float(text)
    return text


def apply_settings(config: PipelineConfig, settings, source: str = "--set") -> PipelineConfig:
    """Apply ``(line, key, value)`` triples; unknown keys and bad values raise :class:`ParseError`."""
    flat = dict(config.items())
    sections = {name: {} for name in SECTIONS}
    top = {}
    for no, key, value in settings:
        where = f"{source}:{no}" if no is not None else source
        if key not in flat:
            raise ParseError(f"{where}: unknown configuration key '{key}'")
        try:
            v = _convert(value, flat[key])
        except ValueError as e:
            raise ParseError(f"{where}: bad value for '{key}': {e}") from None
        if "." in key:
            sec, name = key.split(".", 1)
            sections[sec][name] = v
        else:
            top[key] = v
    try:
        updated = {sec: dataclasses.replace(getattr(config, sec), **kw) for sec, kw in sections.items() if kw}
    except ValueError as e:
        raise ParseError(f"{source}: {e}") from None
    return dataclasses.replace(config, **top, **updated)


def parse_overrides(pairs) -> list:
    """``key=value`` strings (as given to ``--set``) into ``(None, key, value)`` triples."""
    out = []
    for p in pairs or ():
        if "=" not in p:
            raise ParseError(f"--set: expected key=value, got {p!r}")
        k, v = (s.strip() for s in p.split("=", 1))
        out.append((None, k, v))
    return out


def load_config(path, overrides=()) -> PipelineConfig:
    """Parse a config file, then apply ``key=value`` overrides.

    Relative paths are taken relative to the config file's directory.
    """
    path = Path(path)
    cfg = apply_settings(PipelineConfig(), _key_values(path), str(path))
    cfg = apply_settings(cfg, parse_overrides(overrides))
    base = path.parent

    def resolve(p):
        return p if not p or os.path.isabs(p) else str(base / p)

    return dataclasses.replace(
        cfg, input_dir=resolve(cfg.input_dir), calibration=resolve(cfg.calibration), output_dir=resolve(cfg.output_dir)
    )


def write_config(config: PipelineConfig, path) -> None:
    lines = []
    for k, v in config.items():
        if v is None:
            v = "auto"
        if v == "":
            continue  # unset path, default applies
        lines.append(f"{k} = {v}\n")
    Path(path).write_text("".join(lines))


# --------------------------------------------------------------------------
# frames


def frame_paths(directory, index: int):
    d = Path(directory)
    return d / f"left_{index:06d}.png", d / f"right_{index:06d}.png"


def _read_rgb(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"missing frame image {path}")
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L", "P"):
            raise ValueError(f"{path}: unsupported image mode {im.mode} (8-bit RGB expected)")
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_frame_pair(directory, index: int, rig: StereoRig | None = None):
    """Left and right RGB images (H, W, 3) uint8 of frame ``index``."""
    lp, rp = frame_paths(directory, index)
    left, right = _read_rgb(lp), _read_rgb(rp)
    if rig is not None:
        want = (rig.intrinsics.height, rig.intrinsics.width)
        for p, img in ((lp, left), (rp, right)):
            if img.shape[:2] != want:
                raise ValueError(
                    f"{p}: image is {img.shape[1]}x{img.shape[0]}, calibration expects {want[1]}x{want[0]}"
                )
    elif left.shape != right.shape:
        raise ValueError(f"{rp}: size differs from {lp}")
    return left, right


def frame_exists(directory, index: int) -> bool:
    lp, rp = frame_paths(directory, index)
    return lp.exists() and rp.exists()


def save_frame_pair(directory, index: int, left, right) -> None:
    Path(directory).mkdir(parents=True, exist_ok=True)
    lp, rp = frame_paths(directory, index)
    Image.fromarray(np.asarray(left, dtype=np.uint8)).save(lp)
    Image.fromarray(np.asarray(right, dtype=np.uint8)).save(rp)


def luma(rgb) -> np.ndarray:
    """``round(0.299 R + 0.587 G + 0.114 B)`` as uint8 (halves round up)."""
    a = np.asarray(rgb, dtype=np.float64)
    if a.ndim == 2:
        return np.asarray(rgb, dtype=np.uint8)
    g = 0.299 * a[..., 0] + 0.587 * a[..., 1] + 0.114 * a[..., 2]
    return np.clip(np.floor(g + 0.5), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# PLY

_PLY_DTYPE = np.dtype(
    [
        ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
        ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
        ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ]
)


def _ply_header(n: int) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property float {p}" for p in ("x", "y", "z", "nx", "ny", "nz")]
    lines += [f"property uchar {p}" for p in ("red", "green", "blue")]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def export_ply(model: SurfelCloud, path) -> None:
    """Binary little-endian PLY, one 27-byte record per surfel in model order."""
    rec = np.zeros(len(model), dtype=_PLY_DTYPE)
    for i, name in enumerate("xyz"):
        rec[name] = model.positions[:, i]
    for i, name in enumerate(("nx", "ny", "nz")):
        rec[name] = model.normals[:, i]
    col = model.colors_u8()
    for i, name in enumerate(("red", "green", "blue")):
        rec[name] = col[:, i]
    with open(path, "wb") as f:
        f.write(_ply_header(len(model)))
        f.write(rec.tobytes())


def read_ply(path):
    """``(positions, normals, colors)`` from a file written by :func:`export_ply`."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if end < 0:
        raise ParseError(f"{path}: no end_header")
    header = data[:end].decode("ascii").splitlines()
    if header[:2] != ["ply", "format binary_little_endian 1.0"]:
        raise ParseError(f"{path}:1: not a binary little-endian PLY")
    n = None
    for no, line in enumerate(header, 1):
        if line.startswith("element vertex "):
            n = int(line.split()[2])
    if n is None or data[: end + 11] != _ply_header(n):
        raise ParseError(f"{path}: unexpected PLY layout")
    body = data[end + 11 :]
    if len(body) != n * _PLY_DTYPE.itemsize:
        raise ParseError(f"{path}: body holds {len(body)} bytes, expected {n * _PLY_DTYPE.itemsize}")
    rec = np.frombuffer(body, dtype=_PLY_DTYPE)
    pos = np.stack([rec["x"], rec["y"], rec["z"]], 1)
    nrm = np.stack([rec["nx"], rec["ny"], rec["nz"]], 1)
    col = np.stack([rec["red"], rec["green"], rec["blue"]], 1)
    return pos, nrm, col


# --------------------------------------------------------------------------
# trajectory

TRAJECTORY_HEADER = "# index tx ty tz qx qy qz qw (camera-to-world, mm)\n"


def _g9(x: float) -> str:
    return f"{float(x) + 0.0:.9g}"  # + 0.0 folds -0 into 0


def export_trajectory(frames, path) -> None:
    """One line per ``(index, world_to_camera_pose)``, written as the camera-to-world motion.

    The header comment is only written for a non-empty trajectory, so an
    empty frame list gives an empty file.
    """
    lines = []
    for index, pose in frames:
        c2w = pose.inverse()
        w, x, y, z = quat_normalize(c2w.rotation)
        vals = [*c2w.translation, x, y, z, w]
        lines.append(f"{int(index)} " + " ".join(_g9(v) for v in vals) + "\n")
    with open(path, "w") as f:
        if lines:
            f.write(TRAJECTORY_HEADER)
        f.writelines(lines)


def read_trajectory(path) -> list:
    """``[(index, world_to_camera_pose)]`` from :func:`export_trajectory` output."""
    out = []
    for no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ParseError(f"{path}:{no}: expected 8 fields, got {len(parts)}")
        try:
            index = int(parts[0])
            tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts[1:])
        except ValueError:
            raise ParseError(f"{path}:{no}: non-numeric field") from None
        q = np.array([qw, qx, qy, qz])
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ParseError(f"{path}:{no}: quaternion is not unit length")
        out.append((index, RigidPose(q, [tx, ty, tz]).inverse()))
    return out


# --------------------------------------------------------------------------
# disparity image


def disparity_to_pgm16(disparity, valid) -> np.ndarray:
    """``round(256 d)`` as uint16, 0 where invalid (negative disparities clip to 0)."""
    d = np.where(valid, np.asarray(disparity, dtype=np.float64) * 256.0, 0.0)
    return np.clip(np.floor(d + 0.5), 0, 65535).astype(np.uint16)


def write_pgm16(image, path) -> None:
    img = np.asarray(image, dtype=np.uint16)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(img.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5" or int(fields[3]) != 65535:
        raise ParseError(f"{path}:1: not a 16-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    body = data[pos + 1 :]
    if len(body) != 2 * w * h:
        raise ParseError(f"{path}: truncated image data")
    return np.frombuffer(body, dtype=">u2").reshape(h, w).astype(np.uint16)


# --------------------------------------------------------------------------
# runtime report


def write_key_values(pairs, path) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in pairs))


__all__ = [
    "ParseError", "load_calibration", "write_calibration", "PipelineConfig", "load_config", "apply_settings",
    "parse_overrides", "write_config", "load_frame_pair", "save_frame_pair", "frame_exists", "frame_paths", "luma",
    "export_ply", "read_ply", "export_trajectory", "read_trajectory", "disparity_to_pgm16", "write_pgm16",
    "read_pgm16", "write_key_values",
]
