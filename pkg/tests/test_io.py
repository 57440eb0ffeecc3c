import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from stereomosaic.core import CameraIntrinsics, RigidPose, StereoRig
from stereomosaic.fusion import SurfelCloud
from stereomosaic.io import (
    TRAJECTORY_HEADER,
    ParseError,
    PipelineConfig,
    disparity_to_pgm16,
    export_ply,
    export_trajectory,
    load_calibration,
    load_config,
    load_frame_pair,
    luma,
    read_pgm16,
    read_ply,
    read_trajectory,
    save_frame_pair,
    write_calibration,
    write_config,
    write_pgm16,
)

CAL = "fx = 1000\nfy = 1000\ncx = 480\ncy = 270\nbaseline_mm = 5\nwidth = 960\nheight = 540\n"


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_calibration_example(tmp_path):
    rig = load_calibration(write(tmp_path, "cal.txt", "# rig\n" + CAL))
    k = rig.intrinsics
    assert (k.focal_x, k.focal_y, k.center_x, k.center_y, k.width, k.height) == (1000, 1000, 480, 270, 960, 540)
    assert rig.baseline == 5.0


def test_calibration_round_trip(tmp_path):
    rig = StereoRig(CameraIntrinsics(401.25, 399.5, 159.5, 119.5, 320, 240), 4.75)
    write_calibration(rig, tmp_path / "c.txt")
    assert load_calibration(tmp_path / "c.txt") == rig


@pytest.mark.parametrize(
    "text, needle",
    [
        (CAL.replace("baseline_mm = 5", "baseline_mm = -1"), "baseline_mm"),
        (CAL.replace("fy = 1000\n", ""), "fy"),
        (CAL.replace("cx = 480", "cx = abc"), "cx"),
        (CAL.replace("width = 960", "width = 96.5"), "width"),
        (CAL + "fz = 3\n", "fz"),
        (CAL + "garbage line\n", ":8"),
    ],
)
def test_calibration_errors_name_key(tmp_path, text, needle):
    p = write(tmp_path, "cal.txt", text)
    with pytest.raises(ParseError) as e:
        load_calibration(p)
    assert needle in str(e.value) and str(p) in str(e.value)


def test_baseline_error_names_line(tmp_path):
    p = write(tmp_path, "cal.txt", CAL.replace("baseline_mm = 5", "baseline_mm = -1"))
    with pytest.raises(ParseError, match=r":5: 'baseline_mm'"):
        load_calibration(p)


def test_luma():
    assert luma(np.array([[[255, 0, 0]]], np.uint8))[0, 0] == 76
    assert luma(np.array([[[0, 255, 0]]], np.uint8))[0, 0] == 150
    assert luma(np.array([[[255, 255, 255]]], np.uint8))[0, 0] == 255
    rgb = np.random.default_rng(0).integers(0, 256, (20, 20, 3))
    ref = np.array([[int(0.299 * r + 0.587 * g + 0.114 * b + 0.5) for r, g, b in row] for row in rgb])
    np.testing.assert_array_equal(luma(rgb), ref)


def test_frame_pair_load_and_dimension_error(tmp_path):
    rig = load_calibration(write(tmp_path, "cal.txt", CAL))
    rng = np.random.default_rng(0)
    left = rng.integers(0, 256, (540, 960, 3), dtype=np.uint8)
    save_frame_pair(tmp_path, 0, left, left[:, ::-1])
    a, b = load_frame_pair(tmp_path, 0, rig)
    np.testing.assert_array_equal(a, left)
    np.testing.assert_array_equal(b, left[:, ::-1])
    Image.fromarray(left[:100, :100]).save(tmp_path / "right_000001.png")
    Image.fromarray(left).save(tmp_path / "left_000001.png")
    with pytest.raises(ValueError, match="right_000001.png.*100x100"):
        load_frame_pair(tmp_path, 1, rig)
    with pytest.raises(FileNotFoundError, match="left_000002.png"):
        load_frame_pair(tmp_path, 2, rig)


def test_ply_empty(tmp_path):
    export_ply(SurfelCloud(), tmp_path / "e.ply")
    data = (tmp_path / "e.ply").read_bytes()
    assert b"element vertex 0\n" in data and data.endswith(b"end_header\n")
    pos, _, _ = read_ply(tmp_path / "e.ply")
    assert pos.shape == (0, 3)


def test_ply_single_record(tmp_path):
    export_ply(SurfelCloud([[1.0, 2.0, 3.0]], colors=[[255, 255, 255]]), tmp_path / "one.ply")
    data = (tmp_path / "one.ply").read_bytes()
    body = data[data.index(b"end_header\n") + len(b"end_header\n") :]
    assert len(body) == 27
    assert struct.unpack("<6f3B", body) == (1.0, 2.0, 3.0, 0.0, 0.0, -1.0, 255, 255, 255)
    assert data.startswith(b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n")


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    n = rng.normal(size=(50, 3))
    model = SurfelCloud(rng.uniform(-100, 100, (50, 3)), rng.uniform(0, 255, (50, 3)), n / np.linalg.norm(n, axis=1, keepdims=True))
    export_ply(model, tmp_path / "m.ply")
    pos, nrm, col = read_ply(tmp_path / "m.ply")
    np.testing.assert_array_equal(pos, model.positions.astype(np.float32))
    np.testing.assert_array_equal(nrm, model.normals.astype(np.float32))
    np.testing.assert_array_equal(col, np.clip(np.floor(model.colors + 0.5), 0, 255).astype(np.uint8))
    export_ply(model, tmp_path / "m2.ply")
    assert (tmp_path / "m.ply").read_bytes() == (tmp_path / "m2.ply").read_bytes()


def test_trajectory_identity_line(tmp_path):
    export_trajectory([(0, RigidPose())], tmp_path / "t.txt")
    assert (tmp_path / "t.txt").read_text() == TRAJECTORY_HEADER + "0 0 0 0 0 0 0 1\n"


def test_trajectory_empty(tmp_path):
    export_trajectory([], tmp_path / "t.txt")
    assert (tmp_path / "t.txt").read_bytes() == b""
    assert read_trajectory(tmp_path / "t.txt") == []


def test_trajectory_is_camera_to_world(tmp_path):
    pose = RigidPose(translation=[0.0, 0.0, -5.0])  # camera center at z = +5
    export_trajectory([(7, pose)], tmp_path / "t.txt")
    assert (tmp_path / "t.txt").read_text().splitlines()[1] == "7 0 0 5 0 0 0 1"


@settings(max_examples=30, deadline=None)
@given(v=st.lists(st.floats(-3.0, 3.0), min_size=6, max_size=6), scale=st.floats(-500.0, 500.0))
def test_trajectory_round_trip(v, scale, tmp_path_factory):
    pose = RigidPose.from_rotvec(v[:3], np.array(v[3:]) * scale)
    path = tmp_path_factory.mktemp("traj") / "t.txt"
    export_trajectory([(3, pose)], path)
    [(i, back)] = read_trajectory(path)
    assert i == 3
    np.testing.assert_allclose(back.R, pose.R, atol=1e-8)
    np.testing.assert_allclose(back.translation, pose.translation, rtol=1e-8, atol=1e-8 * max(1.0, abs(scale)))


def test_trajectory_parse_errors(tmp_path):
    with pytest.raises(ParseError, match=":2: expected 8 fields"):
        read_trajectory(write(tmp_path, "t.txt", TRAJECTORY_HEADER + "0 0 0\n"))
    with pytest.raises(ParseError, match=":1: quaternion"):
        read_trajectory(write(tmp_path, "t.txt", "0 0 0 0 0 0 0 2\n"))


def test_pgm16(tmp_path):
    d = np.array([[7.0, 0.5, -2.0], [1.0 / 512, 255.9, 3.0]])
    valid = np.array([[True, True, True], [True, True, False]])
    img = disparity_to_pgm16(d, valid)
    np.testing.assert_array_equal(img, [[1792, 128, 0], [1, 65510, 0]])
    write_pgm16(img, tmp_path / "d.pgm")
    data = (tmp_path / "d.pgm").read_bytes()
    assert data.startswith(b"P5\n3 2\n65535\n")
    assert data[len(b"P5\n3 2\n65535\n") :][:2] == struct.pack(">H", 1792)
    np.testing.assert_array_equal(read_pgm16(tmp_path / "d.pgm"), img)


def test_config_defaults_and_overrides(tmp_path):
    p = write(tmp_path, "cfg.txt", "# run\ninput_dir = frames\nstereo.window = 9\nkeyframe.pose_threshold = 12.5\n")
    cfg = load_config(p, ["refine.max_outer=5", "fusion.trunc = 1.5"])
    assert cfg.stereo.window == 9
    assert cfg.keyframe.pose_threshold == 12.5
    assert cfg.refine.max_outer == 5 and cfg.fusion.trunc == 1.5
    assert cfg.input_dir == str(tmp_path / "frames")
    assert cfg.calibration_path == tmp_path / "frames" / "calibration.txt"
    assert PipelineConfig().stereo.alpha == 0.1 and PipelineConfig().stereo.smoothing_radius == 15


def test_config_rejects_unknown_and_bad(tmp_path):
    with pytest.raises(ParseError, match=r"cfg.txt:2: unknown configuration key 'stereo.windw'"):
        load_config(write(tmp_path, "cfg.txt", "input_dir = .\nstereo.windw = 9\n"))
    with pytest.raises(ParseError, match="stereo.window"):
        load_config(write(tmp_path, "cfg.txt", "stereo.window = nine\n"))
    with pytest.raises(ParseError, match="window"):
        load_config(write(tmp_path, "cfg.txt", "stereo.window = 4\n"))
    with pytest.raises(ParseError, match="--set"):
        load_config(write(tmp_path, "cfg.txt", ""), ["bogus=1"])
    with pytest.raises(ParseError, match="key=value"):
        load_config(write(tmp_path, "cfg.txt", ""), ["stereo.window"])


def test_config_write_read(tmp_path):
    cfg = load_config(write(tmp_path, "a.txt", "stereo.d_max = 60\n"), ["output_dir=/abs/out"])
    write_config(cfg, tmp_path / "b.txt")
    again = load_config(tmp_path / "b.txt")
    assert dict(again.items()) == dict(cfg.items())
