"""Time the numba kernels against their numpy fallbacks on synthetic inputs.

    python benchmarks/bench_kernels.py [--repeat 3] [--width 320 --height 240]

Each public entry point is called once per backend to warm up (numba compiles
on first use), then timed as the best of ``--repeat`` calls.
"""

import argparse
import os
import time

import numpy as np

from stereomosaic import features, fusion, stereo, synthetic
from stereomosaic._accel import ENV_FLAG, HAVE_NUMBA
from stereomosaic.core import RigidPose
from stereomosaic.io import luma


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(width, height):
    rig = synthetic.default_rig(width, height, focal=400.0 * width / 320)
    pair = synthetic.render_pair(synthetic.SphereOnPlane(), synthetic.Texture(seed=1), RigidPose(), rig)
    gl, gr = luma(pair.left), luma(pair.right)
    params = stereo.StereoParams()
    raw = stereo.compute_disparity(gl, gr, params)
    clean = stereo.cleanup_pass(raw, params)
    dmap = stereo.refine_disparities(clean, gl, gr, params)
    cloud = stereo.disparity_to_cloud(dmap, pair.left, rig)
    model = fusion.cloud_to_model(cloud, RigidPose(), rig.intrinsics)
    fa = features.extract(gl)
    fb = features.extract(luma(pair.right))
    moved = RigidPose.from_rotvec([0.01, -0.02, 0.005], [1.0, 0.5, 0.0])
    return {
        "compute_disparity": lambda: stereo.compute_disparity(gl, gr, params),
        "cleanup_pass": lambda: stereo.cleanup_pass(raw, params),
        "refine_disparities": lambda: stereo.refine_disparities(clean, gl, gr, params),
        "disparity_to_cloud": lambda: stereo.disparity_to_cloud(dmap, pair.left, rig),
        "extract (corners)": lambda: features.extract(gl),
        "match_features": lambda: features.match_features(fa, fb),
        "rasterize": lambda: fusion.rasterize(model, moved, rig.intrinsics),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--width", type=int, default=320)
    ap.add_argument("--height", type=int, default=240)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not importable; only the numpy column is meaningful")
    saved = os.environ.get(ENV_FLAG)
    table = {}
    try:
        for flag, col in (("1", "numba"), ("0", "numpy")):
            os.environ[ENV_FLAG] = flag
            for name, fn in cases(args.width, args.height).items():
                table.setdefault(name, {})[col] = best_of(fn, args.repeat)
    finally:
        if saved is None:
            os.environ.pop(ENV_FLAG, None)
        else:
            os.environ[ENV_FLAG] = saved
    w = max(len(k) for k in table)
    print(f"{'kernel':<{w}}  {'numba ms':>10}  {'numpy ms':>10}  {'speedup':>8}")
    for name, t in table.items():
        print(f"{name:<{w}}  {1e3 * t['numba']:>10.1f}  {1e3 * t['numpy']:>10.1f}  {t['numpy'] / t['numba']:>7.1f}x")


if __name__ == "__main__":
    main()
