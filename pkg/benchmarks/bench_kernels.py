"""Compare the numba kernels against the pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--size 128] [--repeat 3]

Each kernel runs once per backend to warm up (numba compiles on first call),
then the best of ``--repeat`` timings is reported. Outputs of the two
backends are checked for equality before timing.
"""
import argparse
import time

import numpy as np
from scipy import ndimage

from kitsseg import _accel
from kitsseg._kernels import label_components
from kitsseg.postproc import fix_cyst_rim, remove_small_components
from kitsseg.volcore import Geometry, LabelMap, Volume
from kitsseg.xform import resample


def make_inputs(n, seed=0):
    rng = np.random.default_rng(seed)
    # smoothed noise gives blobs of varied size, closer to real masks than salt noise
    field = ndimage.gaussian_filter(rng.normal(size=(n, n, n)), 2.0)
    mask = field > 0.05
    geom = Geometry((n, n, n), (0.78, 0.78, 0.78))
    vol = Volume(geom, field.astype(np.float32))
    labels = np.digitize(field, [0.05, 0.15, 0.25]).astype(np.uint8)  # nested 1 < 3 < 2 shells
    labels[labels == 2], labels[labels == 3] = 3, 2
    return mask, vol, LabelMap(geom, labels)


def kernels(mask, vol, labels):
    return {
        "label_components(26)": lambda: label_components(mask, 26)[0],
        "label_components(6)": lambda: label_components(mask, 6)[0],
        "resample trilinear 0.78->1.5": lambda: resample(vol, (1.5, 1.5, 1.5)).data,
        "resample trilinear 0.78->0.5": lambda: resample(vol, (0.5, 0.5, 0.5)).data,
        "remove_small + fix_cyst_rim": lambda: fix_cyst_rim(remove_small_components(labels)).data,
    }


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed (or KITSSEG_DISABLE_NUMBA is set); nothing to compare")

    inputs = make_inputs(args.size)
    mask = inputs[0]
    print(f"volume {args.size}^3, foreground fraction {mask.mean():.3f}, best of {args.repeat}")
    print(f"{'kernel':32s} {'numpy [s]':>10s} {'numba [s]':>10s} {'speedup':>8s}")
    prev = _accel.backend()
    try:
        for name in kernels(*inputs):
            timings, outputs = {}, {}
            for backend in ("numpy", "numba"):
                _accel.set_backend(backend)
                fn = kernels(*inputs)[name]
                outputs[backend] = fn()  # warm-up / compile
                timings[backend] = best_of(fn, args.repeat)
            same = np.array_equal(outputs["numpy"], outputs["numba"])
            flag = "" if same else "  OUTPUT MISMATCH"
            speedup = timings["numpy"] / timings["numba"]
            print(f"{name:32s} {timings['numpy']:10.4f} {timings['numba']:10.4f} {speedup:7.1f}x{flag}")
    finally:
        _accel.set_backend(prev)


if __name__ == "__main__":
    main()
