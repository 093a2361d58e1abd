"""Benchmark the compiled geometry kernels against the NumPy fallback.

The per-frame association step hammers these three pairwise kernels on
every frame, so they are the extension module's reason to exist. Run:

    python benchmarks/bench_kernels.py [--sizes 50,200,1000] [--repeat 30]

The script also times one full association step (graph build + network
forward + greedy matching) on a crowded synthetic frame under each
backend, which is the end-to-end number the kernels actually move.
"""

import argparse
import importlib
import os
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from graphmot import _kernels_py  # noqa: E402

try:
    from graphmot import _native
except ImportError:
    _native = None

KERNELS = ("iou_matrix", "center_dist_matrix", "feature_dist_matrix")


def random_boxes(rng, n):
    out = np.empty((n, 4))
    out[:, :2] = rng.uniform(0, 1000, size=(n, 2))
    out[:, 2:] = rng.uniform(20, 120, size=(n, 2))
    return out


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(sizes, repeat):
    rng = np.random.default_rng(0)
    impls = [("numpy", _kernels_py)] + ([("native", _native)] if _native else [])
    print(f"{'kernel':<22s} {'n':>5s}  " + "  ".join(f"{name:>10s}" for name, _ in impls)
          + ("   speedup" if _native else ""))
    for n in sizes:
        a, b = random_boxes(rng, n), random_boxes(rng, n)
        fa, fb = rng.normal(size=(n, 32)), rng.normal(size=(n, 32))
        for kernel in KERNELS:
            args = (fa, fb) if kernel == "feature_dist_matrix" else (a, b)
            times = [best_of(lambda f=getattr(impl, kernel): f(*args), repeat)
                     for _, impl in impls]
            line = f"{kernel:<22s} {n:>5d}  " + "  ".join(f"{t * 1e3:>8.3f}ms" for t in times)
            if _native:
                line += f"   {times[0] / times[1]:>6.2f}x"
            print(line)


def bench_association_step(repeat):
    """One full association step on a crowded frame, per backend.

    graphmot.kernels is reloaded in place, which retargets every module
    holding a reference to it.
    """
    results = {}
    for backend, flag in (("python", "1"), ("native", "")):
        if backend == "native" and _native is None:
            continue
        env = os.environ.copy()
        if flag:
            os.environ["GRAPHMOT_NO_NATIVE"] = flag
        else:
            os.environ.pop("GRAPHMOT_NO_NATIVE", None)
        import graphmot.kernels

        importlib.reload(graphmot.kernels)
        from graphmot import kernels
        from graphmot.mpn import create_model
        from graphmot.synth import generate, preset
        from graphmot.tracker import TrackerConfig, run_sequence

        assert kernels.BACKEND == backend, kernels.BACKEND
        scene = generate(preset("crowded", seed=1, n_frames=60))
        model = create_model(scene.config.feature_dim, seed=0)
        cfg = TrackerConfig(ratio_variant="app", image_size=scene.config.image_size)

        def run():
            run_sequence(scene.frames, model, cfg)

        results[backend] = best_of(run, max(1, repeat // 10)) / 60.0
        os.environ.clear()
        os.environ.update(env)
    import graphmot.kernels

    importlib.reload(graphmot.kernels)  # restore the default backend
    print()
    for backend, per_step in results.items():
        print(f"association step ({backend:>6s}): {per_step * 1e3:8.3f} ms/frame")
    if len(results) == 2:
        print(f"association speedup: {results['python'] / results['native']:.2f}x")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="50,200,1000")
    parser.add_argument("--repeat", type=int, default=30)
    args = parser.parse_args()
    if _native is None:
        print("note: compiled kernels not built (python setup.py build_ext --inplace)")
    bench_kernels([int(s) for s in args.sizes.split(",")], args.repeat)
    bench_association_step(args.repeat)


if __name__ == "__main__":
    main()
