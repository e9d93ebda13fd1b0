"""Time the compiled kernels against their numpy fallbacks.

    python benchmarks/bench_backends.py [--repeat 3] [--resolution 48]

Each kernel is run once per backend to warm up (numba compiles on first call)
and then timed; the table reports the best of ``--repeat`` runs.
"""

import argparse
import time

import numpy as np

from skullcarve import _accel
from skullcarve.geometry import BoundingCube, GridLayout
from skullcarve.neural_sdf import NeuralSdfDims, init_neural_sdf
from skullcarve.primitives import icosphere
from skullcarve.sdf_build import exact_band_distances, fast_sweep, lattice_winding, winding_numbers, winding_sign


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(resolution):
    mesh = icosphere(4, radius=30.0)
    lay = GridLayout(resolution, BoundingCube((0, 0, 0), 40.0))
    pts = np.random.default_rng(0).uniform(-40, 40, (2000, 3))
    signs = winding_sign(mesh, lay)
    seeds = exact_band_distances(mesh, lay, 2 * lay.spacing + 1e-9)
    model = init_neural_sdf(lay.cube, NeuralSdfDims(64, 8, 32), seed=0)
    x = np.random.default_rng(1).uniform(-40, 40, (20000, 3))
    up = np.ones(len(x))

    def triplane():
        _, tape = model.forward(x)
        model.grad_x(tape)
        model.grad_params(tape, up)

    return {
        "winding numbers (2000 pts)": lambda: winding_numbers(mesh, pts),
        f"lattice winding ({resolution}^3)": lambda: lattice_winding(mesh, lay),
        f"band distances ({resolution}^3)": lambda: exact_band_distances(mesh, lay, 2 * lay.spacing + 1e-9),
        f"fast sweep ({resolution}^3)": lambda: fast_sweep(seeds, signs),
        "neural sdf fwd+bwd (20k pts)": triplane,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--resolution", type=int, default=48)
    args = ap.parse_args(argv)
    if _accel._numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rows = []
    for name, fn in cases(args.resolution).items():
        t = {}
        for flag in (True, False):
            _accel.USE_NUMBA = flag
            t[flag] = best_of(fn, args.repeat)
        rows.append((name, t[True], t[False]))
    _accel.USE_NUMBA = True
    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numba s':>9}  {'numpy s':>9}  {'speedup':>8}")
    for name, a, b in rows:
        print(f"{name:<{width}}  {a:9.4f}  {b:9.4f}  {b / a:7.1f}x")


if __name__ == "__main__":
    main()
