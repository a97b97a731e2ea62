"""Time the compiled geometry kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--points 50000] [--repeat 3]

Prints one line per kernel and backend with the best wall time and the
speed-up over numpy, after checking that both backends agree.
"""

import argparse
import importlib
import timeit

import numpy as np

from mmflow import _kernels_py
from mmflow.synthetic import face_cells, make_tetrahedron


def _backends():
    out = {"python": _kernels_py}
    try:
        out["cython"] = importlib.import_module("mmflow._kernels")
    except ImportError:
        print("compiled extension not built; timing the numpy fallback only")
    return out


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--points", type=int, default=50_000)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    rng = np.random.default_rng(args.seed)
    ds = make_tetrahedron(args.points, rng=rng)
    pts = ds.samples + 0.05 * rng.standard_normal(ds.samples.shape)
    cells = face_cells(ds)
    small = pts[:2000]

    cases = {
        "point_triangle_distances": lambda k: k.point_triangle_distances(pts, ds.faces),
        "min_distances": lambda k: k.min_distances(cells, pts),
        "mean_pairwise_distance": lambda k: k.mean_pairwise_distance(small, small),
    }
    backends = _backends()
    for name, fn in cases.items():
        results = {b: fn(k) for b, k in backends.items()}
        ref = np.asarray(results["python"])
        for b, r in results.items():
            if not np.allclose(r, ref, rtol=1e-10, atol=1e-12):
                raise SystemExit(f"{name}: {b} disagrees with the numpy fallback")
        times = {b: min(timeit.repeat(lambda k=k: fn(k), number=1, repeat=args.repeat)) for b, k in backends.items()}
        for b, t in times.items():
            print(f"{name:26s} {b:7s} {t * 1e3:9.2f} ms  x{times['python'] / t:6.1f}")


if __name__ == "__main__":
    main()
