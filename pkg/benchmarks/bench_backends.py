#!/usr/bin/env python3
"""Compare the numba and pure-numpy kernel backends.

Runs the geometry-heavy stages (voxelization, exterior flood fill, signed
distance, batched ray casting, vertex-density KDE) on a synthetic character
under both backends, checks that the results agree bit-for-bit, and prints
a timing table.

The backend is fixed per process by VOLRIG_BACKEND at import time, so this
script re-executes itself once per backend and merges the results.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time


def run_stages(resolution, samples, repeats):
    import numpy as np

    from volrig import backend_name
    from volrig.features import compute_vertex_density
    from volrig.mesh import batch_ray_mesh, sample_surface
    from volrig.sdf import compute_sdf
    from volrig.synth import make_character
    from volrig.voxel import make_grid, voxelize

    mesh = make_character("biped", 0).mesh
    grid = make_grid(mesh, resolution)
    surf = sample_surface(mesh, samples, seed=0)
    rng = np.random.Generator(np.random.PCG64(0))
    dirs = rng.standard_normal((samples, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    stages = {}
    checks = {}

    def bench(name, fn):
        fn()  # warmup (includes JIT compilation under numba)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            out = fn()
            times.append(time.perf_counter() - t0)
        stages[name] = min(times)
        return out

    surface, mask = bench("voxelize+flood", lambda: voxelize(mesh, grid))
    checks["surface_count"] = int(surface.sum())
    checks["mask_count"] = int(mask.data.sum())
    sdf = bench("signed distance", lambda: compute_sdf(mesh, grid, surface, mask))
    checks["sdf_sum"] = float(np.float64(sdf).sum())
    t = bench("ray casting", lambda: batch_ray_mesh(mesh, surf.positions, dirs))
    checks["ray_finite"] = int(np.isfinite(t).sum())
    checks["ray_sum"] = float(t[np.isfinite(t)].sum())
    lvd = bench("vertex density", lambda: compute_vertex_density(mesh, grid))
    checks["lvd_sum"] = float(lvd.sum())
    return {"backend": backend_name(), "stages": stages, "checks": checks}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--resolution", type=int, default=48)
    ap.add_argument("--samples", type=int, default=4000)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--_child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args._child:
        print(json.dumps(run_stages(args.resolution, args.samples, args.repeats)))
        return

    results = {}
    for backend in ("numba", "numpy"):
        env = dict(os.environ, VOLRIG_BACKEND=backend)
        out = subprocess.run(
            [sys.executable, __file__, "--_child",
             "--resolution", str(args.resolution),
             "--samples", str(args.samples),
             "--repeats", str(args.repeats)],
            env=env, capture_output=True, text=True, check=True)
        results[backend] = json.loads(out.stdout.strip().splitlines()[-1])

    if results["numba"]["checks"] != results["numpy"]["checks"]:
        print("MISMATCH between backends:")
        print("  numba:", results["numba"]["checks"])
        print("  numpy:", results["numpy"]["checks"])
        sys.exit(1)

    print(f"resolution {args.resolution}, {args.samples} samples/rays, "
          f"best of {args.repeats} (numba warmup excluded)\n")
    print(f"{'stage':<16} {'numba [s]':>10} {'numpy [s]':>10} {'speedup':>8}")
    for stage in results["numba"]["stages"]:
        a = results["numba"]["stages"][stage]
        b = results["numpy"]["stages"][stage]
        print(f"{stage:<16} {a:>10.4f} {b:>10.4f} {b / a:>7.1f}x")
    print("\nbackends agree on all checksums")


if __name__ == "__main__":
    main()
