#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-numpy fallback.

Times the three kernel entry points on a desk-scale problem and prints a
table with speedups.  Run from the repository root:

    python benchmarks/bench_kernels.py [--grid 32] [--views 48] [--dets 49]
"""

import argparse
import time

import numpy as np
import scipy.sparse as spm

import nlkacz.spectral as sp
from nlkacz import _kernels, phantom, projector, recon


def build_problem(grid_n, views, dets):
    model = sp.synthetic_model()
    grid = projector.PixelGrid.square(grid_n, 2.0)
    geoms = [
        projector.build_parallel_geometry(views, 0.0, dets, 2.2),
        projector.build_parallel_geometry(views, np.pi / 96, dets, 2.2),
    ]
    projs = [projector.build_projection(grid, g) for g in geoms]
    truth = phantom.rasterize(phantom.demo_phantom(), grid, supersample=2)
    data = recon.simulate_data(model, projs, truth)
    return model, grid, projs, truth, data


def timed(fn, repeat=1):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_h_batch(mod, model, n=200_000):
    rng = np.random.default_rng(0)
    Z = rng.uniform(-5.0, 5.0, size=(n, 2))
    return timed(lambda: mod.h_batch(model.spectra[0], model.b_matrix, Z), repeat=3)[0]


def bench_dd(mod, model, proj, truth, data, n_rays=400):
    G = np.stack(data.sinograms, axis=1)
    Z_star = np.stack([proj.matrix @ truth.data[d] for d in range(2)], axis=1)

    def run():
        for j in range(n_rays):
            mod.dd_solve(
                model.spectra, model.b_matrix, G[j], np.zeros(2), Z_star[j],
                mod.KIND_MAX_RESIDUAL, 0.0, 0.0, 1e-13, 40000, 1e-14,
            )

    return timed(run)[0]


def bench_onestep(mod, model, grid, projs, truth, data, epochs=2):
    mat = spm.vstack([p.matrix for p in projs], format="csr")
    keep = np.nonzero(np.diff(mat.indptr) > 0)[0]
    mat = mat[keep]
    csc = mat.tocsc()
    g = np.concatenate(data.sinograms)[keep]
    spec_idx = np.concatenate(
        [np.full(p.n_rays, i, dtype=np.int64) for i, p in enumerate(projs)]
    )[keep]

    def run():
        mod.onestep_solve(
            model.spectra, model.b_matrix, spec_idx,
            mat.indptr.astype(np.int64), mat.indices.astype(np.int64), mat.data,
            csc.indptr.astype(np.int64), csc.indices.astype(np.int64), csc.data,
            g, np.zeros((2, grid.n_pixels)), truth.data,
            mod.KIND_MAX_RESIDUAL, 0.0, 0.0, 0.0, epochs, 1e-14, 0, False,
        )

    return timed(run)[0]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", type=int, default=32)
    ap.add_argument("--views", type=int, default=48)
    ap.add_argument("--dets", type=int, default=49)
    args = ap.parse_args()

    backends = _kernels.backends_available()
    if "compiled" not in backends:
        print("compiled backend not built; install with "
              "'pip install -e . --no-build-isolation' to compare")
    model, grid, projs, truth, data = build_problem(args.grid, args.views, args.dets)
    print(f"problem: {grid.nx}x{grid.ny} grid, 2 spectra x {projs[0].n_rays} rays, "
          f"M={model.n_bins} bins")

    rows = []
    for label, fn in (
        ("h_batch (200k points)", lambda mod: bench_h_batch(mod, model)),
        ("dd_solve (400 rays)", lambda mod: bench_dd(mod, model, projs[0], truth, data)),
        ("onestep (2 epochs)", lambda mod: bench_onestep(mod, model, grid, projs, truth, data)),
    ):
        times = {name: fn(mod) for name, mod in backends.items()}
        rows.append((label, times))

    print(f"\n{'kernel':<24}" + "".join(f"{name:>14}" for name in backends) + f"{'speedup':>10}")
    for label, times in rows:
        cells = "".join(f"{times[name]:>13.3f}s" for name in backends)
        if "compiled" in times and "python" in times and times["compiled"] > 0:
            speed = f"{times['python'] / times['compiled']:>9.1f}x"
        else:
            speed = f"{'-':>10}"
        print(f"{label:<24}{cells}{speed}")


if __name__ == "__main__":
    main()
