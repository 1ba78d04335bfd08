"""Compare the compiled kernel core against the pure-numpy fallback.

Times the individual hot kernels and a full packed network forward/backward
at the production batch shape. Run:

    python benchmarks/kernel_bench.py
"""

from __future__ import annotations

import time

import numpy as np

from denopt import autodiff as ad
from denopt.denoiser import (
    DenoiserConfig,
    build_packed_batch,
    init_params,
    pack_coords,
    pack_node_features,
    packed_forward,
)
from denopt.kernels import _core, numpy_backend


def best_of(fn, reps=5, inner=5):
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best * 1000.0


def bench_kernels():
    rng = np.random.default_rng(0)
    n_nodes, n_edges, width = 1120, 12000, 32
    x = rng.standard_normal((n_nodes, 3)) * 2
    hd = rng.standard_normal((400, width))
    hs = rng.standard_normal((n_nodes, width))
    d2 = rng.random(n_edges) * 9
    wd2 = rng.standard_normal(width)
    src = rng.integers(0, n_nodes, n_edges).astype(np.int64)
    dst = rng.integers(0, 400, n_edges).astype(np.int64)
    vals = rng.standard_normal((n_edges, width))
    starts = np.linspace(0, n_edges, 401).astype(np.int64)
    s = rng.standard_normal((n_edges, 1))
    big = rng.standard_normal((n_edges, width))

    cases = {
        "silu_fwd": lambda be: be.silu_fwd(big),
        "segment_sum": lambda be: be.segment_sum(vals, starts),
        "gather_rows": lambda be: be.gather_rows(hs, src),
        "scatter_add_rows": lambda be: be.scatter_add_rows(vals, src, n_nodes),
        "edge_sqdist": lambda be: be.edge_sqdist(x, src, src[::-1].copy()),
        "edge_message_silu": lambda be: be.edge_message_silu(hd, hs, d2, src, dst, wd2),
        "coord_step": lambda be: be.coord_step(x, s, src, np.repeat(np.arange(400), 30).astype(np.int64), starts),
    }
    print(f"{'kernel':<20} {'numpy ms':>10} {'core ms':>10} {'speedup':>8}")
    for name, fn in cases.items():
        t_np = best_of(lambda: fn(numpy_backend))
        t_core = best_of(lambda: fn(_core))
        print(f"{name:<20} {t_np:>10.3f} {t_core:>10.3f} {t_np / t_core:>7.1f}x")


def bench_network(backend_name):
    import importlib
    import os

    os.environ["DENOPT_BACKEND"] = backend_name
    import denopt.kernels as K

    importlib.reload(K)
    rng = np.random.default_rng(0)
    params = init_params(DenoiserConfig(3, 32), rng, zero_heads=True)
    packed = build_packed_batch([(11, 24)] * 32)
    coords = pack_coords(
        packed,
        [rng.standard_normal((11, 3)) for _ in range(32)],
        [rng.standard_normal((24, 3)) * 3 for _ in range(32)],
    )
    onehot = np.zeros((24, 4))
    onehot[:, 0] = 1
    feats = pack_node_features(
        packed, [rng.standard_normal((11, 5)) for _ in range(32)], [onehot] * 32, 0.5
    )
    fwd = best_of(lambda: packed_forward(params.arrays, coords, feats, packed), inner=3)

    def fwdbwd():
        view = params.tensor_view()
        ec, ef = packed_forward(view, coords, feats, packed)
        ad.backward(ad.total(ad.square(ec)) + ad.total(ad.square(ef)))

    fb = best_of(fwdbwd, inner=3)
    print(f"{backend_name:<8} packed forward {fwd:8.1f} ms   forward+backward {fb:8.1f} ms")
    return fwd, fb


if __name__ == "__main__":
    print("== individual kernels (12k edges, width 32) ==")
    bench_kernels()
    print()
    print("== full network, 32-complex packed batch, 3 layers, width 32 ==")
    f_np, b_np = bench_network("numpy")
    f_c, b_c = bench_network("core")
    print(f"speedup: forward {f_np / f_c:.1f}x, forward+backward {b_np / b_c:.1f}x")
