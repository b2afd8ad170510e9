"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--json out.json]
"""
import argparse
import json
import statistics
import time

import numpy as np

from urbanwind import _kernels
from urbanwind.data import generate_scene


def _time(fn, repeats):
    fn()  # warm caches
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(ts)


def cases(mod):
    gen = np.random.default_rng(0)

    scene = generate_scene(0, 128)
    kind = np.where(scene.solid, 0, 1).astype(np.int8)
    kind[0, :] = kind[-1, :] = kind[:, 0] = kind[:, -1] = 2
    phi0 = np.ascontiguousarray(gen.standard_normal((128, 128)))

    def sor():
        mod.sor_solve(phi0.copy(), kind, 1.8, 0.0, 200)  # tol 0: fixed 200 sweeps

    N, C, H, K = 4, 32, 32, 7
    xp = gen.standard_normal((N, C, H + K - 1, H + K - 1)).astype(np.float32)
    w = gen.standard_normal((C, K, K)).astype(np.float32)
    b = np.zeros(C, np.float32)
    g = gen.standard_normal((N, C, H, H)).astype(np.float32)
    out = np.empty((N, C, H, H), np.float32)

    def dw_fwd():
        mod.dwconv_forward(xp, w, b, out)

    def dw_bwd():
        mod.dwconv_backward(xp, w, g, np.zeros_like(xp), np.zeros_like(w))

    x = gen.standard_normal((N, C, 128, 128)).astype(np.float32)
    po = np.empty((N, C, 64, 64), np.float32)
    arg = np.empty((N, C, 64, 64), np.int8)
    gp = gen.standard_normal(po.shape).astype(np.float32)
    gx = np.empty_like(x)

    def pool():
        mod.maxpool2_forward(x, po, arg)
        mod.maxpool2_backward(gp, arg, gx)

    return {"sor 128x128, 200 sweeps": sor, "depthwise 7x7 fwd (4,32,32,32)": dw_fwd,
            "depthwise 7x7 bwd (4,32,32,32)": dw_bwd, "maxpool2 fwd+bwd (4,32,128,128)": pool}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json", default=None)
    args = ap.parse_args()
    backends = _kernels.available_backends()
    results = {name: {k: _time(fn, args.repeats) for k, fn in cases(_kernels.get_backend(name)).items()}
               for name in backends}
    names = list(results[backends[0]])
    print(f"{'kernel':<34}" + "".join(f"{b + ' (ms)':>16}" for b in backends)
          + ("   speedup" if len(backends) == 2 else ""))
    for n in names:
        row = f"{n:<34}" + "".join(f"{results[b][n]:16.2f}" for b in backends)
        if len(backends) == 2:
            row += f"   {results['python'][n] / results['cython'][n]:6.1f}x"
        print(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
