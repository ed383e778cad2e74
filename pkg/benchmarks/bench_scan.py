"""Time the directional scan kernels: compiled extension vs NumPy fallback.

    python benchmarks/bench_scan.py [--repeat 5] [--batch 64] [--hidden 32]

Reports the best wall time per call for forward and backward passes on
each grid size of the default pyramid, for both cell kinds. ``kernel`` rows
time the recurrence alone; ``scan`` rows time a whole SE scan including the
input projection and layout changes, which both backends share.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from chrnn import hrnn, kernels
from chrnn.hrnn import Direction


def weights(rng, cell, hidden, dtype):
    k = 4 if cell == hrnn.LSTM else 1
    s = 1.0 / np.sqrt(hidden)
    return {"W_row": (s * rng.standard_normal((k * hidden, hidden))).astype(dtype),
            "W_col": (s * rng.standard_normal((k * hidden, hidden))).astype(dtype),
            "W_x": (s * rng.standard_normal((k * hidden, hidden))).astype(dtype),
            "b": np.zeros(k * hidden, dtype)}


def best(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05 and number < 1000:
        number *= 4
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--grids", default="2,3,6", help="comma-separated square grid sizes")
    ap.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    args = ap.parse_args(argv)

    dtype = np.dtype(args.dtype)
    backends = sorted(kernels.BACKENDS)
    if len(backends) < 2:
        print("compiled extension not built; timing the python kernels only")
    print(f"batch={args.batch} hidden={args.hidden} dtype={dtype} single-threaded BLAS")
    print(f"{'cell':5} {'grid':5} {'pass':16} " + " ".join(f"{b:>12}" for b in backends) + "   speedup")
    rng = np.random.default_rng(0)
    with threadpool_limits(1):
        for cell in hrnn.CELLS:
            w = weights(rng, cell, args.hidden, dtype)
            G = w["W_row"].shape[0]
            for n in (int(g) for g in args.grids.split(",")):
                x = rng.standard_normal((args.batch, n, n, args.hidden)).astype(dtype)
                dh = rng.standard_normal(x.shape).astype(dtype)
                pre_k = rng.standard_normal((n, n, args.batch, G)).astype(dtype)
                dh_k = np.ascontiguousarray(dh.transpose(1, 2, 0, 3))
                rows = {k: {} for k in ("kernel forward", "kernel backward", "scan forward", "scan backward")}
                for b in backends:
                    kern = kernels.get(b)
                    if cell == hrnn.SRN:
                        fwd = lambda: kern.srn_forward(pre_k, w["W_row"], w["W_col"])
                        h_k = fwd()
                        bwd = lambda: kern.srn_backward(dh_k, h_k, w["W_row"], w["W_col"])
                    else:
                        fwd = lambda: kern.lstm_forward(pre_k, w["W_row"], w["W_col"])
                        h_k, m_k, a_k = fwd()
                        bwd = lambda: kern.lstm_backward(dh_k, h_k, m_k, a_k, w["W_row"], w["W_col"])
                    rows["kernel forward"][b] = best(fwd, args.repeat)
                    rows["kernel backward"][b] = best(bwd, args.repeat)
                    _, cache = hrnn.scan_forward(x, Direction.SE, w, cell, backend=b)
                    rows["scan forward"][b] = best(lambda: hrnn.scan_forward(x, Direction.SE, w, cell, backend=b),
                                                   args.repeat)
                    rows["scan backward"][b] = best(lambda: hrnn.scan_backward(dh, cache), args.repeat)
                for phase, t in rows.items():
                    row = " ".join(f"{t[b] * 1e3:10.3f}ms" for b in backends)
                    ratio = f"{t['python'] / t['compiled']:8.1f}x" if "compiled" in t else ""
                    print(f"{cell:5} {n}x{n:<3} {phase:16} {row} {ratio}")


if __name__ == "__main__":
    main()
