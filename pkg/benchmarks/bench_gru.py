"""Compiled vs numpy GRU scan timings.

    python benchmarks/bench_gru.py [--units 64] [--batch 8] [--frames 432] [--repeat 5]

Times the bare forward and backward scans for both backends, then one
full WHEN training step (forward, backward) with each backend swapped in.
"""

import argparse
import time

import numpy as np

from milnet import _gru_py, kernels, layers, losses
from milnet.tensor import Tape, Tensor

try:
    from milnet import _gru_ext
except ImportError:
    _gru_ext = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def scan_times(mod, xp, u, dhs, repeat):
    state = mod.gru_forward_scan(xp, u, False)
    fwd = best_of(lambda: mod.gru_forward_scan(xp, u, False), repeat)
    bwd = best_of(lambda: mod.gru_backward_scan(dhs, u, *state, False), repeat)
    return fwd, bwd


def step_time(fwd, bwd, model, x, labels, lengths, repeat):
    saved = kernels.gru_forward_scan, kernels.gru_backward_scan
    kernels.gru_forward_scan, kernels.gru_backward_scan = fwd, bwd
    params = list(model.parameters().values())

    def step():
        with Tape() as tape:
            pred = model(Tensor(x), train=True)
            loss = losses.when_batch_loss(pred, lengths, labels, "mmm")
        tape.backward(loss, params, accumulate=False)
    try:
        return best_of(step, repeat)
    finally:
        kernels.gru_forward_scan, kernels.gru_backward_scan = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--units", type=int, default=64)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--frames", type=int, default=432)
    ap.add_argument("--fmaps", type=int, default=16, help="trunk width for the step timing")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    b, t, h = args.batch, args.frames, args.units
    xp = rng.normal(size=(b, t, 3 * h)).astype(np.float32)
    u = (rng.normal(size=(h, 3 * h)) * 0.1).astype(np.float32)
    dhs = rng.normal(size=(b, t, h)).astype(np.float32)

    backends = [("numpy", _gru_py)]
    if _gru_ext is not None:
        backends.append(("cython", _gru_ext))
    else:
        print("compiled extension not built; timing numpy only")

    print(f"scan  B={b} T={t} H={h} float32 (best of {args.repeat})")
    rows = {}
    for name, mod in backends:
        rows[name] = scan_times(mod, xp, u, dhs, args.repeat)
        print(f"  {name:7s} forward {rows[name][0] * 1e3:8.2f} ms   "
              f"backward {rows[name][1] * 1e3:8.2f} ms")
    if "cython" in rows:
        print(f"  speedup forward {rows['numpy'][0] / rows['cython'][0]:.1f}x   "
              f"backward {rows['numpy'][1] / rows['cython'][1]:.1f}x")

    model = layers.build_when(t, fmaps=args.fmaps, gru_units=h, dense_units=h, seed=0)
    x = rng.normal(size=(b, t, layers.N_BANDS)).astype(np.float32)
    labels = (np.arange(b) % 2).tolist()
    lengths = [t] * b
    print(f"WHEN training step  fmaps={args.fmaps} GRU={h}")
    for name, mod in backends:
        secs = step_time(mod.gru_forward_scan, mod.gru_backward_scan, model, x, labels,
                         lengths, max(1, args.repeat // 2))
        print(f"  {name:7s} {secs:8.3f} s")


if __name__ == "__main__":
    main()
