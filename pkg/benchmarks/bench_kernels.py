"""Compare the compiled recurrent-cell kernels against the numpy ones.

Runs forward and forward+backward timings for GRU and LSTM cells at the
batch shapes the package actually uses (per-coordinate optimizer banks
and small agent batches), checks that both backends agree numerically,
and prints a table.  Usage: python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from optim4rl.kernels import numpy_backend

try:
    from optim4rl.kernels import _core as compiled
except ImportError:
    compiled = None

SHAPES = [
    ("agent batch", 20, 2, 8),
    ("small-world bank", 2666, 2, 8),
    ("big-world bank", 49850, 2, 8),
]
REPS = 30


def _bench(fn, *args):
    fn(*args)
    t0 = time.perf_counter()
    for _ in range(REPS):
        fn(*args)
    return (time.perf_counter() - t0) / REPS


def _cell_args(rng, batch, in_dim, hidden, gates):
    x = rng.standard_normal((batch, in_dim))
    h = rng.standard_normal((batch, hidden))
    wx = rng.standard_normal((in_dim, gates * hidden)) * 0.3
    wh = rng.standard_normal((hidden, gates * hidden)) * 0.3
    b = rng.standard_normal(gates * hidden) * 0.1
    return x, h, wx, wh, b


def bench_gru(backend, rng, batch, in_dim, hidden):
    x, h, wx, wh, b = _cell_args(rng, batch, in_dim, hidden, 3)
    h_new, cache = backend.gru_cell_forward(x, h, wx, wh, b)
    dh = np.ones_like(h_new)
    fwd = _bench(backend.gru_cell_forward, x, h, wx, wh, b)
    bwd = _bench(backend.gru_cell_backward, dh, cache)
    return h_new, fwd, bwd


def bench_lstm(backend, rng, batch, in_dim, hidden):
    x, h, wx, wh, b = _cell_args(rng, batch, in_dim, hidden, 4)
    c = rng.standard_normal((batch, hidden))
    h_new, c_new, cache = backend.lstm_cell_forward(x, h, c, wx, wh, b)
    dh = np.ones_like(h_new)
    dc = np.zeros_like(c_new)
    fwd = _bench(backend.lstm_cell_forward, x, h, c, wx, wh, b)
    bwd = _bench(backend.lstm_cell_backward, dh, dc, cache)
    return h_new, fwd, bwd


def main():
    if compiled is None:
        print("compiled extension not available; numpy timings only\n")
    backends = [("numpy", numpy_backend)]
    if compiled is not None:
        backends.append(("compiled", compiled))

    for cell, bench in (("GRU", bench_gru), ("LSTM", bench_lstm)):
        print(f"{cell} cell (forward / backward, ms per call)")
        for label, batch, in_dim, hidden in SHAPES:
            line = f"  {label:18s} ({batch:6d}x{in_dim}->{hidden}):"
            outs = {}
            for name, backend in backends:
                rng = np.random.default_rng(0)
                h_new, fwd, bwd = bench(backend, rng, batch, in_dim, hidden)
                outs[name] = h_new
                line += f"  {name} {fwd * 1e3:7.3f} / {bwd * 1e3:7.3f}"
            if len(outs) == 2:
                diff = np.max(np.abs(outs["numpy"] - outs["compiled"]))
                line += f"  |  max fwd diff {diff:.2e}"
            print(line)
        print()


if __name__ == "__main__":
    main()
