"""Time the compiled LSTM recurrence against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes mirror the three recurrent layers of a batch of 64 short sentences.
"""
import argparse
import timeit

import numpy as np

from tunable_ner import kernels

SHAPES = {
    "char encoder": (8, 400, 16),
    "word encoder": (16, 64, 32),
    "decoder": (16, 64, 16),
    "wide": (16, 64, 100),
}


def make_inputs(T, B, H, rng):
    xw = rng.normal(size=(T, B, 4 * H))
    u = rng.normal(size=(H, 4 * H)) / np.sqrt(H)
    mask = (np.arange(T)[:, None] < rng.integers(T // 2, T + 1, size=B)[None, :]).astype(float)
    dhs = rng.normal(size=(T, B, H))
    return xw, u, mask, dhs


def bench(fwd, bwd, args, repeat):
    xw, u, mask, dhs = args
    out = fwd(xw, u, mask, False)
    t_f = min(timeit.repeat(lambda: fwd(xw, u, mask, False), number=1, repeat=repeat))
    t_b = min(timeit.repeat(lambda: bwd(dhs, u, *out, mask, False), number=1, repeat=repeat))
    return t_f, t_b, out


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=30)
    args = p.parse_args()
    try:
        from tunable_ner import _lstm_ext
    except ImportError:
        _lstm_ext = None
        print("compiled kernel unavailable; timing numpy only")
    rng = np.random.default_rng(0)
    print(f"{'layer':<14}{'T x B x H':>14}{'numpy fwd':>12}{'numpy bwd':>12}"
          f"{'ext fwd':>10}{'ext bwd':>10}{'speedup':>9}")
    for name, (T, B, H) in SHAPES.items():
        inputs = make_inputs(T, B, H, rng)
        nf, nb, ref = bench(kernels.numpy_lstm_forward, kernels.numpy_lstm_backward, inputs, args.repeat)
        row = f"{name:<14}{f'{T}x{B}x{H}':>14}{nf * 1e3:>10.2f}ms{nb * 1e3:>10.2f}ms"
        if _lstm_ext is not None:
            cf, cb, got = bench(_lstm_ext.lstm_forward, _lstm_ext.lstm_backward, inputs, args.repeat)
            err = max(float(np.max(np.abs(a - b))) for a, b in zip(ref, got))
            row += f"{cf * 1e3:>8.2f}ms{cb * 1e3:>8.2f}ms{(nf + nb) / (cf + cb):>8.1f}x"
            row += f"   max diff {err:.1e}"
        print(row)


if __name__ == "__main__":
    main()
