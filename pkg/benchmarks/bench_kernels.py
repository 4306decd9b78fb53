"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best-of-N wall time for each backend and
the speedup, and checks that both backends agree on every output.
"""

import argparse
import timeit

import numpy as np

from qatbnn import kernels


def cases(rng):
    x = rng.normal(size=(16, 5, 1, 256))
    w = rng.normal(size=(8, 5, 1, 5))
    h = rng.normal(size=(16, 8, 1, 252))
    w2 = rng.normal(size=(16, 8, 1, 5))
    dout = rng.normal(size=(16, 16, 1, 248))
    a = rng.normal(size=(16, 1984))
    b = rng.normal(size=(1984, 32))
    q = rng.normal(size=200_000)
    return {
        "matmul 16x1984 @ 1984x32": ("matmul", (a, b)),
        "conv2d forward 16x5x256, 8 filters": ("conv2d_forward", (x, w, 1)),
        "conv2d backward 16x8x252, 16 filters": ("conv2d_backward", (h, w2, dout, 1)),
        "fake_quant 200k values, 8 bit": ("fake_quant", (q, 0.01, -128, 127)),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    names = kernels.available_backends()
    if "cython" not in names:
        print("compiled kernels not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} " + " ".join(f"{n:>10s}" for n in names) + "   speedup")
    for label, (fn, fargs) in cases(rng).items():
        times, outs = [], []
        for name in names:
            impl = getattr(kernels.get_backend(name), fn)
            outs.append(impl(*fargs))
            times.append(min(timeit.repeat(lambda: impl(*fargs), number=1, repeat=args.repeat)))
        ref = outs[-1] if isinstance(outs[-1], tuple) else (outs[-1],)
        for out in outs[:-1]:
            for u, v in zip(out if isinstance(out, tuple) else (out,), ref):
                np.testing.assert_allclose(u, v, rtol=1e-10, atol=1e-10)
        speed = f"{times[-1] / times[0]:8.2f}x" if len(times) > 1 else "       -"
        print(f"{label:40s} " + " ".join(f"{t * 1e3:8.2f}ms" for t in times) + f"  {speed}")


if __name__ == "__main__":
    main()
