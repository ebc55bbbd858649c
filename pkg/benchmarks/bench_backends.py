"""Time the compiled and numpy kernel backends on the same inputs.

    python benchmarks/bench_backends.py [--repeats 5]

Each case runs forward and backward once per repeat; the table lists the
median wall time and checks that both backends agree.
"""
import argparse
import statistics
import time

import numpy as np

from pbbn import kernels

# (label, input shape N,H,W,T,C, kernel, stride, c_out)
CASES = [
    ("input conv 3->16 @32x32x13", (4, 32, 32, 13, 3), (3, 3, 3), (1, 1, 2), 16),
    ("branch conv 16->16 k3", (4, 32, 32, 7, 16), (3, 3, 3), (1, 1, 1), 16),
    ("branch conv 64->64 k3", (1, 48, 48, 4, 64), (3, 3, 3), (1, 1, 1), 64),
    ("branch conv 64->128 k1 s2", (1, 48, 48, 4, 64), (1, 1, 3), (2, 2, 1), 128),
    ("depthwise 64 k5", (1, 48, 48, 4, 64), (5, 5, 3), (1, 1, 1), None),
    ("maxpool 64 k3 t-stride 2", (1, 96, 96, 7, 64), (3, 3, 3), (1, 1, 2), "pool"),
]


def _pads(shape, kernel, stride):
    res = [kernels.same_padding(n, k, s) for n, k, s in zip(shape[1:4], kernel, stride)]
    return tuple(r[1] for r in res), tuple(r[0] for r in res)


def run_case(mod, x, w, kernel, stride, kind):
    pad, out = _pads(x.shape, kernel, stride)
    if kind == "pool":
        y, arg = mod.maxpool3d_forward(x, kernel, stride, pad, out)
        mod.maxpool3d_backward(np.ones_like(y), arg, x.shape, kernel, stride, pad)
    elif kind == "dw":
        y = mod.depthwise_forward(x, w, None, stride, pad, out)
        mod.depthwise_backward(x, w, np.ones_like(y), stride, pad)
    else:
        y = mod.conv3d_forward(x, w, None, stride, pad, out)
        mod.conv3d_backward(x, w, np.ones_like(y), stride, pad)
    return y


def time_case(mod, args, repeats):
    run_case(mod, *args)  # warm-up
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        run_case(mod, *args)
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled kernels not built; timing the numpy backend only")
    rng = np.random.default_rng(0)
    print(f"{'case':<30}" + "".join(f"{b + ' (s)':>16}" for b in backends) + f"{'speedup':>10}")
    for label, shape, kernel, stride, c_out in CASES:
        x = rng.standard_normal(shape).astype(np.float32)
        c = shape[-1]
        if c_out == "pool":
            kind, w = "pool", None
        elif c_out is None:
            kind, w = "dw", rng.standard_normal((*kernel, c)).astype(np.float32)
        else:
            kind, w = "conv", rng.standard_normal((*kernel, c, c_out)).astype(np.float32)
        case = (x, w, kernel, stride, kind)
        times = {b: time_case(kernels.get_backend(b), case, args.repeats) for b in backends}
        ys = [run_case(kernels.get_backend(b), *case) for b in backends]
        agree = all(np.allclose(ys[0], y, rtol=1e-4, atol=1e-4) for y in ys[1:])
        line = f"{label:<30}" + "".join(f"{times[b]:>16.4f}" for b in backends)
        if len(backends) == 2:
            line += f"{times['python'] / times['compiled']:>9.2f}x"
        print(line + ("" if agree else "  MISMATCH"))


if __name__ == "__main__":
    main()
