"""Time the windowed kernels and GELU under the numba and numpy backends.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--json]

Each case runs once untimed (numba compilation, cache warm-up) and then
``--repeat`` times; the median wall time is reported. Shapes match the toy and
Tiny/16 token schedules. Both backends must return identical window outputs,
which is checked before timing.
"""

import argparse
import json
import statistics
import time

import numpy as np

from psvit import tensor as T
from psvit.tensor import Tensor, _kernels


def _cases(rng):
    x197 = rng.normal(size=(8, 197, 192))
    w1 = rng.normal(size=(3, 192, 288))
    b1 = rng.normal(size=288)
    img = rng.normal(size=(8, 28, 28, 64))
    w2 = rng.normal(size=(3, 3, 64, 128))
    act = rng.normal(size=(8, 197, 768))

    def conv1d():
        return T.conv1d(Tensor(x197), Tensor(w1), Tensor(b1), 3, 1, 1).data

    def maxpool1d():
        return T.maxpool1d(Tensor(x197), 3, 2, 1).data

    def conv2d():
        return T.conv2d(Tensor(img), Tensor(w2), None, 3, 2, 1).data

    def gelu():
        return T.gelu(Tensor(act)).data

    def pool_fwd_bwd():
        x = Tensor(x197, requires_grad=True)
        w = Tensor(w1, requires_grad=True)
        y = T.maxpool1d(T.conv1d(x, w, None, 3, 1, 1), 3, 2, 1)
        T.backward(T.sum(y))
        return x.grad

    return {"conv1d": conv1d, "maxpool1d": maxpool1d, "conv2d": conv2d, "gelu": gelu, "pool_fwd_bwd": pool_fwd_bwd}


def _time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def run(repeat=5):
    backends = ["numpy"] + (["numba"] if "numba" in _kernels._BACKENDS else [])
    original = _kernels.get_backend()
    results = {}
    outputs = {}
    try:
        for name in backends:
            _kernels.set_backend(name)
            cases = _cases(np.random.default_rng(0))
            outputs[name] = {k: fn() for k, fn in cases.items()}
            results[name] = {k: _time(fn, repeat) for k, fn in cases.items()}
    finally:
        _kernels.set_backend(original)
    if len(backends) == 2:
        for k in ("conv1d", "maxpool1d", "conv2d", "pool_fwd_bwd"):
            if not np.array_equal(outputs["numpy"][k], outputs["numba"][k]):
                raise AssertionError(f"backends disagree on {k}")
    return results


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)
    res = run(args.repeat)
    if args.json:
        print(json.dumps(res, indent=2, sort_keys=True))
        return
    print(f"{'case':<14}" + "".join(f"{b:>12}" for b in res) + ("     speedup" if len(res) == 2 else ""))
    for case in res["numpy"]:
        row = f"{case:<14}" + "".join(f"{res[b][case] * 1e3:>10.2f}ms" for b in res)
        if len(res) == 2:
            row += f"{res['numpy'][case] / res['numba'][case]:>11.2f}x"
        print(row)


if __name__ == "__main__":
    main()
