"""Time the numba kernels against their numpy fallbacks, plus one training step.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Each kernel runs once first so JIT compilation is excluded from the timings.
Outputs are checked for agreement (exact for data movement, 1e-12 for GELU).
"""

import argparse
import json
import time

import numpy as np

from bridgets import _accel, kernels
from bridgets.bridge import bridge_loss_batch
from bridgets.data import gen_mask, make_rng
from bridgets.model import DenoiserModel
from bridgets.schedule import BridgeSchedule


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    B, L, C, H, K = 16, 96, 4, 64, 3
    u = rng.standard_normal((B, L, H))
    g = rng.standard_normal((B, L, H))
    x = rng.standard_normal((B, L, 3 * C))
    cols = rng.standard_normal((B, L, K * 3 * C))
    y = rng.standard_normal((B, L, C))
    m = gen_mask(y.shape, 0.5, make_rng(1))

    den = DenoiserModel(C, 1, blocks=4, hidden=H, kernel=K).init(make_rng(2))
    prior = (y * m)[..., None]
    sched = BridgeSchedule()

    def step():
        return bridge_loss_batch(den, den.params, y, prior, m, sched, make_rng(3))[0]

    return {
        "gelu": lambda: kernels.gelu(u),
        "gelu_grad": lambda: kernels.gelu_grad(u, g),
        "im2col": lambda: kernels.im2col(x, K),
        "col2im": lambda: kernels.col2im(cols, K, 3 * C),
        "linear_fill": lambda: kernels.linear_fill(y * m, m),
        "train_step (B=16, L=96, H=64)": step,
    }


def run(repeat):
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    results, outputs = {}, {}
    prev = _accel.backend()
    try:
        for name in ("numpy", "numba"):
            _accel.set_backend(name)
            fns = cases(make_rng(0))
            for k, fn in fns.items():
                results.setdefault(k, {})[name] = best_of(fn, repeat)
                outputs.setdefault(k, {})[name] = fn()
    finally:
        _accel.set_backend(prev)
    for k, out in outputs.items():
        a, b = np.asarray(out["numpy"]), np.asarray(out["numba"])
        if not np.allclose(a, b, rtol=1e-12, atol=1e-12):
            raise SystemExit(f"{k}: backends disagree (max diff {np.max(np.abs(a - b)):.3e})")
    return results


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json")
    args = ap.parse_args()
    res = run(args.repeat)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for k, r in res.items():
        print(f"{k:32s} {1e3 * r['numpy']:10.3f} {1e3 * r['numba']:10.3f} {r['numpy'] / r['numba']:7.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(res, fh, indent=2)


if __name__ == "__main__":
    main()
