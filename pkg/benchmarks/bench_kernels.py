"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat N] [--size S]

Shapes follow a desk-scale training batch: 2 x 12 channels at 64x64, one
perception stencil per call. The first numba call (JIT compile or cache load)
is excluded from timing.
"""
import argparse
import time

import numpy as np

from mnnca import _kernels as K


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--batch", type=int, default=2)
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    C, S = 12, args.size
    x = rng.standard_normal((args.batch, C, S, S)).astype(np.float32)
    w = rng.standard_normal((C, 3, 3)).astype(np.float32)
    g = rng.standard_normal((args.batch, C, S, S)).astype(np.float32)
    theta = rng.uniform(0, 2 * np.pi, (9, 9))
    grads = np.stack([np.sin(theta), np.cos(theta)], axis=-1)

    cases = {
        "conv forward d=1": (lambda: K._np_dw_forward(x, w, 1), lambda: K._nb_dw_forward(x, w, 1)),
        "conv forward d=3": (lambda: K._np_dw_forward(x, w, 3), lambda: K._nb_dw_forward(x, w, 3)),
        "conv grad input": (lambda: K._np_dw_backward_input(g, w, 1, C),
                            lambda: K._nb_dw_backward_input(g, w, 1, C)),
        "conv grad weight": (lambda: K._np_dw_backward_weight(g, x, 1, 3, 3),
                             lambda: K._nb_dw_backward_weight(g, x, 1, 3, 3)),
        f"perlin {4 * S}^2": (lambda: K._np_gradient_noise(grads, 4 * S, 4 * S),
                              lambda: K._nb_gradient_noise(grads, 4 * S, 4 * S)),
    }
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, (np_fn, nb_fn) in cases.items():
        a = np.asarray(np_fn(), dtype=np.float64)
        b = np.asarray(nb_fn(), dtype=np.float64)
        err = np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-30)
        t_np, t_nb = best_of(np_fn, args.repeat), best_of(nb_fn, args.repeat)
        print(f"{name:<20} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:7.1f}x"
              f"   (rel diff {err:.1e})")


if __name__ == "__main__":
    main()
