"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--n 512] [--hidden 64] [--repeat 5]

Each kernel is called once per backend before timing so JIT compilation is
excluded. Outputs are checked for agreement before timings are reported.
"""

import argparse
import time

import numpy as np

from laplace_kit import _accel, kernels, nn


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=512, help="data points")
    p.add_argument("--inputs", type=int, default=10)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    if not _accel.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return

    rng = np.random.default_rng(args.seed)
    spec = nn.MlpSpec((args.inputs, args.hidden, args.hidden, args.classes), "tanh")
    theta = nn.init_params(spec, args.seed)
    X = rng.standard_normal((args.n, args.inputs))
    F = nn.predict_logits(spec, theta, X)
    Lam = nn.output_hessians(nn.Categorical(), F)
    trace, deltas = nn.layer_deltas(spec, theta, X)
    acts = nn.augment(trace.activations[-2])
    g = deltas[-1]
    J = kernels.jacobians(theta, spec.layer_dims, spec.act_code, spec.use_bias, X)

    cases = {
        "jacobians": lambda: kernels.jacobians(theta, spec.layer_dims, spec.act_code, spec.use_bias, X),
        "ggn_full": lambda: kernels.ggn_full(J, Lam),
        "ggn_diag": lambda: kernels.ggn_diag(J, Lam),
        "kfac_factors": lambda: kernels.kfac_factors(acts, g, Lam),
    }
    print(f"N={args.n} D={spec.n_params} C={args.classes}")
    print(f"{'kernel':<14}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}{'max |diff|':>12}")
    previous = _accel.get_backend()
    try:
        for name, fn in cases.items():
            out, times = {}, {}
            for backend in ("numpy", "numba"):
                _accel.set_backend(backend)
                out[backend] = fn()
                times[backend] = best_of(fn, args.repeat)
            a, b = out["numpy"], out["numba"]
            if isinstance(a, tuple):
                diff = max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))
            else:
                diff = float(np.max(np.abs(a - b)))
            print(f"{name:<14}{1e3 * times['numpy']:>12.2f}{1e3 * times['numba']:>12.2f}"
                  f"{times['numpy'] / times['numba']:>10.2f}{diff:>12.1e}")
    finally:
        _accel.set_backend(previous)


if __name__ == "__main__":
    main()
