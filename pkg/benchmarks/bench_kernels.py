"""Time the hot kernels and one split-step under the numba and numpy backends.

Each backend runs in its own interpreter because the backend is fixed at
import time by ``ICEC1D_KERNELS``. Usage::

    python benchmarks/bench_kernels.py [--shape 256 256 66] [--repeat 5]
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time, timeit, warnings
import numpy as np
warnings.simplefilter("ignore")
from icec1d import kernels
from icec1d.grids import Grid1D, Grid3D
from icec1d.model import ModelParams
from icec1d.propagate import CapSpec, SplitStepPropagator

n, m, repeat = int(sys.argv[1]), int(sys.argv[2]), int(sys.argv[3])
rng = np.random.default_rng(0)
psi = rng.standard_normal((n, n, m)) + 1j * rng.standard_normal((n, n, m))
a = np.exp(1j * rng.uniform(size=(n, m)))
b = np.exp(1j * rng.uniform(size=(n, n)))
c = np.exp(1j * rng.uniform(size=m))
e = np.exp(1j * rng.uniform(size=n))
rho = np.abs(psi[:, :, 0]) ** 2
grid = Grid3D(Grid1D(n, -0.2 * n, 0.2 * n, "periodic"), Grid1D(m, 0.6, 6.0))
prop = SplitStepPropagator(grid, ModelParams(), CapSpec(1e-3, -0.15 * n, 0.15 * n, 4.8), 0.05)

cases = {
    "potential_phase": lambda: kernels.potential_phase(psi, a, b, c),
    "kinetic_phase": lambda: kernels.kinetic_phase(psi, e, e),
    "pair_marginals": lambda: kernels.pair_marginals(psi),
    "exchange_residual": lambda: kernels.exchange_residual(psi, 1),
    "norm2": lambda: kernels.norm2(psi),
    "entropy_sum": lambda: kernels.entropy_sum(rho, 1.0),
    "split_step": lambda: (prop.potential(psi, 1.0), prop.kinetic(psi)),
}
out = {"backend": kernels.BACKEND}
for name, fn in cases.items():
    fn()  # warm-up (and JIT compilation)
    out[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
print(json.dumps(out))
"""


def run_backend(backend, shape, repeat):
    env = dict(os.environ, ICEC1D_KERNELS=backend)
    res = subprocess.run([sys.executable, "-c", WORKER, str(shape[0]), str(shape[2]), str(repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--shape", type=int, nargs=3, default=[256, 256, 66],
                    help="array shape (n_z, n_z, n_R); the two electronic sizes must agree")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if args.shape[0] != args.shape[1]:
        ap.error("the two electronic axes must have the same size")
    nb = run_backend("numba", args.shape, args.repeat)
    np_ = run_backend("numpy", args.shape, args.repeat)
    print(f"shape {tuple(args.shape)}, best of {args.repeat}; backends: {nb['backend']} vs "
          f"{np_['backend']}")
    print(f"{'kernel':<20}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for name in nb:
        if name == "backend":
            continue
        print(f"{name:<20}{1e3 * nb[name]:>12.2f}{1e3 * np_[name]:>12.2f}"
              f"{np_[name] / nb[name]:>10.2f}")


if __name__ == "__main__":
    main()
