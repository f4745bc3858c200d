"""Compare the numba kernels with the pure-numpy fallback.

Each backend runs in its own interpreter because the backend is chosen
at import time from ``ELLIPSOIDAL_RHC_DISABLE_NUMBA``.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from ellipsoidal_rhc import _accel
from ellipsoidal_rhc.controller import constrained_minmax, minmax_input
from ellipsoidal_rhc.vehicle import Plant, integrate_plant, sixdof_derivatives

repeat = int(sys.argv[1])
plant = Plant()
s = plant.cruise_state(20.0, X=0.0, Y=-2.0)
ts = 0.1
phi = np.stack([np.eye(6) + ts * np.diag(np.linspace(-0.5, 0.5, 6)) + 0.01 * k * np.eye(6, k=1) for k in range(8)])
g = np.zeros((6, 2)); g[1, 0] = 10.0; g[0, 1] = ts; g[3, 0] = 2.0
H = np.eye(6)
rng = np.random.default_rng(0)
E = rng.uniform(-0.3, 0.3, (50, 6))


def plant_second():
    integrate_plant(s, [0.02, 100.0, 100.0], 1e-3, plant, 1.0)


def derivs():
    for _ in range(1000):
        sixdof_derivatives(s, [0.02, 100.0, 100.0], plant)


def minmax():
    for e in E:
        minmax_input(phi, g, H, e, [-0.5, -2.0], [0.5, 2.0])


def constrained():
    for e in E:
        constrained_minmax(phi, g, H, 4.0 * H, e, [-0.5, -2.0], [0.5, 2.0])


cases = {
    "plant: 1 s of RK4 at 1 ms": plant_second,
    "plant: 1000 derivative calls": derivs,
    "min-max: 50 unconstrained solves": minmax,
    "min-max: 50 constrained solves": constrained,
}
t0 = time.perf_counter()
for fn in cases.values():
    fn()  # compile or load the cache
out = {"backend": _accel.backend(), "warmup_s": time.perf_counter() - t0, "cases": {}}
for name, fn in cases.items():
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    out["cases"][name] = best
print(json.dumps(out))
"""


def _run(disable: bool, repeat: int) -> dict:
    env = dict(os.environ)
    env.pop("ELLIPSOIDAL_RHC_DISABLE_NUMBA", None)
    if disable:
        env["ELLIPSOIDAL_RHC_DISABLE_NUMBA"] = "1"
    res = subprocess.run(
        [sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True, text=True, check=True
    )
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timed repetitions per case (best is kept)")
    args = ap.parse_args(argv)
    fast = _run(False, args.repeat)
    slow = _run(True, args.repeat)
    print(f"{'case':<36} {fast['backend']:>10} {slow['backend']:>10} {'speed-up':>9}")
    for name, t_fast in fast["cases"].items():
        t_slow = slow["cases"][name]
        print(f"{name:<36} {1e3 * t_fast:>8.2f}ms {1e3 * t_slow:>8.2f}ms {t_slow / t_fast:>8.1f}x")
    print(f"{'first pass, incl. JIT or cache load':<36} {fast['warmup_s']:>9.2f}s {slow['warmup_s']:>9.2f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
