"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on identical inputs under both backends; the script checks the
outputs agree and prints per-call times and the speed-up.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fpfuse import kernels


def _ins_inputs(n=1200, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(n) * 0.05
    gyro = rng.normal(0.0, 0.2, (n, 3))
    accel = np.column_stack([rng.normal(0, 1, n), rng.normal(0, 1, n), -9.81 + rng.normal(0, 1, n)])
    return dict(t=t, gyro=gyro, accel=accel, qdiag=np.full(15, 1e-4))


def run_ins(mod, d):
    n = len(d["t"])
    p, v, C = np.zeros(3), np.zeros(3), np.eye(3)
    P = np.eye(15) * 0.1
    pos, pvar = np.zeros((n, 3)), np.zeros((n, 3))
    mod.ins_span(p, v, C, np.zeros(3), np.zeros(3), P, d["gyro"], d["accel"], d["t"], 1, n,
                 np.array([0.0, 0.0, 9.81]), np.zeros(3), 300.0, 300.0, d["qdiag"], pos, pvar, False)
    return pos


def _kf_inputs(seed=0):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(15, 15))
    H = np.zeros((2, 15))
    H[0, 0] = H[1, 1] = 1.0
    return dict(P=A @ A.T + 15 * np.eye(15), H=H, R=np.eye(2) * 4.0, z=np.array([1.0, -2.0]))


def run_kf(mod, d):
    P = d["P"].copy()
    return np.concatenate([mod.kf_update(P, d["H"], d["R"], d["z"]), P.ravel()])


def _ll_inputs(n_fp=2000, n_feat=30, seed=0):
    rng = np.random.default_rng(seed)
    return dict(q=rng.normal(-70, 10, n_feat), qm=rng.random(n_feat) < 0.7, mu=rng.normal(-70, 10, (n_fp, n_feat)),
                var=rng.uniform(4, 40, (n_fp, n_feat)), fm=rng.random((n_fp, n_feat)) < 0.6)


def run_ll(mod, d):
    n = len(d["mu"])
    ll, cnt = np.zeros(n), np.zeros(n, dtype=np.int64)
    mod.gauss_loglik(d["q"], d["qm"], d["mu"], d["var"], d["fm"], -30.0, ll, cnt)
    return np.concatenate([ll, cnt])


CASES = {
    "ins_span (1200 samples)": (run_ins, _ins_inputs),
    "kf_update (15 states, 2 obs)": (run_kf, _kf_inputs),
    "gauss_loglik (2000 x 30)": (run_ll, _ll_inputs),
}


def timeit(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    mods = kernels.backends()
    print(f"active backend: {kernels.BACKEND}; available: {', '.join(mods)}")
    if "cython" not in mods:
        print("compiled extension not built; only the fallback is timed")
    print(f"{'kernel':32s} {'python':>12s} {'cython':>12s} {'speed-up':>9s}")
    for name, (run, make) in CASES.items():
        d = make()
        times, outs = {}, {}
        for b, mod in mods.items():
            outs[b] = run(mod, d)
            times[b] = timeit(lambda: run(mod, d), args.repeat)
        if len(outs) == 2 and not np.allclose(outs["python"], outs["cython"], rtol=1e-9, atol=1e-9):
            raise SystemExit(f"{name}: backends disagree")
        tc = times.get("cython", float("nan"))
        print(f"{name:32s} {times['python'] * 1e3:10.3f}ms {tc * 1e3:10.3f}ms {times['python'] / tc:8.1f}x")


if __name__ == "__main__":
    main()
