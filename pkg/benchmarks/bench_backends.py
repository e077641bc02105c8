"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_backends.py [--repeat 3]

Each backend runs in its own interpreter (the choice is made at import time
from HYBRIDYN_PURE_PYTHON) and reports the best of ``--repeat`` runs.
"""
import argparse
import json
import os
import subprocess
import sys
import time

WORKLOADS = ("inverse dynamics, 20k states", "plant, 2 s at 125 Hz", "boosting, 20 trees on 5k x 40",
             "forest predict, 150 trees on 20k rows")


def run_workloads(repeat: int) -> dict:
    import numpy as np

    from hybridyn import dynamics as dyn
    from hybridyn._backend import BACKEND
    from hybridyn.config import load_defaults
    from hybridyn.gbt import GbtHyperParams, fit_gbt
    from hybridyn.plant import plant_from_dict, simulate_tracking
    from hybridyn.planner import ViaTrajectory

    rng = np.random.default_rng(0)
    m = dyn.reference_robot()
    Q, QD, QDD = (rng.uniform(-2, 2, (20_000, 6)) for _ in range(3))
    plant = plant_from_dict(m, load_defaults()["plant"])
    ref = ViaTrajectory([np.zeros(6), np.full(6, 0.5), np.zeros(6)], [1.0, 1.0]).sample(0.008)
    X = rng.normal(size=(5000, 40))
    y = np.sin(X[:, 0]) + X[:, 1] * X[:, 2]
    small = GbtHyperParams(n_estimators=20, max_depth=6)
    ens = fit_gbt(X, y, GbtHyperParams(n_estimators=150, max_depth=6))
    Xp = rng.normal(size=(20_000, 40))

    jobs = [lambda: dyn.inverse_dynamics_batch(m, Q, QD, QDD),
            lambda: simulate_tracking(plant, ref, seed=0),
            lambda: fit_gbt(X, y, small),
            lambda: ens.predict(Xp)]
    times = {}
    for name, job in zip(WORKLOADS, jobs):
        best = float("inf")
        for _ in range(repeat):
            t0 = time.perf_counter()
            job()
            best = min(best, time.perf_counter() - t0)
        times[name] = best
    return {"backend": BACKEND, "times": times}


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        print(json.dumps(run_workloads(args.repeat)))
        return
    results = {}
    for pure in ("0", "1"):
        env = dict(os.environ, HYBRIDYN_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(args.repeat)],
                             env=env, check=True, capture_output=True, text=True)
        r = json.loads(out.stdout)
        results[r["backend"]] = r["times"]
    if "cython" not in results:
        print("compiled extension not built; only the fallback was timed")
    names = list(results)
    print(f"{'workload':<40}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    for w in WORKLOADS:
        row = [results[n][w] for n in names]
        line = f"{w:<40}" + "".join(f"{t:>11.4f}s" for t in row)
        if len(names) == 2:
            line += f"{row[1] / row[0]:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
