"""Meta-KL / Meta-MKL power as the number of meta tasks grows.

    python scripts/tasks_sweep.py --N 20 50 100 --m-te 250 --repeats 5
"""
import argparse
import csv
import time

from m2st.experiments import POWER_COLUMNS, ExperimentConfig, run_power

ap = argparse.ArgumentParser()
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--N", type=int, nargs="+", default=[20, 50, 100])
ap.add_argument("--m-te", type=int, nargs="+", default=[50, 100, 150, 200, 250])
ap.add_argument("--repeats", type=int, default=5)
ap.add_argument("--out", default="tasks_sweep.csv")
args = ap.parse_args()

cfg = ExperimentConfig(seed=args.seed)
cfg.power.methods = ["meta-kl", "meta-mkl"]
cfg.power.N, cfg.power.m_te, cfg.power.repeats = args.N, args.m_te, args.repeats
t0 = time.time()
summary, _ = run_power(cfg, progress=lambda s: print(f"[{time.time() - t0:6.0f}s] {s}", flush=True))
with open(args.out, "w", newline="") as fh:
    w = csv.DictWriter(fh, POWER_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(summary)
