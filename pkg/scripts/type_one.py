"""Rejection rates under the null (target delta = 0) for the learned-kernel pipelines."""
import argparse

from m2st.experiments import ExperimentConfig, run_power

ap = argparse.ArgumentParser()
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--n-trials", type=int, default=500)
ap.add_argument("--methods", nargs="+", default=["mmd-o", "mmd-d", "meta-kl", "meta-mkl"])
args = ap.parse_args()

cfg = ExperimentConfig(seed=args.seed)
cfg.power.methods, cfg.power.m_te, cfg.power.repeats = args.methods, [150], 1
cfg.test.n_trials = args.n_trials
summary, _ = run_power(cfg, delta=0.0, progress=print)
for r in summary:
    flag = "ok" if 0.02 <= r["rate"] <= 0.08 else "OUT OF RANGE"
    print(f"{r['method']:>9s}  {r['rate']:.3f}  {flag}")
