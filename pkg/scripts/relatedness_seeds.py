"""Closeness sweep of the empirical relatedness estimate over several seeds."""
import argparse

from m2st.experiments import ExperimentConfig, paper_scale, run_relatedness

ap = argparse.ArgumentParser()
ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
ap.add_argument("--paper-scale", action="store_true")
args = ap.parse_args()

n_mono = 0
for seed in args.seeds:
    cfg = ExperimentConfig(seed=seed)
    if args.paper_scale:
        cfg = paper_scale(cfg)
    _, summary = run_relatedness(cfg)
    g = [r["gamma_hat"] for r in summary if r["C"] != "identical-task-control"]
    mono = all(b > a for a, b in zip(g, g[1:]))
    n_mono += mono
    print(seed, " ".join(f"{x:.4f}" for x in g), "increasing" if mono else "not increasing", flush=True)
print(f"{n_mono}/{len(args.seeds)} seeds strictly increasing in C")
