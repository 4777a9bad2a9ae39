"""Command-line harness: gen, train, test, power, relatedness, gradcheck.

Every command takes ``--config`` (YAML), ``--set key.path=value`` overrides,
and ``--seed``; flags win over the file. Outputs go to ``--out``, else
``$M2ST_OUTPUT_DIR``, else ``./m2st-out``. On failure the process exits
nonzero and prints a JSON error object to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import diffengine as ad
from .estimators import h_from_gram, j_from_h
from .experiments import (POWER_COLUMNS, ExperimentConfig, MethodContext, _bank_for, load_config,
                          load_target_csv, paper_scale, parse_assignment, run_power, run_relatedness)
from .kernels import DeepKernel, GaussianKernel, MixtureKernel
from .learners import LearnedAlgorithm, adapt, inner_adapt
from .seeding import child_seed, stream
from .tasks import TaskFamilySpec, build_family, hdgm_pair, load_csv
from .testing import SplitSpec, permutation_test, split

log = logging.getLogger("m2st")
ENV_OUTPUT_DIR = "M2ST_OUTPUT_DIR"


class SelfCheckError(RuntimeError):
    pass


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    d = args.out or (cfg.output_dir if cfg else None) or os.environ.get(ENV_OUTPUT_DIR) or "m2st-out"
    path = Path(d)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> ExperimentConfig:
    overrides: dict = {}
    from .experiments import deep_merge
    for item in args.set or []:
        overrides = deep_merge(overrides, parse_assignment(item))
    if args.seed is not None:
        overrides["seed"] = args.seed
    for name in ("method", "n_trials", "n_perm", "alpha"):
        val = getattr(args, name, None)
        if val is None:
            continue
        if name == "method":
            overrides["method"] = val
        else:
            overrides = deep_merge(overrides, {"test": {name: val}})
    cfg = load_config(args.config, overrides)
    if getattr(args, "paper_scale", False):
        cfg = paper_scale(cfg)
    return cfg


def _write_rows(path: Path, columns: list[str], rows: list[dict], meta: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in columns})
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def _meta(cfg: ExperimentConfig, command: str, **extra) -> dict:
    return {"command": command, "seed": cfg.seed, "config": cfg.to_dict(), **extra}


# -- commands -------------------------------------------------------------------

def cmd_gen(args) -> dict:
    cfg = _config(args)
    spec = TaskFamilySpec(N=cfg.family.N, C=cfg.family.C, n_i=cfg.family.n_i)
    bank = build_family(spec, cfg.seed)
    out = _out_dir(args, cfg)
    manifest = bank.save(out)
    return {"manifest": str(manifest), "n_tasks": len(bank), "delta_min": min(bank.deltas),
            "delta_max": max(bank.deltas), "seed": cfg.seed}


def _target_train(cfg: ExperimentConfig):
    if cfg.target.p_csv:
        P, Q = load_target_csv(cfg)
        spec = SplitSpec(cfg.split.m_tr, cfg.split.m_te, child_seed(cfg.seed, "split"))
        return split(P, spec)[0], split(Q, SplitSpec(spec.m_tr, spec.m_te, child_seed(cfg.seed, "split-q")))[0]
    return hdgm_pair(cfg.target.delta, cfg.split.m_tr, stream(cfg.seed, "target-train"))


def cmd_train(args) -> dict:
    cfg = _config(args)
    P_tr = Q_tr = None
    if cfg.method in ("mmd-o", "mmd-d"):
        P_tr, Q_tr = _target_train(cfg)
        dim = P_tr.shape[1]
        bank = None
    else:
        bank = _bank_for(cfg, cfg.family.N, child_seed(cfg.seed, "bank"))
        dim = bank.dim
    ctx = MethodContext(cfg, bank, child_seed(cfg.seed, "methods"), dim=dim)
    alg, trace = ctx.algorithm(cfg.method, P_tr, Q_tr)
    out = _out_dir(args, cfg)
    ckpt = out / f"{cfg.method}.json"
    alg.save(ckpt)
    if LearnedAlgorithm.load(ckpt).to_dict() != alg.to_dict():
        raise SelfCheckError("checkpoint does not round-trip")
    rows = [{"stage": s, "iteration": i, "objective": v} for s, i, v in trace]
    _write_rows(out / f"{cfg.method}_trace.csv", ["stage", "iteration", "objective"], rows,
                _meta(cfg, "train"))
    return {"checkpoint": str(ckpt), "kind": alg.kind, "trace_rows": len(rows), "seed": cfg.seed}


def cmd_test(args) -> dict:
    cfg = _config(args)
    alg = LearnedAlgorithm.load(args.algorithm)
    P = load_csv(args.p_csv, header=args.header)
    Q = load_csv(args.q_csv, header=args.header)
    if P.shape != Q.shape:
        raise ValueError(f"sample shapes differ: {P.shape} vs {Q.shape}")
    dim = alg.payload[0].input_dim
    if dim is not None and dim != P.shape[1]:
        raise ValueError(f"checkpoint expects dimension {dim}, data has {P.shape[1]}")
    m_tr = args.m_tr if args.m_tr is not None else cfg.split.m_tr
    m_te = args.m_te if args.m_te is not None else P.shape[0] - m_tr
    P_tr, P_te = split(P, SplitSpec(m_tr, m_te, child_seed(cfg.seed, "split-p")))
    Q_tr, Q_te = split(Q, SplitSpec(m_tr, m_te, child_seed(cfg.seed, "split-q")))
    kernel = adapt(alg, P_tr, Q_tr)
    if isinstance(kernel, MixtureKernel):
        beta = kernel.beta
        if not (np.all(beta >= 0) and abs(beta.sum() - 1) <= 1e-12):
            raise SelfCheckError("mixture weights left the simplex")
    t = cfg.test
    res = permutation_test(kernel, P_te, Q_te, t.n_perm, t.alpha, stream(cfg.seed, "permutations"),
                           t.pvalue_add_one)
    counts = res.p_value * t.n_perm
    if not t.pvalue_add_one and abs(counts - round(counts)) > 1e-9:
        raise SelfCheckError("p-value off the 1/n_perm lattice")
    doc = {"statistic": res.statistic, "p_value": res.p_value, "reject": res.reject, "alpha": res.alpha,
           "n_perm": t.n_perm, "m_tr": m_tr, "m_te": m_te, "seed": cfg.seed,
           "algorithm": str(args.algorithm), "config": cfg.to_dict()}
    out = _out_dir(args, cfg)
    (out / "test_outcome.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return doc


def cmd_power(args) -> dict:
    cfg = _config(args)
    summary, per_rep = run_power(cfg, progress=log.info)
    for r in per_rep:
        if not 0 <= r["rate"] <= 1:
            raise SelfCheckError(f"rejection rate out of range: {r}")
    out = _out_dir(args, cfg)
    _write_rows(out / "power.csv", POWER_COLUMNS, summary, _meta(cfg, "power"))
    _write_rows(out / "power_repeats.csv", ["method", "m_tr", "m_te", "N", "repeat", "rate", "std_err",
                                            "n_trials", "seed"], per_rep, _meta(cfg, "power"))
    return {"rows": len(summary), "path": str(out / "power.csv"), "seed": cfg.seed}


def cmd_relatedness(args) -> dict:
    cfg = _config(args)
    rows, summary = run_relatedness(cfg, progress=log.info)
    if any(r["gamma_hat_it"] < 0 for r in rows):
        raise SelfCheckError("negative relatedness estimate")
    out = _out_dir(args, cfg)
    _write_rows(out / "relatedness.csv", ["C", "task_index", "delta", "restart", "gamma_hat_it"], rows,
                _meta(cfg, "relatedness"))
    _write_rows(out / "relatedness_summary.csv", ["C", "gamma_hat"], summary, _meta(cfg, "relatedness"))
    doc = {"summary": summary, "seed": cfg.seed, "config": cfg.to_dict()}
    (out / "relatedness_summary.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return {"summary": summary, "seed": cfg.seed}


def cmd_gradcheck(args) -> dict:
    """Finite-difference checks of the power criterion and of the one-step meta-gradient."""
    cfg = _config(args)
    rng = stream(cfg.seed, "gradcheck")
    k = DeepKernel.init(2, rng, width=args.width)
    P, Q = rng.normal(size=(args.m, 2)), rng.normal(size=(args.m, 2)) + 0.3
    Z = np.vstack([P, Q])
    j_obj = lambda th: j_from_h(h_from_gram(k.gram_var(th, Z), args.m), cfg.lam)
    j_err = ad.finite_diff_check(j_obj, k.param_vector(), args.step)
    g = GaussianKernel(0.0, 2)
    Z_te = np.vstack([rng.normal(size=(args.m, 2)), rng.normal(size=(args.m, 2)) + 0.3])

    def meta(th):
        w = inner_adapt(g, th, Z, args.m, cfg.meta_kl.eta, 1, cfg.lam, create_graph=True)
        return j_from_h(h_from_gram(g.gram_var(w, Z_te), args.m), cfg.lam)

    meta_err = ad.finite_diff_check(meta, g.param_vector(), args.step)
    doc = {"j_hat_max_rel_err": j_err, "meta_grad_max_rel_err": meta_err,
           "j_tol": 1e-4, "meta_tol": 1e-3, "seed": cfg.seed}
    if j_err > 1e-4 or meta_err > 1e-3:
        raise SelfCheckError(json.dumps(doc))
    return doc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m2st", description="Meta two-sample testing harness")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default ${ENV_OUTPUT_DIR} or ./m2st-out)")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("gen", help="generate a synthetic meta-sample bank")
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train a kernel-selection algorithm")
    common(sp)
    sp.add_argument("--method")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("test", help="split, adapt, and run the permutation test on two CSV samples")
    common(sp)
    sp.add_argument("algorithm", help="algorithm checkpoint (JSON)")
    sp.add_argument("p_csv")
    sp.add_argument("q_csv")
    sp.add_argument("--header", action="store_true", help="skip a header row in both CSVs")
    sp.add_argument("--m-tr", type=int)
    sp.add_argument("--m-te", type=int)
    sp.add_argument("--n-perm", dest="n_perm", type=int)
    sp.add_argument("--alpha", type=float)
    sp.set_defaults(func=cmd_test)

    sp = sub.add_parser("power", help="rejection-rate sweep on synthetic HDGM tasks")
    common(sp)
    sp.add_argument("--n-trials", dest="n_trials", type=int)
    sp.add_argument("--n-perm", dest="n_perm", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--paper-scale", action="store_true")
    sp.set_defaults(func=cmd_power)

    sp = sub.add_parser("relatedness", help="closeness sweep of empirical gamma-relatedness")
    common(sp)
    sp.add_argument("--paper-scale", action="store_true")
    sp.set_defaults(func=cmd_relatedness)

    sp = sub.add_parser("gradcheck", help="finite-difference checks of the criterion and meta-gradient")
    common(sp)
    sp.add_argument("--m", type=int, default=10)
    sp.add_argument("--width", type=int, default=6)
    sp.add_argument("--step", type=float, default=1e-5)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # reported as JSON for callers
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
