"""Experiment configuration and the end-to-end pipelines behind the CLI.

Configs are YAML documents whose sections map one-to-one onto dataclasses;
unknown keys are rejected. All randomness derives from the root ``seed``
through named streams (see ``seeding``), so a run is reproducible from its
echoed config alone.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from .kernels import DeepKernel, Kernel
from .learners import (LearnedAlgorithm, MetaKLConfig, MKLConfig, TrainConfig, adapt, meta_kl_train,
                       meta_mkl_train, train_agt, train_direct, train_mmd_o, with_adaptation)
from .relatedness import RelatednessConfig, bank_splits, estimate_gamma_family, estimate_gamma_pair, halves
from .seeding import child_seed, stream
from .tasks import MetaSampleBank, TaskFamilySpec, build_family, hdgm_pair, load_csv
from .testing import RejectionRate, permutation_test, rejection_rate

METHODS = ("mmd-o", "mmd-d", "agt-kl", "meta-kl", "meta-mkl", "meta-mkl-a", "best-single")


class ConfigError(ValueError):
    pass


@dataclass
class TargetSection:
    delta: float = 0.7
    p_csv: str | None = None
    q_csv: str | None = None
    header: bool = False


@dataclass
class FamilySection:
    N: int = 100
    C: float = 0.3
    n_i: int = 100
    bank: str | None = None


@dataclass
class SplitSection:
    m_tr: int = 50
    m_te: int = 150


@dataclass
class KernelSection:
    width: int | None = None
    n_layers: int = 5
    kappa_lengthscale: float = 1.0
    q_lengthscale: float = 1.0
    eps: float = 0.1


@dataclass
class TrainSection:
    lr: float = 0.01
    n_epochs: int = 200
    n_batch: int = 10


@dataclass
class MetaKLSection:
    eta: float = 0.8
    n_steps: int = 1
    meta_rate: float = 0.01
    n_batch: int = 10
    T_max: int = 1000
    first_order: bool = False
    inner_split_frac: float = 0.5


@dataclass
class MKLSection:
    lr: float = 0.01
    n_epochs: int = 200
    lambda_schedule: str = "fixed"
    vertex_init: bool = False
    n_select: int = 10
    meta_kl_checkpoint: str | None = None


@dataclass
class TestSection:
    n_trials: int = 100
    n_perm: int = 100
    alpha: float = 0.05
    pvalue_add_one: bool = False

    __test__ = False


@dataclass
class PowerSection:
    methods: list[str] = field(default_factory=lambda: ["mmd-d", "meta-kl", "meta-mkl"])
    m_tr: list[int] = field(default_factory=lambda: [50])
    m_te: list[int] = field(default_factory=lambda: [50, 100, 150, 200, 250])
    N: list[int] = field(default_factory=list)
    repeats: int = 5


@dataclass
class RelatednessSection:
    C: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])
    N: int = 1
    split_size: int = 500
    restarts: int = 10
    n_epochs: int = 20
    lr: float = 0.01
    eval_on_test: bool = False


@dataclass
class ExperimentConfig:
    method: str = "meta-mkl"
    seed: int = 0
    lam: float = 1e-8
    target: TargetSection = field(default_factory=TargetSection)
    family: FamilySection = field(default_factory=FamilySection)
    split: SplitSection = field(default_factory=SplitSection)
    kernel: KernelSection = field(default_factory=KernelSection)
    train: TrainSection = field(default_factory=TrainSection)
    meta_kl: MetaKLSection = field(default_factory=MetaKLSection)
    mkl: MKLSection = field(default_factory=MKLSection)
    test: TestSection = field(default_factory=TestSection)
    power: PowerSection = field(default_factory=PowerSection)
    relatedness: RelatednessSection = field(default_factory=RelatednessSection)
    output_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        methods = [self.method] + list(self.power.methods)
        bad = [m for m in methods if m not in METHODS and m not in _STUB_METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
        for path in (self.target.p_csv, self.target.q_csv, self.family.bank, self.mkl.meta_kl_checkpoint):
            if path is not None and not Path(path).exists():
                raise ConfigError(f"referenced file does not exist: {path}")
        if (self.target.p_csv is None) != (self.target.q_csv is None):
            raise ConfigError("target.p_csv and target.q_csv must be given together")
        if not 0 < self.test.alpha < 1:
            raise ConfigError("alpha must be in (0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.train.lr, n_epochs=self.train.n_epochs, lam=self.lam,
                           rng_seed=seed, n_batch=self.train.n_batch)

    def base_train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.mkl.lr, n_epochs=self.train.n_epochs, lam=self.lam, rng_seed=seed)

    def meta_kl_config(self, seed: int) -> MetaKLConfig:
        s = self.meta_kl
        return MetaKLConfig(eta=s.eta, n_steps=s.n_steps, meta_rate=s.meta_rate, n_batch=s.n_batch,
                            T_max=s.T_max, lam=self.lam, first_order=s.first_order,
                            inner_split_frac=s.inner_split_frac, rng_seed=seed)

    def mkl_config(self) -> MKLConfig:
        return MKLConfig(lr=self.mkl.lr, n_epochs=self.mkl.n_epochs, lam=self.lam,
                         lambda_schedule=self.mkl.lambda_schedule, vertex_init=self.mkl.vertex_init)


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section '{where}' must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{where}': {unknown}")
    kwargs = {}
    for key, value in data.items():
        t = hints[key]
        if dataclasses.is_dataclass(t):
            kwargs[key] = _build(t, value, f"{where}.{key}" if where else key)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "")


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
    if overrides:
        data = deep_merge(data, overrides)
    return config_from_dict(data).validate()


def deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_assignment(text: str) -> dict:
    """``a.b.c=value`` -> {"a": {"b": {"c": value}}} with a YAML-parsed value."""
    if "=" not in text:
        raise ConfigError(f"override must look like key.path=value, got {text!r}")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw)
    out: dict = value
    for part in reversed(key.strip().split(".")):
        out = {part: out}
    return out


def paper_scale(cfg: ExperimentConfig) -> ExperimentConfig:
    """Repeat counts and split sizes used for the published synthetic experiments."""
    cfg.test.n_trials = 100
    cfg.power.repeats = 20
    cfg.relatedness.split_size = 4000
    return cfg


# -- method pipelines -----------------------------------------------------------

class MethodContext:
    """Shared, lazily trained meta-algorithms for one repeat (one bank, one kernel init)."""

    def __init__(self, cfg: ExperimentConfig, bank: MetaSampleBank | None, seed: int, dim: int = 2):
        self.cfg, self.bank, self.seed, self.dim = cfg, bank, seed, dim
        self._cache: dict[str, tuple[LearnedAlgorithm, list[tuple[str, int, float]]]] = {}

    def kernel_init(self) -> DeepKernel:
        k = self.cfg.kernel
        return DeepKernel.init(self.dim, stream(self.seed, "kernel-init"), width=k.width,
                               n_layers=k.n_layers, kappa_lengthscale=k.kappa_lengthscale,
                               q_lengthscale=k.q_lengthscale, eps=k.eps)

    def _need_bank(self) -> MetaSampleBank:
        if self.bank is None:
            raise ConfigError("this method needs a meta-sample bank")
        return self.bank

    def meta_kl(self):
        if "meta-kl" not in self._cache:
            if self.cfg.mkl.meta_kl_checkpoint:
                alg = LearnedAlgorithm.load(self.cfg.mkl.meta_kl_checkpoint)
                trace = []
            else:
                alg, tr = meta_kl_train(self._need_bank(), self.kernel_init(),
                                        self.cfg.meta_kl_config(child_seed(self.seed, "meta-kl")))
                trace = [("meta-kl", i, v) for i, v in enumerate(tr)]
            self._cache["meta-kl"] = (alg, trace)
        return self._cache["meta-kl"]

    def agt(self):
        if "agt-kl" not in self._cache:
            alg, tr = train_agt(self._need_bank(), self.kernel_init(),
                                self.cfg.train_config(child_seed(self.seed, "agt")))
            self._cache["agt-kl"] = (alg, [("agt-kl", i, v) for i, v in enumerate(tr)])
        return self._cache["agt-kl"]

    def meta_mkl(self):
        if "meta-mkl" not in self._cache:
            mk_alg, mk_trace = self.meta_kl()
            alg, traces = meta_mkl_train(self._need_bank(), mk_alg,
                                         self.cfg.base_train_config(child_seed(self.seed, "meta-mkl")),
                                         n_select=min(self.cfg.mkl.n_select, len(self._need_bank())),
                                         mkl=self.cfg.mkl_config())
            rows = list(mk_trace)
            for b, tr in enumerate(traces):
                rows += [(f"base-{b + 1}", i, v) for i, v in enumerate(tr)]
            self._cache["meta-mkl"] = (alg, rows)
        return self._cache["meta-mkl"]

    def algorithm(self, method: str, P_tr=None, Q_tr=None):
        """Learned algorithm for ``method`` plus its training trace rows (stage, iteration, objective)."""
        if method in _STUB_METHODS:
            return _STUB_METHODS[method], []
        if method == "mmd-d":
            res = train_direct(self.kernel_init(), P_tr, Q_tr, self.cfg.train_config(child_seed(self.seed, "mmd-d")))
            return LearnedAlgorithm("direct", [res.kernel], {}), [("mmd-d", i, v) for i, v in enumerate(res.trace)]
        if method == "mmd-o":
            res = train_mmd_o(P_tr, Q_tr, self.cfg.train_config(child_seed(self.seed, "mmd-o")))
            return LearnedAlgorithm("direct", [res.kernel], {}), [("mmd-o", i, v) for i, v in enumerate(res.trace)]
        if method == "agt-kl":
            return self.agt()
        if method == "meta-kl":
            return self.meta_kl()
        alg, trace = self.meta_mkl()
        mode = {"meta-mkl": "weights", "meta-mkl-a": "uniform", "best-single": "best_single"}[method]
        return with_adaptation(alg, mode), trace


# Test doubles for the harness: name -> algorithm-like object with a fixed decision.
_STUB_METHODS: dict[str, object] = {}


@dataclass
class _FixedDecision:
    reject: bool


def register_stub(name: str, reject: bool) -> None:
    _STUB_METHODS[name] = _FixedDecision(reject)


def make_procedure(alg, P_tr, Q_tr, cfg: ExperimentConfig) -> Callable:
    if isinstance(alg, _FixedDecision):
        return lambda P, Q, rng: alg.reject
    kernel = adapt(alg, P_tr, Q_tr)
    t = cfg.test
    return lambda P, Q, rng: permutation_test(kernel, P, Q, t.n_perm, t.alpha, rng, t.pvalue_add_one)


def _bank_for(cfg: ExperimentConfig, N: int, seed: int) -> MetaSampleBank:
    if cfg.family.bank:
        return MetaSampleBank.load(cfg.family.bank)
    return build_family(TaskFamilySpec(N=N, C=cfg.family.C, n_i=cfg.family.n_i), seed)


POWER_COLUMNS = ["method", "m_tr", "m_te", "N", "rate", "std_err", "n_trials", "seed"]


def run_power(cfg: ExperimentConfig, delta: float | None = None,
              progress: Callable[[str], None] | None = None) -> tuple[list[dict], list[dict]]:
    """Synthetic HDGM power sweep.

    Each repeat draws a fresh bank, kernel init, and target training sample;
    every method then faces the same fresh test draws. Returns (summary rows,
    per-repeat rows); summary ``std_err`` is the standard error of the mean over
    repeats (binomial when there is a single repeat).
    """
    delta = cfg.target.delta if delta is None else delta
    Ns = cfg.power.N or [cfg.family.N]
    per_rep: list[dict] = []
    for rep in range(cfg.power.repeats):
        rep_seed = child_seed(cfg.seed, "repeat", rep)
        for N in Ns:
            bank = None
            if any(m not in ("mmd-o", "mmd-d") and m not in _STUB_METHODS for m in cfg.power.methods):
                bank = _bank_for(cfg, N, child_seed(rep_seed, "bank", N))
            ctx = MethodContext(cfg, bank, child_seed(rep_seed, "methods", N))
            for m_tr in cfg.power.m_tr:
                P_tr, Q_tr = hdgm_pair(delta, m_tr, stream(rep_seed, "target-train", m_tr))
                for method in cfg.power.methods:
                    alg, _ = ctx.algorithm(method, P_tr, Q_tr)
                    proc = make_procedure(alg, P_tr, Q_tr, cfg)
                    for m_te in cfg.power.m_te:
                        seed = child_seed(rep_seed, "test-draws", m_tr, m_te)
                        r: RejectionRate = rejection_rate(
                            proc, lambda g, m_te=m_te: hdgm_pair(delta, m_te, g), cfg.test.n_trials, seed)
                        per_rep.append({"method": method, "m_tr": m_tr, "m_te": m_te, "N": N,
                                        "repeat": rep, "rate": r.rate, "std_err": r.std_err,
                                        "n_trials": r.n_trials, "seed": seed})
                        if progress:
                            progress(f"repeat {rep} N={N} m_tr={m_tr} {method} m_te={m_te}: {r.rate:.3f}")
    return summarize_power(per_rep, cfg.seed), per_rep


def summarize_power(per_rep: list[dict], seed: int) -> list[dict]:
    keys: list[tuple] = []
    groups: dict[tuple, list[dict]] = {}
    for row in per_rep:
        key = (row["method"], row["m_tr"], row["m_te"], row["N"])
        if key not in groups:
            keys.append(key)
            groups[key] = []
        groups[key].append(row)
    out = []
    for key in keys:  # first-seen order is the deterministic sweep order
        rows = groups[key]
        rates = np.array([r["rate"] for r in rows])
        if len(rows) > 1:
            se = float(rates.std(ddof=1) / np.sqrt(len(rows)))
        else:
            se = rows[0]["std_err"]
        out.append(dict(zip(POWER_COLUMNS, [key[0], key[1], key[2], key[3], float(rates.mean()), se,
                                            int(sum(r["n_trials"] for r in rows)), seed])))
    return out


def run_relatedness(cfg: ExperimentConfig, progress: Callable[[str], None] | None = None
                    ) -> tuple[list[dict], list[dict]]:
    """Closeness sweep: (per-restart rows, per-C summary rows incl. an identical-task control)."""
    rs = cfg.relatedness
    rcfg = RelatednessConfig(lr=rs.lr, n_epochs=rs.n_epochs, lam=cfg.lam, restarts=rs.restarts,
                             eval_on_test=rs.eval_on_test, rng_seed=child_seed(cfg.seed, "relatedness"))
    # 2 * split_size rows per distribution, halved into train and test
    target = halves(*hdgm_pair(cfg.target.delta, rs.split_size, stream(cfg.seed, "relatedness-target")),
                    stream(cfg.seed, "relatedness-target-split"))
    rows, summary = [], []
    for C in rs.C:
        spec = TaskFamilySpec(N=rs.N, C=C, n_i=2 * rs.split_size)
        # one bank seed for every C: the families share their Gaussian draws and differ only in delta
        bank = build_family(spec, child_seed(cfg.seed, "relatedness-bank"))
        est = estimate_gamma_family(target, bank_splits(bank, child_seed(cfg.seed, "relatedness-splits")), rcfg)
        for i, delta in enumerate(spec.deltas()):
            for t, g in enumerate(est.per_task[i]):
                rows.append({"C": C, "task_index": i + 1, "delta": delta, "restart": t + 1, "gamma_hat_it": float(g)})
        summary.append({"C": C, "gamma_hat": est.gamma_hat})
        if progress:
            progress(f"C={C}: gamma_hat={est.gamma_hat:.4f}")
    control = estimate_gamma_pair(target, target, RelatednessConfig(
        lr=rs.lr, n_epochs=rs.n_epochs, lam=cfg.lam, restarts=1, rng_seed=cfg.seed))
    summary.append({"C": "identical-task-control", "gamma_hat": float(control.max())})
    return rows, summary


def load_target_csv(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    return (load_csv(cfg.target.p_csv, header=cfg.target.header),
            load_csv(cfg.target.q_csv, header=cfg.target.header))
