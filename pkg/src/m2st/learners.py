"""Kernel-selection procedures: direct, aggregated, meta-learned, and multi-kernel.

Every trainer maximizes the regularized power criterion by gradient ascent.
Deterministic trainers return their best iterate; minibatch trainers (AGT and
Meta-KL) return their last iterate because their per-step objectives are
computed on different task batches and are not comparable.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffengine as ad
from .diffengine import Var
from .estimators import DEFAULT_LAMBDA, DegenerateVarianceError, h_from_gram, j_from_h
from .kernels import (GaussianKernel, Kernel, MixtureKernel, _as_samples, kernel_from_dict,
                      median_heuristic, mixture_gram_cached)
from .seeding import stream
from .tasks import MetaSampleBank

log = logging.getLogger(__name__)

ALGORITHM_VERSION = 1
VERTEX_LOGIT = 40.0


class Adam:
    """Adam on flat float64 arrays; ``step`` ascends when ``maximize`` is set."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 maximize: bool = True):
        if lr <= 0:
            raise ValueError("step size must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.maximize = maximize
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m, self.v = np.zeros_like(x), np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        upd = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return x + upd if self.maximize else x - upd

    def state_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "maximize": self.maximize, "t": self.t,
                "m": None if self.m is None else self.m.tolist(),
                "v": None if self.v is None else self.v.tolist()}

    @classmethod
    def from_state(cls, d: dict) -> "Adam":
        opt = cls(d["lr"], d["beta1"], d["beta2"], d["eps"], d["maximize"])
        opt.t = d["t"]
        opt.m = None if d["m"] is None else np.asarray(d["m"], dtype=np.float64)
        opt.v = None if d["v"] is None else np.asarray(d["v"], dtype=np.float64)
        return opt


@dataclass
class LearnerState:
    """Checkpointable optimizer state and parameter vector of a gradient-trained kernel."""

    params: np.ndarray
    optimizer: Adam
    epoch: int = 0

    def to_dict(self) -> dict:
        return {"params": np.asarray(self.params).tolist(), "optimizer": self.optimizer.state_dict(),
                "epoch": self.epoch}

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerState":
        return cls(np.asarray(d["params"], dtype=np.float64), Adam.from_state(d["optimizer"]), d["epoch"])


def clip_norm(g: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return g
    n = float(np.linalg.norm(g))
    if n > max_norm:
        log.info("gradient norm %.3g clipped to %.3g", n, max_norm)
        return g * (max_norm / n)
    return g


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    n_epochs: int = 200
    lam: float = DEFAULT_LAMBDA
    rng_seed: int = 0
    clip: float | None = 1e3
    n_batch: int = 10  # tasks per step for aggregated training

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.n_epochs < 0:
            raise ValueError("n_epochs must be >= 0")


@dataclass
class TrainResult:
    kernel: Kernel
    trace: list[float] = field(default_factory=list)
    best_value: float = float("nan")


def _pooled(S_P, S_Q) -> tuple[np.ndarray, int]:
    S_P, S_Q = _as_samples(S_P), _as_samples(S_Q)
    if S_P.shape != S_Q.shape:
        raise ValueError(f"sample shapes differ: {S_P.shape} vs {S_Q.shape}")
    return np.vstack([S_P, S_Q]), S_P.shape[0]


def j_objective(kernel: Kernel, S_P, S_Q, lam: float) -> Callable[[Var], Var]:
    Z, m = _pooled(S_P, S_Q)
    return lambda theta: j_from_h(h_from_gram(kernel.gram_var(theta, Z), m), lam)


def ascend(objective: Callable[[Var], Var], x0: np.ndarray, lr: float, n_epochs: int,
           clip: float | None = 1e3) -> tuple[np.ndarray, list[float], float]:
    """Adam ascent keeping the best iterate seen (the final iterate included).

    Returns (params, per-epoch objective trace, objective at the returned params).
    A non-finite objective or gradient stops the run; earlier iterates survive.
    """
    x = np.array(x0, dtype=np.float64)
    if n_epochs == 0:
        return x, [], float("nan")
    opt = Adam(lr)
    trace: list[float] = []
    best_x, best_v = x.copy(), -np.inf
    finished = True
    for _ in range(n_epochs):
        try:
            v, g = ad.value_and_gradient(objective, x)
        except (DegenerateVarianceError, FloatingPointError) as exc:
            log.warning("ascent stopped: %s", exc)
            finished = False
            break
        if not (np.isfinite(v) and np.all(np.isfinite(g))):
            log.warning("ascent stopped: non-finite objective or gradient")
            finished = False
            break
        trace.append(v)
        if v > best_v:
            best_x, best_v = x.copy(), v
        x = opt.step(x, clip_norm(g, clip))
    if finished:
        try:
            with ad.no_grad():
                v = float(objective(Var(x)).value)
        except (DegenerateVarianceError, FloatingPointError):
            v = float("nan")
        if np.isfinite(v) and v > best_v:
            best_x, best_v = x.copy(), v
    return best_x, trace, best_v


def train_direct(kernel_init: Kernel, S_P_tr, S_Q_tr, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Maximize the power criterion on one training split (MMD-D / MMD-O style)."""
    obj = j_objective(kernel_init, S_P_tr, S_Q_tr, cfg.lam)
    x, trace, best = ascend(obj, kernel_init.param_vector().values, cfg.lr, cfg.n_epochs, cfg.clip)
    return TrainResult(kernel_init.with_values(x), trace, best)


def train_mmd_o(S_P_tr, S_Q_tr, cfg: TrainConfig = TrainConfig(),
                init_lengthscale: float | None = None) -> TrainResult:
    """Gaussian kernel with optimized lengthscale, started at the median heuristic."""
    ls = median_heuristic(S_P_tr, S_Q_tr) if init_lengthscale is None else init_lengthscale
    k0 = GaussianKernel.from_lengthscale(ls, _as_samples(S_P_tr).shape[1])
    return train_direct(k0, S_P_tr, S_Q_tr, cfg)


@dataclass
class LearnedAlgorithm:
    """A kernel-selection algorithm: stored kernels plus how to adapt them to new data."""

    kind: str
    payload: list[Kernel]
    config: dict = field(default_factory=dict)

    KINDS = ("meta_kl", "meta_mkl", "agt", "direct")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown algorithm kind {self.kind!r}")
        if not self.payload:
            raise ValueError("algorithm payload is empty")
        if self.kind != "meta_mkl" and len(self.payload) != 1:
            raise ValueError(f"{self.kind} stores exactly one kernel")

    def to_dict(self) -> dict:
        return {"version": ALGORITHM_VERSION, "kind": self.kind, "config": self.config,
                "payload": [k.to_dict() for k in self.payload]}

    @classmethod
    def from_dict(cls, d: dict) -> "LearnedAlgorithm":
        if d.get("version") != ALGORITHM_VERSION:
            raise ValueError(f"unsupported algorithm checkpoint version {d.get('version')!r}")
        return cls(d["kind"], [kernel_from_dict(k) for k in d["payload"]], d.get("config", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "LearnedAlgorithm":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def kernel(self) -> Kernel:
        return self.payload[0]


def _task_batch(n_tasks: int, n_batch: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(n_tasks, size=min(n_batch, n_tasks), replace=False))


def train_agt(bank: MetaSampleBank, kernel_init: Kernel, cfg: TrainConfig = TrainConfig()) -> tuple[LearnedAlgorithm, list[float]]:
    """One kernel ascending the power criterion averaged over minibatches of meta tasks."""
    pooled = [_pooled(p, q) for p, q in bank.tasks]
    x = kernel_init.param_vector().values.copy()
    opt = Adam(cfg.lr)
    trace: list[float] = []
    for epoch in range(cfg.n_epochs):
        idx = _task_batch(len(bank), cfg.n_batch, stream(cfg.rng_seed, "agt-batch", epoch))

        def objective(theta, idx=idx):
            parts = [j_from_h(h_from_gram(kernel_init.gram_var(theta, pooled[i][0]), pooled[i][1]), cfg.lam)
                     for i in idx]
            return ad.mul(ad.tree_sum(parts), 1.0 / len(idx))

        v, g = ad.value_and_gradient(objective, x)
        if not (np.isfinite(v) and np.all(np.isfinite(g))):
            log.warning("AGT stopped at epoch %d: non-finite objective", epoch)
            break
        trace.append(v)
        x = opt.step(x, clip_norm(g, cfg.clip))
    alg = LearnedAlgorithm("agt", [kernel_init.with_values(x)], {"lam": cfg.lam})
    return alg, trace


@dataclass(frozen=True)
class MetaKLConfig:
    eta: float = 0.8
    n_steps: int = 1
    meta_rate: float = 0.01
    n_batch: int = 10
    T_max: int = 1000
    lam: float = DEFAULT_LAMBDA
    first_order: bool = False
    inner_split_frac: float = 0.5
    rng_seed: int = 0
    clip: float | None = 1e3
    max_skips: int = 10

    def __post_init__(self):
        if self.eta <= 0 or self.meta_rate <= 0:
            raise ValueError("eta and meta_rate must be positive")
        if self.n_steps < 0 or self.T_max < 0:
            raise ValueError("n_steps and T_max must be >= 0")
        if self.n_batch < 1:
            raise ValueError("n_batch must be >= 1")
        if not 0 < self.inner_split_frac < 1:
            raise ValueError("inner_split_frac must be in (0, 1)")


def inner_adapt(kernel: Kernel, theta: Var, Z: np.ndarray, m: int, eta: float, n_steps: int,
                lam: float, create_graph: bool) -> Var:
    """``n_steps`` plain gradient-ascent steps of size ``eta`` on the power criterion.

    Outside a recording tape the steps run on a local tape and a constant is
    returned, so plain evaluation still sees the adapted parameters.
    """
    theta = ad.constant(theta)
    if not (ad.is_recording() and theta.requires_grad):
        x = theta.value.copy()
        obj = lambda t: j_from_h(h_from_gram(kernel.gram_var(t, Z), m), lam)
        for _ in range(n_steps):
            x = x + eta * ad.value_and_gradient(obj, x)[1]
        return Var(x)
    w = theta
    for _ in range(n_steps):
        J = j_from_h(h_from_gram(kernel.gram_var(w, Z), m), lam)
        (g,) = ad.grad(J, [w], create_graph=create_graph)
        w = ad.add(w, ad.mul(eta, g))
    return w


def _inner_split(S_P, S_Q, frac: float, rng: np.random.Generator):
    m = S_P.shape[0]
    m_tr = int(round(frac * m))
    if m_tr < 2 or m - m_tr < 2:
        raise ValueError(f"task of size {m} too small for an inner split at fraction {frac}")
    ip, iq = rng.permutation(m), rng.permutation(m)
    return (S_P[ip[:m_tr]], S_Q[iq[:m_tr]]), (S_P[ip[m_tr:]], S_Q[iq[m_tr:]])


def meta_objective(kernel: Kernel, tasks: Sequence[tuple], cfg: MetaKLConfig) -> Callable[[Var], Var]:
    """Sum over tasks of the query-split criterion after inner adaptation on the support split.

    ``tasks`` holds ((P_tr, Q_tr), (P_te, Q_te)) pairs.
    """
    prepared = [(_pooled(*tr), _pooled(*te)) for tr, te in tasks]

    def objective(theta: Var) -> Var:
        parts = []
        for (Ztr, mtr), (Zte, mte) in prepared:
            w = inner_adapt(kernel, theta, Ztr, mtr, cfg.eta, cfg.n_steps, cfg.lam,
                            create_graph=not cfg.first_order)
            parts.append(j_from_h(h_from_gram(kernel.gram_var(w, Zte), mte), cfg.lam))
        return ad.tree_sum(parts)

    return objective


def meta_kl_train(bank: MetaSampleBank, kernel_init: Kernel,
                  cfg: MetaKLConfig = MetaKLConfig()) -> tuple[LearnedAlgorithm, list[float]]:
    """Learn the starting point of an ``n_steps``-step ascent adaptation (MAML-style).

    The trace holds the mean query-split criterion of each outer iteration.
    """
    x = kernel_init.param_vector().values.copy()
    opt = Adam(cfg.meta_rate)
    trace: list[float] = []
    skips = 0
    for it in range(cfg.T_max):
        rng = stream(cfg.rng_seed, "meta-kl", it)
        idx = _task_batch(len(bank), cfg.n_batch, rng)
        tasks = [_inner_split(*bank.tasks[i], cfg.inner_split_frac, rng) for i in idx]
        try:
            v, g = ad.value_and_gradient(meta_objective(kernel_init, tasks, cfg), x)
            ok = np.isfinite(v) and np.all(np.isfinite(g))
        except (DegenerateVarianceError, FloatingPointError):
            ok = False
        if not ok:
            skips += 1
            log.warning("meta-KL iteration %d: non-finite meta-gradient, batch skipped", it)
            trace.append(float("nan"))
            if skips >= cfg.max_skips:
                log.error("meta-KL aborted after %d consecutive skipped batches", skips)
                break
            continue
        skips = 0
        trace.append(v / len(idx))
        x = opt.step(x, clip_norm(g, cfg.clip))
    alg = LearnedAlgorithm("meta_kl", [kernel_init.with_values(x)],
                           {"eta": cfg.eta, "n_steps": cfg.n_steps, "lam": cfg.lam})
    return alg, trace


@dataclass(frozen=True)
class MKLConfig:
    """Adaptation of mixture weights on a target training split."""

    lr: float = 0.01
    n_epochs: int = 200
    lam: float = DEFAULT_LAMBDA
    lambda_schedule: str = "fixed"  # or "theory": lambda = m^(-1/3)
    vertex_init: bool = False
    clip: float | None = 1e3

    def __post_init__(self):
        if self.lambda_schedule not in ("fixed", "theory"):
            raise ValueError("lambda_schedule must be 'fixed' or 'theory'")

    def lam_for(self, m: int) -> float:
        return m ** (-1.0 / 3.0) if self.lambda_schedule == "theory" else self.lam


def adapt_uniform(bases: Sequence[Kernel], *_args, **_kwargs) -> MixtureKernel:
    """Equal weights 1/N; consumes no data."""
    return MixtureKernel.uniform(bases)


def _base_values(bases: Sequence[Kernel], Z: np.ndarray, m: int, lam: float) -> tuple[list[np.ndarray], np.ndarray]:
    grams = [b.gram(Z) for b in bases]
    with ad.no_grad():
        vals = np.array([float(j_from_h(h_from_gram(K, m), lam).value) for K in grams])
    return grams, vals


def adapt_best_single(bases: Sequence[Kernel], S_P_tr, S_Q_tr, cfg: MKLConfig = MKLConfig()) -> Kernel:
    """The base kernel with the largest criterion on the adaptation split (lowest index on ties)."""
    if not bases:
        raise ValueError("need at least one base kernel")
    Z, m = _pooled(S_P_tr, S_Q_tr)
    _, vals = _base_values(bases, Z, m, cfg.lam_for(m))
    return bases[int(np.argmax(vals))]


def adapt_mkl(bases: Sequence[Kernel], S_P_tr, S_Q_tr, cfg: MKLConfig = MKLConfig()) -> MixtureKernel:
    """Ascend the criterion of the mixture over softmax-parameterized simplex weights.

    Base Grams are computed once; only the N logits move.
    """
    if not bases:
        raise ValueError("need at least one base kernel")
    Z, m = _pooled(S_P_tr, S_Q_tr)
    lam = cfg.lam_for(m)
    grams, vals = _base_values(bases, Z, m, lam)
    x0 = np.zeros(len(bases))
    if cfg.vertex_init:
        x0[int(np.argmax(vals))] = VERTEX_LOGIT
    if len(bases) == 1:
        return MixtureKernel(tuple(bases), x0)

    def objective(logits: Var) -> Var:
        return j_from_h(h_from_gram(mixture_gram_cached(grams, logits), m), lam)

    x, _, _ = ascend(objective, x0, cfg.lr, cfg.n_epochs, cfg.clip)
    return MixtureKernel(tuple(bases), x)


def meta_mkl_train(bank: MetaSampleBank, kernel_init_alg: LearnedAlgorithm,
                   cfg: TrainConfig = TrainConfig(), n_select: int = 10,
                   mkl: MKLConfig = MKLConfig(),
                   adaptation: str = "weights") -> tuple[LearnedAlgorithm, list[list[float]]]:
    """Train one base kernel per sampled meta task, each warm-started by the Meta-KL adaptation.

    Also returns the per-base training traces.
    """
    if kernel_init_alg.kind != "meta_kl":
        raise ValueError("Meta-MKL bases are warm-started from a meta_kl algorithm")
    if len(bank) < n_select:
        raise ValueError(f"bank has {len(bank)} tasks, cannot select {n_select}")
    idx = np.sort(stream(cfg.rng_seed, "meta-mkl-select").choice(len(bank), n_select, replace=False))
    bases, traces = [], []
    for i in idx:
        S_P, S_Q = bank.tasks[i]
        warm = adapt(kernel_init_alg, S_P, S_Q)
        res = train_direct(warm, S_P, S_Q, cfg)
        bases.append(res.kernel)
        traces.append(res.trace)
    alg = LearnedAlgorithm("meta_mkl", bases, {
        "adaptation": adaptation, "mkl": asdict(mkl), "selected_tasks": [int(i) + 1 for i in idx]})
    return alg, traces


def with_adaptation(alg: LearnedAlgorithm, adaptation: str) -> LearnedAlgorithm:
    """The same Meta-MKL bases with a different adaptation rule (weights, uniform, best_single)."""
    if alg.kind != "meta_mkl":
        raise ValueError("adaptation variants apply to meta_mkl algorithms only")
    return LearnedAlgorithm(alg.kind, list(alg.payload), {**alg.config, "adaptation": adaptation})


def adapt(alg: LearnedAlgorithm, S_P_tr, S_Q_tr) -> Kernel:
    """Apply a learned algorithm to a (small) training split and return the selected kernel."""
    if alg.kind in ("agt", "direct"):
        return alg.kernel
    if alg.kind == "meta_kl":
        k = alg.kernel
        n_steps = int(alg.config.get("n_steps", 1))
        if n_steps == 0:
            return k
        Z, m = _pooled(S_P_tr, S_Q_tr)
        w = inner_adapt(k, k.param_vector().values, Z, m, float(alg.config.get("eta", 0.8)), n_steps,
                        float(alg.config.get("lam", DEFAULT_LAMBDA)), create_graph=False)
        return k.with_values(w.value)
    mode = alg.config.get("adaptation", "weights")
    mkl = MKLConfig(**alg.config.get("mkl", {}))
    if mode == "uniform":
        return adapt_uniform(alg.payload)
    if mode == "best_single":
        return adapt_best_single(alg.payload, S_P_tr, S_Q_tr, mkl)
    if mode == "weights":
        return adapt_mkl(alg.payload, S_P_tr, S_Q_tr, mkl)
    raise ValueError(f"unknown Meta-MKL adaptation {mode!r}")
