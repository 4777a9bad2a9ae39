"""Empirical gamma-relatedness between a target task and meta tasks.

For each (target, task) pair a fresh kernel is trained to maximize the squared
gap between the two tasks' power criteria; the gap at the trained kernel is one
restart's estimate. The family estimate is the minimum over tasks of the
maximum over restarts.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffengine as ad
from .diffengine import Var
from .estimators import DEFAULT_LAMBDA, h_from_gram, j_from_h
from .kernels import DeepKernel, Kernel
from .learners import _pooled, ascend
from .seeding import stream
from .tasks import MetaSampleBank

Splits = tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]
KernelFactory = Callable[[np.random.Generator], Kernel]


@dataclass(frozen=True)
class RelatednessConfig:
    lr: float = 0.01
    n_epochs: int = 20
    lam: float = DEFAULT_LAMBDA
    restarts: int = 10
    eval_on_test: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class RelatednessEstimate:
    per_task: np.ndarray  # (n_tasks, restarts)
    gamma_hat: float

    @classmethod
    def from_values(cls, per_task) -> "RelatednessEstimate":
        per_task = np.atleast_2d(np.asarray(per_task, dtype=np.float64))
        return cls(per_task, float(per_task.max(axis=1).min()))


def default_kernel_factory(dim: int) -> KernelFactory:
    return lambda rng: DeepKernel.init(dim, rng)


def _gap(kernel: Kernel, theta, a, b, lam: float) -> Var:
    (Za, ma), (Zb, mb) = a, b
    ja = j_from_h(h_from_gram(kernel.gram_var(theta, Za), ma), lam)
    jb = j_from_h(h_from_gram(kernel.gram_var(theta, Zb), mb), lam)
    return ad.sub(ja, jb)


def estimate_gamma_pair(target: Splits, task: Splits, cfg: RelatednessConfig = RelatednessConfig(),
                        kernel_factory: KernelFactory | None = None, seed: int = 0) -> np.ndarray:
    """One nonnegative gap estimate per restart; each restart re-initializes the kernel."""
    (tP, tQ), (tPe, tQe) = target
    (iP, iQ), (iPe, iQe) = task
    if kernel_factory is None:
        kernel_factory = default_kernel_factory(np.shape(tP)[1])
    tr = (_pooled(tP, tQ), _pooled(iP, iQ))
    te = (_pooled(tPe, tQe), _pooled(iPe, iQe)) if cfg.eval_on_test else tr
    out = np.empty(cfg.restarts)
    for r in range(cfg.restarts):
        k0 = kernel_factory(stream(seed, "relatedness-init", r))

        def objective(theta: Var, k0=k0) -> Var:
            d = _gap(k0, theta, *tr, cfg.lam)
            return ad.mul(d, d)

        x, _, _ = ascend(objective, k0.param_vector().values, cfg.lr, cfg.n_epochs, clip=None)
        with ad.no_grad():
            out[r] = abs(float(_gap(k0, Var(x), *te, cfg.lam).value))
    return out


def estimate_gamma_family(target: Splits, bank_splits: list[Splits],
                          cfg: RelatednessConfig = RelatednessConfig(),
                          kernel_factory: KernelFactory | None = None) -> RelatednessEstimate:
    if not bank_splits:
        raise ValueError("bank must contain at least one task")
    rows = [estimate_gamma_pair(target, task, cfg, kernel_factory,
                                seed=int(stream(cfg.rng_seed, "relatedness-task", i).integers(2**31)))
            for i, task in enumerate(bank_splits)]
    return RelatednessEstimate.from_values(rows)


def halves(S_P: np.ndarray, S_Q: np.ndarray, rng: np.random.Generator) -> Splits:
    """Random equal train/test halves of each sample."""
    m = S_P.shape[0] // 2
    ip, iq = rng.permutation(S_P.shape[0]), rng.permutation(S_Q.shape[0])
    return (S_P[ip[:m]], S_Q[iq[:m]]), (S_P[ip[m:2 * m]], S_Q[iq[m:2 * m]])


def bank_splits(bank: MetaSampleBank, seed: int) -> list[Splits]:
    return [halves(p, q, stream(seed, "relatedness-split", i)) for i, (p, q) in enumerate(bank.tasks)]
