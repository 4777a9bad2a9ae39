"""Data splitting, the permutation MMD test, and rejection-rate estimation."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple

import numpy as np

from .kernels import Kernel, _as_samples
from .seeding import stream

DEFAULT_ALPHA = 0.05
DEFAULT_N_PERM = 100


@dataclass(frozen=True)
class SplitSpec:
    m_tr: int
    m_te: int
    rng_seed: int = 0

    def __post_init__(self):
        if self.m_tr < 2 or self.m_te < 2:
            raise ValueError("m_tr and m_te must both be >= 2")


def split(S, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle of the rows, then the first ``m_tr`` rows train and the next ``m_te`` test."""
    S = _as_samples(S)
    if spec.m_tr + spec.m_te > S.shape[0]:
        raise ValueError(f"need {spec.m_tr + spec.m_te} rows, have {S.shape[0]}")
    order = stream(spec.rng_seed, "split").permutation(S.shape[0])
    return S[order[:spec.m_tr]], S[order[spec.m_tr:spec.m_tr + spec.m_te]]


@dataclass
class TestOutcome:
    statistic: float
    permuted: np.ndarray
    p_value: float
    reject: bool
    alpha: float

    __test__ = False  # not a pytest class

    def to_dict(self) -> dict:
        d = asdict(self)
        d["permuted"] = [float(v) for v in self.permuted]
        d["reject"] = bool(self.reject)
        return d


def _assignment_stats(K: np.ndarray, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """MMD^2_u for each row-pairing (A[r], B[r]) of indices into the pooled Gram K."""
    n_pool = K.shape[0]
    n_rows, m = A.shape
    ia = np.zeros((n_pool, n_rows))
    ib = np.zeros((n_pool, n_rows))
    cols = np.arange(n_rows)[:, None]
    ia[A, cols] = 1.0
    ib[B, cols] = 1.0
    ka, kb = K @ ia, K @ ib
    sxx = np.einsum("ir,ir->r", ia, ka)
    syy = np.einsum("ir,ir->r", ib, kb)
    sxy = np.einsum("ir,ir->r", ia, kb)
    diag = np.diag(K)
    txx = diag[A].sum(axis=1)
    tyy = diag[B].sum(axis=1)
    txy = K[A, B].sum(axis=1)
    return ((sxx - txx) + (syy - tyy) - 2.0 * (sxy - txy)) / (m * (m - 1))


def permutation_test(kernel: Kernel, S_P_te, S_Q_te, n_perm: int = DEFAULT_N_PERM,
                     alpha: float = DEFAULT_ALPHA, rng: np.random.Generator | None = None,
                     pvalue_add_one: bool = False) -> TestOutcome:
    S_P_te, S_Q_te = _as_samples(S_P_te), _as_samples(S_Q_te)
    m = S_P_te.shape[0]
    if S_Q_te.shape[0] != m or m < 2:
        raise ValueError("test splits must have equal sizes >= 2")
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    K = kernel.gram(np.vstack([S_P_te, S_Q_te]))
    ident = np.arange(2 * m)
    est = float(_assignment_stats(K, ident[None, :m], ident[None, m:])[0])
    perms = np.stack([rng.permutation(2 * m) for _ in range(n_perm)])
    permuted = _assignment_stats(K, perms[:, :m], perms[:, m:])
    count = int(np.sum(permuted >= est))
    p = (count + 1) / (n_perm + 1) if pvalue_add_one else count / n_perm
    return TestOutcome(est, permuted, p, bool(p <= alpha), alpha)


class RejectionRate(NamedTuple):
    rate: float
    std_err: float
    n_trials: int


Sampler = Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]]
Procedure = Callable[[np.ndarray, np.ndarray, np.random.Generator], "TestOutcome | bool"]


def rejection_rate(test_procedure: Procedure, sampler: Sampler, n_trials: int,
                   seed: int = 0) -> RejectionRate:
    """Fraction of fresh sample draws on which ``test_procedure`` rejects.

    Trial ``t`` draws data and permutations from its own stream, so the
    result does not depend on trial execution order.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    hits = 0
    for t in range(n_trials):
        data_rng = stream(seed, "trial-data", t)
        test_rng = stream(seed, "trial-test", t)
        S_P, S_Q = sampler(data_rng)
        out = test_procedure(S_P, S_Q, test_rng)
        hits += bool(out.reject if isinstance(out, TestOutcome) else out)
    rate = hits / n_trials
    return RejectionRate(rate, float(np.sqrt(rate * (1 - rate) / n_trials)), n_trials)
