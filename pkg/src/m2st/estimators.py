"""U-statistic MMD^2, its variance estimate, and the regularized power criterion.

All functions accept numpy arrays or tape Vars and return Vars, so the same
code path serves plain evaluation and (meta-)gradient computation. Only the
equal-size case ``|S_P| = |S_Q| = m`` is supported.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as ad
from .diffengine import Var
from .kernels import Kernel, _as_samples

DEFAULT_LAMBDA = 1e-8


class DegenerateVarianceError(ZeroDivisionError):
    """The variance estimate plus regularizer is not positive."""


@dataclass(frozen=True)
class JConfig:
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")


def _paired(S_P, S_Q) -> tuple[np.ndarray, np.ndarray]:
    S_P, S_Q = _as_samples(S_P), _as_samples(S_Q)
    if S_P.shape[0] != S_Q.shape[0]:
        raise ValueError(f"unequal sample sizes {S_P.shape[0]} and {S_Q.shape[0]}")
    if S_P.shape[0] < 2:
        raise ValueError("need at least two samples per distribution")
    if S_P.shape[1] != S_Q.shape[1]:
        raise ValueError("sample dimensions differ")
    return S_P, S_Q


def pooled_gram(kernel: Kernel, S_P, S_Q, theta=None) -> Var:
    """Gram matrix of the stacked sample ``[S_P; S_Q]``."""
    S_P, S_Q = _paired(S_P, S_Q)
    theta = kernel.param_vector().values if theta is None else theta
    return kernel.gram_var(theta, np.vstack([S_P, S_Q]))


def h_from_gram(K, m: int) -> Var:
    """H_ij = k(x_i,x_j) + k(y_i,y_j) - k(x_i,y_j) - k(y_i,x_j) from a pooled Gram."""
    K = ad.constant(K)
    if K.shape != (2 * m, 2 * m):
        raise ValueError(f"pooled Gram must be {(2 * m, 2 * m)}, got {K.shape}")
    kxx = ad.getitem(K, (slice(0, m), slice(0, m)))
    kyy = ad.getitem(K, (slice(m, 2 * m), slice(m, 2 * m)))
    kxy = ad.getitem(K, (slice(0, m), slice(m, 2 * m)))
    kyx = ad.getitem(K, (slice(m, 2 * m), slice(0, m)))
    return ad.sub(ad.add(kxx, kyy), ad.add(kxy, kyx))


def h_matrix(kernel: Kernel, S_P, S_Q, theta=None) -> Var:
    S_P, S_Q = _paired(S_P, S_Q)
    return h_from_gram(pooled_gram(kernel, S_P, S_Q, theta), S_P.shape[0])


def _check_h(H: Var) -> int:
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError(f"H must be square, got {H.shape}")
    m = H.shape[0]
    if m < 2:
        raise ValueError("H needs m >= 2")
    return m


def mmd2_u(H) -> Var:
    """Unbiased MMD^2: off-diagonal mean of H. Can be negative.

    The off-diagonal sum is correctly rounded, so tiny values that arise from
    cancellation keep their relative accuracy.
    """
    H = ad.constant(H)
    m = _check_h(H)
    off = ad.fsum(ad.mul(H, 1.0 - np.eye(m)))
    return ad.div(off, float(m * (m - 1)))


def var_hat(H) -> Var:
    """(4/m^3) sum_i (sum_j H_ij)^2 - (4/m^4) (sum_ij H_ij)^2, diagonal included.

    Evaluated in the algebraically identical centered form
    (4/m^3) sum_i (r_i - mean(r))^2 with r the row sums, accumulated in extended
    precision. The result is nonnegative by construction.
    """
    H = ad.constant(H)
    m = _check_h(H)
    rows = ad.xsum(H, axis=1)
    centered = ad.sub(rows, ad.div(ad.xsum(rows), float(m)))
    return ad.mul(4.0 / m**3, ad.xsum(ad.mul(centered, centered)))


def j_from_h(H, lam: float = DEFAULT_LAMBDA) -> Var:
    H = ad.constant(H)
    v = var_hat(H)
    denom = ad.add(v, lam)
    if not float(denom.value) > 0:
        raise DegenerateVarianceError(
            f"variance estimate {float(v.value):.3g} + lambda {lam:g} is not positive")
    return ad.div(mmd2_u(H), ad.sqrt(denom))


def j_hat(kernel: Kernel, S_P, S_Q, cfg: JConfig = JConfig(), theta=None) -> Var:
    return j_from_h(h_matrix(kernel, S_P, S_Q, theta), cfg.lam)


def j_hat_value(kernel: Kernel, S_P, S_Q, cfg: JConfig = JConfig()) -> float:
    with ad.no_grad():
        return float(j_hat(kernel, S_P, S_Q, cfg).value)


def mmd2_u_value(kernel: Kernel, S_P, S_Q) -> float:
    with ad.no_grad():
        return float(mmd2_u(h_matrix(kernel, S_P, S_Q)).value)
