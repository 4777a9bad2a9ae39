"""Gaussian, deep, and mixture kernels with Gram construction on the tape.

Every kernel exposes its trainable parameters as one flat ``ParamVector`` and
builds Gram matrices from a flat parameter ``Var`` so learners can
differentiate (and meta-differentiate) through any of them uniformly.

Bandwidth convention, used everywhere: ``k(x, y) = exp(-|x - y|^2 / (2 l^2))``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffengine as ad
from .diffengine import ParamVector, Var

CHECKPOINT_VERSION = 1


def _as_samples(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError(f"expected a non-empty 2-D sample matrix, got shape {X.shape}")
    return X


def _gaussian_from_sqdist(d2: Var, log_ls: Var) -> Var:
    # exp(-d2 / (2 exp(2 log_ls)))
    return ad.exp(ad.neg(ad.div(d2, ad.mul(2.0, ad.exp(ad.mul(2.0, log_ls))))))


class Kernel:
    """Common surface; subclasses define ``param_vector``, ``with_values`` and ``gram_var``."""

    family: str = "abstract"
    input_dim: int | None = None

    def param_vector(self) -> ParamVector:
        raise NotImplementedError

    def with_values(self, values: np.ndarray) -> "Kernel":
        raise NotImplementedError

    def gram_var(self, theta: Var, X: np.ndarray, Y: np.ndarray | None = None) -> Var:
        raise NotImplementedError

    def _check_dim(self, X: np.ndarray) -> None:
        if self.input_dim is not None and X.shape[1] != self.input_dim:
            raise ValueError(f"kernel expects dimension {self.input_dim}, got {X.shape[1]}")

    def gram(self, X, Y=None) -> np.ndarray:
        X = _as_samples(X)
        Y = X if Y is None else _as_samples(Y)
        if X.shape[1] != Y.shape[1]:
            raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
        with ad.no_grad():
            return self.gram_var(Var(self.param_vector().values), X, Y).value

    def eval(self, x, y) -> float:
        x = np.asarray(x, dtype=np.float64).ravel()
        y = np.asarray(y, dtype=np.float64).ravel()
        if x.shape != y.shape:
            raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
        return float(self.gram(x[None, :], y[None, :])[0, 0])

    def to_dict(self) -> dict:
        pv = self.param_vector()
        return {
            "version": CHECKPOINT_VERSION,
            "family": self.family,
            "layout": [[name, list(shape)] for name, shape in pv.layout],
            "params": pv.values.tolist(),
            "config": self._config(),
        }

    def _config(self) -> dict:
        return {}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


@dataclass(frozen=True)
class GaussianKernel(Kernel):
    log_lengthscale: float = 0.0
    input_dim: int | None = None
    family = "gaussian"

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale))

    @classmethod
    def from_lengthscale(cls, ls: float, input_dim: int | None = None) -> "GaussianKernel":
        if ls <= 0:
            raise ValueError("lengthscale must be positive")
        return cls(float(np.log(ls)), input_dim)

    def param_vector(self) -> ParamVector:
        return ParamVector(np.array([self.log_lengthscale]), [("log_lengthscale", (1,))])

    def with_values(self, values) -> "GaussianKernel":
        return GaussianKernel(float(np.asarray(values, dtype=np.float64).ravel()[0]), self.input_dim)

    def gram_var(self, theta, X, Y=None):
        X = _as_samples(X)
        Y = X if Y is None else _as_samples(Y)
        self._check_dim(X)
        theta = ad.constant(theta)
        return _gaussian_from_sqdist(ad.sqdist(X, Y), ad.getitem(theta, 0))

    def _config(self):
        return {"input_dim": self.input_dim}


def median_heuristic(X, Y=None) -> float:
    """Median pairwise distance of the pooled sample (a common bandwidth default)."""
    Z = _as_samples(X) if Y is None else np.vstack([_as_samples(X), _as_samples(Y)])
    d2 = ad.sqdist(Z, Z).value
    med = float(np.sqrt(np.median(d2[np.triu_indices_from(d2, k=1)])))
    return med if med > 0 else 1.0


def mlp_layout(layer_sizes: Sequence[int]) -> list[tuple[str, tuple[int, ...]]]:
    layout = []
    for i, (a, b) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        layout += [(f"W{i}", (a, b)), (f"b{i}", (b,))]
    return layout


@dataclass(frozen=True, eq=False)
class DeepKernel(Kernel):
    """``[(1 - eps) kappa(phi(x), phi(y)) + eps] q(x, y)`` with an MLP feature map ``phi``.

    ``kappa`` and ``q`` are Gaussians with their own lengthscales and
    ``eps = sigmoid(eps_logit)`` stays in (0, 1). Hidden layers use softplus;
    the output layer is linear.
    """

    layer_sizes: tuple[int, ...]
    values: np.ndarray = field(repr=False)
    family = "deep"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        vals = np.array(self.values, dtype=np.float64).ravel()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        ParamVector(vals, self.layout())  # validates sizes and finiteness

    @property
    def input_dim(self) -> int:  # type: ignore[override]
        return self.layer_sizes[0]

    def layout(self):
        return mlp_layout(self.layer_sizes) + [
            ("kappa_log_lengthscale", (1,)),
            ("q_log_lengthscale", (1,)),
            ("eps_logit", (1,)),
        ]

    @classmethod
    def init(cls, input_dim: int, rng: np.random.Generator, *, width: int | None = None,
             n_layers: int = 5, kappa_lengthscale: float = 1.0, q_lengthscale: float = 1.0,
             eps: float = 0.1) -> "DeepKernel":
        width = 3 * input_dim if width is None else width
        sizes = (input_dim,) + (width,) * n_layers
        parts = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(a)
            parts.append(rng.uniform(-bound, bound, size=a * b))
            parts.append(rng.uniform(-bound, bound, size=b))
        parts.append([np.log(kappa_lengthscale), np.log(q_lengthscale),
                      np.log(eps) - np.log1p(-eps)])
        return cls(sizes, np.concatenate([np.ravel(p) for p in parts]))

    def param_vector(self) -> ParamVector:
        return ParamVector(self.values.copy(), self.layout())

    def with_values(self, values) -> "DeepKernel":
        return DeepKernel(self.layer_sizes, values)

    @property
    def eps(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.param_vector().segment("eps_logit")[0])))

    def features(self, theta: Var, X: np.ndarray) -> Var:
        seg = self.param_vector().unflatten(theta)
        h = ad.constant(X)
        n = len(self.layer_sizes) - 1
        for i in range(n):
            h = ad.add(ad.matmul(h, seg[f"W{i}"]), seg[f"b{i}"])
            if i < n - 1:
                h = ad.softplus(h)
        return h

    def gram_var(self, theta, X, Y=None):
        X = _as_samples(X)
        same = Y is None or Y is X
        Y = X if same else _as_samples(Y)
        self._check_dim(X)
        self._check_dim(Y)
        theta = ad.constant(theta)
        seg = self.param_vector().unflatten(theta)
        fx = self.features(theta, X)
        fy = fx if same else self.features(theta, Y)
        kappa = _gaussian_from_sqdist(ad.sqdist(fx, fy), ad.reshape(seg["kappa_log_lengthscale"], ()))
        q = _gaussian_from_sqdist(ad.sqdist(X, Y), ad.reshape(seg["q_log_lengthscale"], ()))
        eps = ad.sigmoid(ad.reshape(seg["eps_logit"], ()))
        return ad.mul(ad.add(ad.mul(ad.sub(1.0, eps), kappa), eps), q)

    def _config(self):
        return {"layer_sizes": list(self.layer_sizes)}


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def mixture_gram_cached(base_grams: Sequence, beta_logits) -> Var:
    """Sum of ``softmax(beta_logits)[i] * base_grams[i]``; differentiable in the logits."""
    if len(base_grams) == 0:
        raise ValueError("need at least one base Gram")
    shapes = {np.shape(g.value if isinstance(g, Var) else g) for g in base_grams}
    if len(shapes) != 1:
        raise ValueError(f"base Grams differ in shape: {sorted(shapes)}")
    logits = ad.constant(beta_logits)
    if logits.shape != (len(base_grams),):
        raise ValueError("one logit per base Gram required")
    beta = ad.softmax(logits)
    return ad.tree_sum(ad.mul(ad.getitem(beta, i), g) for i, g in enumerate(base_grams))


@dataclass(frozen=True, eq=False)
class MixtureKernel(Kernel):
    """Convex combination of fixed base kernels; only the weight logits are trainable."""

    bases: tuple[Kernel, ...]
    beta_logits: np.ndarray
    family = "mixture"

    def __post_init__(self):
        object.__setattr__(self, "bases", tuple(self.bases))
        logits = np.array(self.beta_logits, dtype=np.float64).ravel()
        if not self.bases:
            raise ValueError("mixture needs at least one base kernel")
        if logits.size != len(self.bases):
            raise ValueError("one logit per base kernel required")
        logits.setflags(write=False)
        object.__setattr__(self, "beta_logits", logits)

    @classmethod
    def uniform(cls, bases: Sequence[Kernel]) -> "MixtureKernel":
        return cls(tuple(bases), np.zeros(len(bases)))

    @property
    def input_dim(self) -> int | None:  # type: ignore[override]
        return self.bases[0].input_dim

    @property
    def beta(self) -> np.ndarray:
        return softmax_np(self.beta_logits)

    def param_vector(self) -> ParamVector:
        return ParamVector(self.beta_logits.copy(), [("beta_logits", (len(self.bases),))])

    def with_values(self, values) -> "MixtureKernel":
        return MixtureKernel(self.bases, values)

    def gram_var(self, theta, X, Y=None):
        X = _as_samples(X)
        Y = X if Y is None else _as_samples(Y)
        return mixture_gram_cached([b.gram(X, Y) for b in self.bases], theta)

    def _config(self):
        return {"n_bases": len(self.bases), "bases": [b.to_dict() for b in self.bases]}


def kernel_from_dict(doc: dict) -> Kernel:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported kernel checkpoint version {doc.get('version')!r}")
    family, params, cfg = doc["family"], np.asarray(doc["params"], dtype=np.float64), doc.get("config", {})
    layout = [(name, tuple(shape)) for name, shape in doc["layout"]]
    ParamVector(params, layout)
    if family == "gaussian":
        return GaussianKernel(float(params[0]), cfg.get("input_dim"))
    if family == "deep":
        k = DeepKernel(tuple(cfg["layer_sizes"]), params)
        if k.layout() != layout:
            raise ValueError("deep kernel checkpoint layout does not match its layer sizes")
        return k
    if family == "mixture":
        bases = tuple(kernel_from_dict(b) for b in cfg["bases"])
        return MixtureKernel(bases, params)
    raise ValueError(f"unknown kernel family {family!r}")


def load_kernel(path: str | Path) -> Kernel:
    return kernel_from_dict(json.loads(Path(path).read_text()))
