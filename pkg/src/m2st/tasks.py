"""Synthetic HDGM tasks, closeness-parameterized task families, and CSV ingestion."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .seeding import child_seed, stream

BANK_VERSION = 1
TARGET_DELTA = 0.7


@dataclass(frozen=True)
class HDGMSpec:
    """Two-component 2-D Gaussian mixture; Q(delta) tilts each component's covariance.

    ``stratified`` draws exactly ``m_per_mode`` rows per component; otherwise
    ``2 * m_per_mode`` i.i.d. mixture draws with binomial component counts.
    """

    delta: float = 0.0
    m_per_mode: int = 50
    stratified: bool = True
    d: int = 2

    def __post_init__(self):
        if not abs(self.delta) < 1:
            raise ValueError(f"|delta| must be < 1 for positive-definite covariances, got {self.delta}")
        if self.m_per_mode < 1:
            raise ValueError("m_per_mode must be positive")
        if self.d != 2:
            raise ValueError("only d = 2 is supported")


MEANS = (np.zeros(2), np.full(2, 0.5))


def component_covariances(delta: float, which: str) -> tuple[np.ndarray, np.ndarray]:
    if which == "P":
        return np.eye(2), np.eye(2)
    if which == "Q":
        return (np.array([[1.0, -delta], [-delta, 1.0]]),
                np.array([[1.0, delta], [delta, 1.0]]))
    raise ValueError(f"which must be 'P' or 'Q', got {which!r}")


def hdgm_components(spec: HDGMSpec, which: str, rng: np.random.Generator) -> list[np.ndarray]:
    """Per-component draws (Cholesky factor of each stated covariance), in component order."""
    covs = component_covariances(spec.delta, which)
    n = spec.m_per_mode
    counts = (n, n) if spec.stratified else tuple(np.bincount(rng.integers(0, 2, 2 * n), minlength=2))
    return [mean + rng.standard_normal((int(c), 2)) @ np.linalg.cholesky(cov).T
            for mean, cov, c in zip(MEANS, covs, counts)]


def hdgm_sample(spec: HDGMSpec, which: str, rng: np.random.Generator) -> np.ndarray:
    """Draw ``2 * m_per_mode`` rows from P or Q(delta), rows in random order."""
    rows = np.vstack(hdgm_components(spec, which, rng))
    return rows[rng.permutation(rows.shape[0])]


def hdgm_pair(delta: float, m_per_mode: int, rng: np.random.Generator,
              stratified: bool = True) -> tuple[np.ndarray, np.ndarray]:
    spec = HDGMSpec(delta, m_per_mode, stratified)
    return hdgm_sample(spec, "P", rng), hdgm_sample(spec, "Q", rng)


@dataclass(frozen=True)
class TaskFamilySpec:
    """Tasks (P, Q((0.6 - C) + 0.1 i / N)) for i = 1..N; C = 0.3 gives deltas in (0.3, 0.4]."""

    N: int = 100
    C: float = 0.3
    n_i: int = 100
    stratified: bool = True

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.C < 0:
            raise ValueError("closeness C must be >= 0")
        if self.n_i < 2 or (self.stratified and self.n_i % 2):
            raise ValueError("n_i must be >= 2 (and even when stratified)")
        if max(self.deltas()) >= 1:
            raise ValueError(f"family reaches delta {max(self.deltas()):.3f} >= 1")

    def delta(self, i: int) -> float:
        return (0.6 - self.C) + 0.1 * i / self.N

    def deltas(self) -> list[float]:
        return [self.delta(i) for i in range(1, self.N + 1)]


@dataclass
class MetaSampleBank:
    tasks: list[tuple[np.ndarray, np.ndarray]]
    deltas: list[float] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    family: dict | None = None
    seed: int | None = None

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("bank needs at least one task")
        dims = {p.shape[1] for p, q in self.tasks} | {q.shape[1] for p, q in self.tasks}
        if len(dims) != 1:
            raise ValueError(f"tasks disagree on dimension: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def dim(self) -> int:
        return self.tasks[0][0].shape[1]

    def subset(self, indices) -> "MetaSampleBank":
        idx = list(indices)
        return MetaSampleBank([self.tasks[i] for i in idx],
                              [self.deltas[i] for i in idx] if self.deltas else [],
                              [self.seeds[i] for i in idx] if self.seeds else [],
                              self.family, self.seed)

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (sp, sq) in enumerate(self.tasks):
            p_name, q_name = f"task{i + 1:04d}_P.csv", f"task{i + 1:04d}_Q.csv"
            write_csv(directory / p_name, sp)
            write_csv(directory / q_name, sq)
            entries.append({
                "index": i + 1,
                "delta": self.deltas[i] if self.deltas else None,
                "seed": self.seeds[i] if self.seeds else None,
                "p_path": p_name,
                "q_path": q_name,
            })
        manifest = {"version": BANK_VERSION, "family": self.family, "seed": self.seed, "tasks": entries}
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetaSampleBank":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        doc = json.loads(path.read_text())
        if doc.get("version") != BANK_VERSION:
            raise ValueError(f"unsupported bank manifest version {doc.get('version')!r}")
        base = path.parent
        tasks, deltas, seeds = [], [], []
        for e in doc["tasks"]:
            tasks.append((load_csv(base / e["p_path"]), load_csv(base / e["q_path"])))
            deltas.append(e.get("delta"))
            seeds.append(e.get("seed"))
        return cls(tasks, deltas if None not in deltas else [], seeds if None not in seeds else [],
                   doc.get("family"), doc.get("seed"))


def build_family(spec: TaskFamilySpec, seed: int) -> MetaSampleBank:
    """Sample every task of the family from its own derived stream."""
    tasks, seeds = [], []
    for i in range(1, spec.N + 1):
        s = child_seed(seed, "task", i)
        rng = stream(s, "hdgm")
        tasks.append(hdgm_pair(spec.delta(i), spec.n_i // 2, rng, spec.stratified))
        seeds.append(s)
    return MetaSampleBank(tasks, spec.deltas(), seeds, asdict(spec), seed)


class CSVFormatError(ValueError):
    pass


class EmptyCSVError(CSVFormatError):
    pass


class RaggedCSVError(CSVFormatError):
    pass


class NonNumericCSVError(CSVFormatError):
    pass


def load_csv(path: str | Path, header: bool = False) -> np.ndarray:
    """Read a rectangular numeric CSV into an m x d float64 matrix."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if header and rows:
        rows = rows[1:]
    if not rows:
        raise EmptyCSVError(f"{path}: no data rows")
    width = len(rows[0])
    out = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise RaggedCSVError(f"{path}: row {i + 1} has {len(row)} fields, expected {width}")
        for j, cell in enumerate(row):
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise NonNumericCSVError(f"{path}: row {i + 1}, column {j + 1}: {cell!r} is not a number") from None
    return out


def write_csv(path: str | Path, X, header: list[str] | None = None) -> None:
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(header)
        for row in X:
            w.writerow([repr(float(v)) for v in row])
