"""Continuous piecewise affine regression problems.

Model psi(x) = max_i(a_i.x + alpha_i) - max_j(b_j.x + beta_j), fitted by
least squares (or quantile loss) through the MM solver.  Includes the OLS
baseline, two synthetic data generators, value-based model comparison, and
starting-point samplers.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .funcs import CompositeProblem, DcRegularizer, MonotoneSplit


@dataclass(frozen=True)
class PWAModel:
    A: np.ndarray       # (k1, d)
    alpha: np.ndarray   # (k1,)
    B: np.ndarray       # (k2, d); k2 may be 0
    beta: np.ndarray    # (k2,)

    def __post_init__(self):
        object.__setattr__(self, "A", np.atleast_2d(np.asarray(self.A, dtype=float)))
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float).ravel())
        B = np.asarray(self.B, dtype=float)
        if B.size == 0:
            B = np.zeros((0, self.A.shape[1]))
        object.__setattr__(self, "B", np.atleast_2d(B) if B.size else B)
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def k1(self) -> int:
        return self.A.shape[0]

    @property
    def k2(self) -> int:
        return self.B.shape[0]

    def eval(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        g = (X @ self.A.T + self.alpha).max(axis=1)
        if self.k2 == 0:
            return g
        return g - (X @ self.B.T + self.beta).max(axis=1)

    def flatten(self) -> np.ndarray:
        """theta layout: per atom (weights then intercept), g atoms then h."""
        parts = []
        for i in range(self.k1):
            parts.append(self.A[i])
            parts.append([self.alpha[i]])
        for j in range(self.k2):
            parts.append(self.B[j])
            parts.append([self.beta[j]])
        return np.concatenate([np.ravel(p) for p in parts])

    @classmethod
    def unflatten(cls, theta, k1: int, k2: int, d: int) -> "PWAModel":
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != (k1 + k2) * (d + 1):
            raise ValueError("theta length does not match (k1 + k2)(d + 1)")
        blocks = theta.reshape(k1 + k2, d + 1)
        A, alpha = blocks[:k1, :d], blocks[:k1, d]
        B, beta = blocks[k1:, :d], blocks[k1:, d]
        return cls(A=A, alpha=alpha, B=B, beta=beta)

    def to_json(self) -> dict:
        return {"k1": self.k1, "k2": self.k2, "A": self.A.tolist(),
                "alpha": self.alpha.tolist(), "B": self.B.tolist(),
                "beta": self.beta.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "PWAModel":
        return cls(A=np.array(obj["A"], dtype=float),
                   alpha=np.array(obj["alpha"], dtype=float),
                   B=np.array(obj["B"], dtype=float).reshape(obj["k2"], -1)
                   if obj["k2"] else np.zeros((0, len(obj["A"][0]))),
                   beta=np.array(obj["beta"], dtype=float))


def pwa_eval(model: PWAModel, x) -> float:
    x = np.asarray(x, dtype=float)
    return float(model.eval(x[None, :])[0])


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "X", np.atleast_2d(np.asarray(self.X, dtype=float)))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).ravel())
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite entries")
        if self.X.shape[0] != self.y.size or self.y.size < 1:
            raise ValueError("feature/response shape mismatch")

    @property
    def N(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def save_csv(self, path, header: bool = True):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if header:
                w.writerow([f"x{i + 1}" for i in range(self.d)] + ["y"])
            for row, yv in zip(self.X, self.y):
                w.writerow([repr(float(v)) for v in row] + [repr(float(yv))])

    @classmethod
    def load_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"empty dataset file {path}")
        try:
            [float(v) for v in rows[0]]
        except ValueError:
            rows = rows[1:]
        data = np.array([[float(v) for v in row] for row in rows if row])
        if data.shape[1] < 2:
            raise ValueError("dataset needs at least one feature column and a response")
        return cls(X=data[:, :-1], y=data[:, -1])


@dataclass
class PWAProblem:
    dataset: Dataset
    k1: int
    k2: int
    loss: str = "squared"           # squared | quantile
    tau: float | None = None
    gamma: float = 0.0
    reg_smooth: str = "none"        # none | scad
    reg_weights: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 0:
            raise ValueError("need k1 >= 1 and k2 >= 0")

    @property
    def m(self) -> int:
        return (self.k1 + self.k2) * (self.dataset.d + 1)

    def model(self, theta) -> PWAModel:
        return PWAModel.unflatten(theta, self.k1, self.k2, self.dataset.d)


def assemble(problem: PWAProblem) -> CompositeProblem:
    """Stacked composite objective data for the MM/Newton solvers.

    Each atom occupies one (d+1)-block of theta; the per-sample gradient of
    atom i is the sample's [x, 1] placed in block i.  An empty second max
    (k2 = 0) becomes a single all-zero atom outside theta.
    """
    ds, k1, k2, d = problem.dataset, problem.k1, problem.k2, problem.dataset.d
    N, m = ds.N, problem.m
    X1 = np.hstack([ds.X, np.ones((N, 1))])         # (N, d+1)

    U = np.zeros((N * k1, m))
    for i in range(k1):
        U[i::k1, i * (d + 1):(i + 1) * (d + 1)] = X1
    k2_eff = max(k2, 1)
    W = np.zeros((N * k2_eff, m))
    for j in range(k2):
        W[j::k2, (k1 + j) * (d + 1):(k1 + j + 1) * (d + 1)] = X1

    split = MonotoneSplit(problem.loss, y=ds.y, tau=problem.tau)
    reg = None
    if problem.gamma > 0:
        wts = problem.reg_weights
        if wts is None:
            wts = np.ones(m)
        reg = DcRegularizer(weights=wts, gamma=problem.gamma, smooth=problem.reg_smooth)
    return CompositeProblem(U=U, e=np.zeros(N * k1), W=W, f=np.zeros(N * k2_eff),
                            split=split, n_samples=N, weight=1.0 / N, reg=reg,
                            lower=problem.lower, upper=problem.upper)


def ols_fit(dataset: Dataset):
    """Least-squares affine fit.  Returns (weights, intercept, rank_deficient)."""
    A = np.hstack([dataset.X, np.ones((dataset.N, 1))])
    coef, _, rank, _ = np.linalg.lstsq(A, dataset.y, rcond=None)
    deficient = rank < A.shape[1]
    if deficient:
        G = A.T @ A + 1e-8 * np.eye(A.shape[1])
        coef = np.linalg.solve(G, A.T @ dataset.y)
    return coef[:-1], float(coef[-1]), deficient


EXAMPLE1_MODEL = PWAModel(A=np.array([[1.0, 1.0], [1.0, -1.0], [-2.0, 1.0], [-2.0, -1.0]]),
                          alpha=np.zeros(4), B=np.zeros((0, 2)), beta=np.zeros(0))

EXAMPLE2_MODEL = PWAModel(A=np.array([[1.0, -2.0], [-2.0, 1.0]]), alpha=np.array([0.0, 1.0]),
                          B=np.array([[3.0, -2.0], [2.0, 5.0]]), beta=np.zeros(2))


def _synth(model: PWAModel, N: int, seed: int):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(N, model.d))
    noise = rng.uniform(-0.5, 0.5, size=N)
    return Dataset(X=X, y=model.eval(X) + noise), model


def synth_example1(N: int, seed: int = 0):
    """Convex truth: y = max{x1+x2, x1-x2, -2x1+x2, -2x1-x2} + U(-.5,.5)."""
    return _synth(EXAMPLE1_MODEL, N, seed)


def synth_example2(N: int, seed: int = 0):
    """Nonconvex truth: max{x1-2x2, -2x1+x2+1} - max{3x1-2x2, 2x1+5x2} + noise."""
    return _synth(EXAMPLE2_MODEL, N, seed)


def model_rmse(model_a: PWAModel, model_b: PWAModel, grid: int = 101) -> float:
    """Root-mean-square gap between the two surfaces on [-1,1]^d."""
    d = model_a.d
    if d != model_b.d:
        raise ValueError("models have different input dimensions")
    if d <= 2:
        axes = [np.linspace(-1.0, 1.0, grid)] * d
        mesh = np.meshgrid(*axes, indexing="ij")
        P = np.stack([m.ravel() for m in mesh], axis=1)
    else:
        # low-discrepancy points for higher dimension
        from scipy.stats import qmc
        P = qmc.Sobol(d, scramble=False, seed=0).random(1024) * 2.0 - 1.0
    diff = model_a.eval(P) - model_b.eval(P)
    return float(np.sqrt(np.mean(diff ** 2)))


def init_sampler(problem: PWAProblem, strategy: str, rng: np.random.Generator,
                 scale: float = 1.0) -> np.ndarray:
    """Starting point draw: gaussian noise, or OLS seed in the first g atom."""
    m = problem.m
    if strategy == "gaussian":
        return rng.normal(size=m) * scale
    if strategy == "ols-perturb":
        w, b, _ = ols_fit(problem.dataset)
        theta = rng.normal(size=m) * scale
        d = problem.dataset.d
        theta[:d] += w
        theta[d] += b
        return theta
    raise ValueError(f"unknown init strategy {strategy!r}")
