"""Exact GP regression with an SE kernel.

Serves as the reference for the sparse model and as the hyperparameter
fitting engine (type-II maximum likelihood).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from residual_nmpc.errors import DataError, SingularKernelError, SolverError
from residual_nmpc.gp.kernels import KernelHyperparams, as_inputs, se_gram, sq_dist

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
JITTER_REL = 1e-10
JITTER_DOUBLINGS = 6
# log-space box for hyperparameter search
LOG_BOUNDS = (-12.0, 8.0)


@dataclass(frozen=True)
class GpDataset:
    """Training inputs and centered targets.

    ``y`` holds the centered targets; ``y_mean`` is added back at prediction.
    """

    X: NDArray[np.float64]
    y: NDArray[np.float64]
    y_mean: float = 0.0

    @classmethod
    def from_raw(cls, X, y, center: bool = True) -> GpDataset:
        X = as_inputs(X)
        y = np.asarray(y, dtype=float).ravel()
        if X.shape[0] != y.shape[0] or y.shape[0] < 1:
            raise DataError(f"need matching non-empty X and y, got {X.shape[0]} and {y.shape[0]}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("dataset contains non-finite values")
        mean = float(y.mean()) if center else 0.0
        return cls(X=X, y=y - mean, y_mean=mean)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def subsample(self, k: int, rng: np.random.Generator) -> GpDataset:
        if k >= self.n:
            return self
        idx = np.sort(rng.choice(self.n, size=k, replace=False))
        return GpDataset(X=self.X[idx], y=self.y[idx], y_mean=self.y_mean)


def jittered_cholesky(K: NDArray, base: float, what: str = "kernel matrix") -> tuple[NDArray, float]:
    """Lower Cholesky factor of ``K + jitter I``.

    The first attempt adds ``base``; each failure doubles it, up to
    ``JITTER_DOUBLINGS`` times. Returns the factor and the jitter used.
    """
    jitter = base
    n = K.shape[0]
    for _ in range(JITTER_DOUBLINGS + 1):
        try:
            L = cholesky(K + jitter * np.eye(n), lower=True, check_finite=False)
            if np.all(np.isfinite(L)):
                return L, jitter
        except np.linalg.LinAlgError:
            pass
        jitter *= 2.0
    raise SingularKernelError(f"{what} is not positive definite even with jitter {jitter / 2:.3g}")


@dataclass
class ExactGpModel:
    data: GpDataset
    hyp: KernelHyperparams
    chol: NDArray[np.float64] = field(repr=False)
    alpha_vec: NDArray[np.float64] = field(repr=False)

    def predict(self, x_star) -> tuple[NDArray, NDArray]:
        return predict(self, x_star)

    def log_marginal_likelihood(self) -> float:
        return log_marginal_likelihood(self)

    def to_dict(self) -> dict:
        return {
            "kind": "exact_gp",
            "hyp": self.hyp.to_dict(),
            "X": self.data.X.tolist(),
            "y": self.data.y.tolist(),
            "y_mean": self.data.y_mean,
            "alpha": self.alpha_vec.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExactGpModel:
        if d.get("kind") != "exact_gp":
            raise DataError(f"not an exact GP document (kind={d.get('kind')!r})")
        data = GpDataset(X=as_inputs(d["X"]), y=np.asarray(d["y"], float), y_mean=float(d["y_mean"]))
        model = fit(data, KernelHyperparams.from_dict(d["hyp"]))
        model.alpha_vec = np.asarray(d["alpha"], dtype=float)
        return model


def _fit_cholesky(K, hyp):
    try:
        L = cholesky(K, lower=True, check_finite=False)
        if np.all(np.isfinite(L)):
            return L
    except np.linalg.LinAlgError:
        pass
    if hyp.sigma_n == 0.0:
        # noiseless and not PD: genuinely rank deficient, jitter would only mask it
        raise SingularKernelError("kernel matrix is rank deficient (repeated inputs without observation noise)")
    L, _ = jittered_cholesky(K, JITTER_REL * hyp.sigma_f**2)
    return L


def fit(data: GpDataset, hyp: KernelHyperparams) -> ExactGpModel:
    """Factor ``K + sigma_n^2 I`` and cache the weight vector."""
    K = se_gram(data.X, data.X, hyp)
    K[np.diag_indices_from(K)] += hyp.sigma_n**2
    L = _fit_cholesky(K, hyp)
    alpha = cho_solve((L, True), data.y, check_finite=False)
    return ExactGpModel(data=data, hyp=hyp, chol=L, alpha_vec=alpha)


def predict(model: ExactGpModel, x_star) -> tuple[NDArray, NDArray]:
    """Posterior mean and latent variance at ``x_star``."""
    Xs = as_inputs(x_star)
    Ks = se_gram(Xs, model.data.X, model.hyp)
    mean = Ks @ model.alpha_vec + model.data.y_mean
    V = solve_triangular(model.chol, Ks.T, lower=True, check_finite=False)
    var = model.hyp.sigma_f**2 - np.sum(V * V, axis=0)
    return mean, np.maximum(var, 0.0)


def log_marginal_likelihood(model: ExactGpModel) -> float:
    y = model.data.y
    n = y.shape[0]
    return float(-0.5 * y @ model.alpha_vec - np.sum(np.log(np.diag(model.chol))) - 0.5 * n * LOG_2PI)


def lml_and_gradient(data: GpDataset, theta) -> tuple[float, NDArray]:
    """Log marginal likelihood and its gradient w.r.t. ``log(sigma_f, l, sigma_n)``."""
    hyp = KernelHyperparams.from_log(theta)
    r2 = sq_dist(data.X, data.X)
    K0 = hyp.sigma_f**2 * np.exp(-0.5 * r2 / hyp.length_scale**2)
    K = K0.copy()
    K[np.diag_indices_from(K)] += hyp.sigma_n**2
    L = _fit_cholesky(K, hyp)
    a = cho_solve((L, True), data.y, check_finite=False)
    n = data.n
    lml = -0.5 * data.y @ a - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI
    Kinv = cho_solve((L, True), np.eye(n), check_finite=False)
    W = np.outer(a, a) - Kinv
    grad = np.array(
        [
            np.sum(W * K0),  # 0.5 * tr(W * 2 K0)
            0.5 * np.sum(W * K0 * r2) / hyp.length_scale**2,
            hyp.sigma_n**2 * np.trace(W),
        ]
    )
    return float(lml), grad


def optimize_hyperparams(
    data: GpDataset,
    init: KernelHyperparams,
    max_iter: int = 500,
    gtol: float = 1e-5,
) -> KernelHyperparams:
    """Maximize the log marginal likelihood over log-hyperparameters.

    Quasi-Newton (L-BFGS-B) ascent; returns the best iterate seen, or ``init``
    unchanged when its gradient is already below ``gtol``.
    """
    if data.n < 3:
        raise DataError(f"hyperparameter fitting needs n >= 3, got {data.n}")
    best = {"f": -np.inf, "theta": init.log_params}
    trace: list[tuple[list[float], float]] = []

    def objective(theta):
        try:
            f, g = lml_and_gradient(data, theta)
        except SingularKernelError:
            return np.inf, np.zeros_like(theta)
        trace.append((theta.tolist(), f))
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise SolverError(f"non-finite marginal likelihood at log-params {theta}; recent iterates {trace[-5:]}")
        if f > best["f"]:
            best.update(f=f, theta=theta.copy())
        return -f, -g

    _, g0 = objective(init.log_params.copy())
    if np.max(np.abs(g0)) < gtol:
        return init
    minimize(
        objective,
        init.log_params,
        jac=True,
        method="L-BFGS-B",
        bounds=[LOG_BOUNDS] * 3,
        options={"maxiter": max_iter, "gtol": gtol},
    )
    hyp = KernelHyperparams.from_log(best["theta"])
    log.debug("exact GP hyperparameters %s (lml=%.6g, %d evaluations)", hyp, best["f"], len(trace))
    return hyp
