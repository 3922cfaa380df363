"""Squared-exponential kernel and hyperparameter container."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from residual_nmpc.errors import DomainError


@dataclass(frozen=True)
class KernelHyperparams:
    """SE kernel hyperparameters; optimizers work on their logarithms."""

    sigma_f: float = 1.0
    length_scale: float = 1.0
    sigma_n: float = 0.1

    def __post_init__(self):
        vals = (self.sigma_f, self.length_scale, self.sigma_n)
        # sigma_n = 0 is allowed for noiseless interpolation; log-space fitting never reaches it
        if not (all(np.isfinite(vals)) and self.sigma_f > 0 and self.length_scale > 0 and self.sigma_n >= 0):
            raise DomainError(f"invalid hyperparameters {self}")

    @property
    def log_params(self) -> NDArray[np.float64]:
        return np.log([self.sigma_f, self.length_scale, self.sigma_n])

    @classmethod
    def from_log(cls, theta) -> KernelHyperparams:
        sf, ell, sn = np.exp(np.asarray(theta, dtype=float))
        return cls(float(sf), float(ell), float(sn))

    def to_dict(self) -> dict:
        return {"sigma_f": self.sigma_f, "length_scale": self.length_scale, "sigma_n": self.sigma_n}

    @classmethod
    def from_dict(cls, d: dict) -> KernelHyperparams:
        return cls(float(d["sigma_f"]), float(d["length_scale"]), float(d["sigma_n"]))


def as_inputs(X) -> NDArray[np.float64]:
    """Coerce inputs to a 2-D ``(n, d)`` array; 1-D arrays are n scalar points."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X[:, None]
    return X


def sq_dist(X1, X2) -> NDArray[np.float64]:
    X1, X2 = as_inputs(X1), as_inputs(X2)
    if X1.shape[1] == 1:
        d = X1[:, 0][:, None] - X2[:, 0][None, :]
        return d * d
    d2 = (X1 * X1).sum(1)[:, None] + (X2 * X2).sum(1)[None, :] - 2.0 * X1 @ X2.T
    return np.maximum(d2, 0.0)


def se_kernel(x1, x2, hyp: KernelHyperparams) -> float:
    """Covariance between two single inputs. No noise term: that belongs on the Gram diagonal."""
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    r2 = float(np.sum((x1 - x2) ** 2))
    return hyp.sigma_f**2 * np.exp(-0.5 * r2 / hyp.length_scale**2)


def se_gram(X1, X2, hyp: KernelHyperparams) -> NDArray[np.float64]:
    return hyp.sigma_f**2 * np.exp(-0.5 * sq_dist(X1, X2) / hyp.length_scale**2)
