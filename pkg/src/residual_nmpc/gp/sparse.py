"""Variational sparse GP regression (collapsed bound) with inducing inputs.

Training maximizes the collapsed evidence lower bound

    L(x_m) = log N(y | 0, Q_nn + s^2 I) - tr(K_nn - Q_nn) / (2 s^2),
    Q_nn = K_nm K_mm^-1 K_mn,

jointly over the inducing inputs and the log-hyperparameters. Once the
inducing set is fixed the optimal variational posterior N(mu, A) over the
inducing outputs is available in closed form::

    Sigma = (K_mm + s^-2 K_mn K_nm)^-1
    mu    = s^-2 K_mm Sigma K_mn y
    A     = K_mm Sigma K_mm
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from residual_nmpc.errors import DataError, SingularKernelError, SolverError
from residual_nmpc.gp.exact import LOG_2PI, LOG_BOUNDS, GpDataset, fit, log_marginal_likelihood
from residual_nmpc.gp.kernels import KernelHyperparams, as_inputs, se_gram, sq_dist

log = logging.getLogger(__name__)

EXACT_LML_MAX_N = 2000
DIVERGENCE_PATIENCE = 10
KMM_JITTER_BASE = 1e-15
KMM_JITTER_STEPS = 10
#: Jitter floor while optimizing: gradients go through K_mm^-1 and need a
#: conditioned matrix. The bound stays a valid (slightly looser) lower bound.
TRAIN_KMM_JITTER = 1e-6

#: Number of predictive variances clamped to zero (numerically negative).
variance_clamp_count = 0


def _check_distinct(x_m: NDArray, length_scale: float) -> None:
    d2 = sq_dist(x_m, x_m)
    d2[np.diag_indices_from(d2)] = np.inf
    i, j = np.unravel_index(np.argmin(d2), d2.shape)
    if d2[i, j] <= (1e-9 * length_scale) ** 2:
        lo, hi = sorted((int(i), int(j)))
        raise SingularKernelError(
            f"K_mm is singular: inducing inputs {lo} and {hi} coincide ({x_m[lo].tolist()})"
        )


def _kmm_factor(x_m, hyp, base: float = KMM_JITTER_BASE):
    """Cholesky of K_mm with an escalating jitter.

    K_mm enters the predictive equations through its inverse, so the jitter
    starts far below the exact-GP policy and grows tenfold per failure.
    """
    if base < TRAIN_KMM_JITTER:
        # a floor this large keeps K_mm definite even with repeated inputs
        _check_distinct(x_m, hyp.length_scale)
    Kmm = se_gram(x_m, x_m, hyp)
    eye = np.eye(Kmm.shape[0])
    for k in range(KMM_JITTER_STEPS):
        jitter = base * 10.0**k * hyp.sigma_f**2
        try:
            L = cholesky(Kmm + jitter * eye, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return Kmm, L, jitter
    raise SingularKernelError(f"K_mm is not positive definite even with jitter {jitter:.3g}")


@dataclass
class _Terms:
    Knm: NDArray
    Kmm: NDArray  # includes jitter
    L: NDArray
    A: NDArray
    LB: NDArray
    c: NDArray
    value: float


def _bound_terms(X, y, x_m, hyp, jitter_base: float = KMM_JITTER_BASE) -> _Terms:
    sn2 = hyp.sigma_n**2
    sn = hyp.sigma_n
    n = y.shape[0]
    Kmm, L, jitter = _kmm_factor(x_m, hyp, jitter_base)
    Kmm = Kmm + jitter * np.eye(Kmm.shape[0])
    Knm = se_gram(X, x_m, hyp)
    A = solve_triangular(L, Knm.T, lower=True, check_finite=False) / sn
    B = A @ A.T
    B[np.diag_indices_from(B)] += 1.0
    LB = cholesky(B, lower=True, check_finite=False)
    c = solve_triangular(LB, A @ y, lower=True, check_finite=False) / sn
    value = (
        -0.5 * n * LOG_2PI
        - n * np.log(sn)
        - np.sum(np.log(np.diag(LB)))
        - 0.5 * (y @ y) / sn2
        + 0.5 * (c @ c)
        - 0.5 * n * hyp.sigma_f**2 / sn2
        + 0.5 * np.sum(A * A)
    )
    return _Terms(Knm=Knm, Kmm=Kmm, L=L, A=A, LB=LB, c=c, value=float(value))


def elbo(data: GpDataset, hyp: KernelHyperparams, x_m) -> float:
    """Collapsed evidence lower bound for inducing inputs ``x_m``."""
    return _bound_terms(data.X, data.y, as_inputs(x_m), hyp).value


def elbo_and_gradient(X, y, x_m, theta, jitter_base: float = KMM_JITTER_BASE) -> tuple[float, NDArray, NDArray]:
    """Bound value with gradients w.r.t. inducing inputs and log-hyperparameters.

    Returns ``(value, d/dx_m with shape (m, d), d/dlog(sigma_f, l, sigma_n))``.
    ``jitter_base`` sets the first K_mm jitter tried, relative to sigma_f^2.
    """
    X = as_inputs(X)
    x_m = as_inputs(x_m)
    y = np.asarray(y, dtype=float)
    hyp = KernelHyperparams.from_log(theta)
    t = _bound_terms(X, y, x_m, hyp, jitter_base)
    n = y.shape[0]
    sn2 = hyp.sigma_n**2
    sf2 = hyp.sigma_f**2
    ell2 = hyp.length_scale**2

    sn = hyp.sigma_n
    A = t.A
    # beta = B^-1 A y / s; the bound as a function of A has gradient G_A
    beta = cho_solve((t.LB, True), A @ y, check_finite=False) / sn
    BinvA = cho_solve((t.LB, True), A, check_finite=False)
    G_A = -BinvA + np.outer(beta, y / sn - A.T @ beta) + A

    # sigma_f scales A linearly (K_mn ~ sf^2, L ~ sf); sigma_n scales it as 1/s
    tr_GA = np.sum(G_A * A)
    Atb = A.T @ beta
    d_logsf = tr_GA - n * sf2 / sn2
    d_logsn = -n + (y @ y) / sn2 - (beta @ beta + Atb @ Atb) + n * sf2 / sn2 - tr_GA

    # back through A = L^-1 K_mn / s and the Cholesky factor of K_mm
    H = solve_triangular(t.L, G_A, lower=True, trans="T", check_finite=False)
    G_nm = H.T / sn
    S = -G_A @ A.T  # L^T dF/dL
    Phi = np.tril(S)
    Phi[np.diag_indices_from(Phi)] *= 0.5
    Pm = solve_triangular(t.L, Phi, lower=True, trans="T", check_finite=False)
    Pm = solve_triangular(t.L, Pm.T, lower=True, trans="T", check_finite=False).T
    G_mm = 0.5 * (Pm + Pm.T)

    r2_nm = sq_dist(X, x_m)
    r2_mm = sq_dist(x_m, x_m)
    GK_nm = G_nm * t.Knm
    GK_mm = G_mm * t.Kmm
    # jitter on the K_mm diagonal does not depend on the length-scale
    d_logl = np.sum(GK_nm * r2_nm) / ell2 + np.sum(GK_mm * r2_mm) / ell2

    # d k(z_a, x)/d z_a = -k (z_a - x) / l^2; diagonal terms vanish (zero difference)
    dz = np.empty_like(x_m)
    for k in range(x_m.shape[1]):
        diff_nm = x_m[:, k][None, :] - X[:, k][:, None]  # (n, m): z_a - x_i
        diff_mm = x_m[:, k][:, None] - x_m[:, k][None, :]
        dz[:, k] = -(np.sum(GK_nm * diff_nm, axis=0) + 2.0 * np.sum(GK_mm * diff_mm, axis=1)) / ell2
    return t.value, dz, np.array([d_logsf, d_logl, d_logsn])


def compute_variational_params(data: GpDataset, hyp: KernelHyperparams, x_m) -> tuple[NDArray, NDArray]:
    """Closed-form optimal ``(mu, A_cov)`` of q(u) for fixed inducing inputs."""
    mu, A_cov, _ = _variational_terms(data, hyp, as_inputs(x_m))
    return mu, A_cov


def _variational_terms(data, hyp, x_m):
    t = _bound_terms(data.X, data.y, x_m, hyp)
    # With K_mm = L L^T and B = I + A A^T: Sigma = L^-T B^-1 L^-1, so
    # mu = s^-1 L B^-1 (A y) and A_cov = L B^-1 L^T.
    c = cho_solve((t.LB, True), t.A @ data.y, check_finite=False) / hyp.sigma_n
    Binv = cho_solve((t.LB, True), np.eye(t.LB.shape[0]), check_finite=False)
    Binv = 0.5 * (Binv + Binv.T)
    mu = t.L @ c
    A_cov = t.L @ Binv @ t.L.T
    A_cov = 0.5 * (A_cov + A_cov.T)
    return mu, A_cov, {"white_mean": c, "white_cov": Binv}


@dataclass
class ElboReport:
    elbo: float
    exact_lml: float | None = None
    gap: float | None = None
    iterations: int = 0
    trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.exact_lml is not None and self.gap is None:
            self.gap = self.exact_lml - self.elbo

    def to_dict(self) -> dict:
        return {
            "elbo": self.elbo,
            "exact_lml": self.exact_lml,
            "gap": self.gap,
            "iterations": self.iterations,
            "trace": list(self.trace),
        }


@dataclass
class SgpModel:
    """Finalized sparse GP for one output axis.

    ``white_mean`` and ``white_cov`` are the variational parameters expressed
    in whitened inducing coordinates (``u = L v`` with ``K_mm = L L^T``). They
    are derived from ``mu``/``A_cov`` when not supplied, but training passes
    them directly because that conversion is ill-conditioned when inducing
    inputs crowd together.
    """

    hyp: KernelHyperparams
    x_m: NDArray[np.float64]
    mu: NDArray[np.float64]
    A_cov: NDArray[np.float64]
    data_mean: float = 0.0
    delta_v: float = 1.0
    white_mean: NDArray[np.float64] | None = field(default=None, repr=False)
    white_cov: NDArray[np.float64] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.x_m = as_inputs(self.x_m)
        self.mu = np.asarray(self.mu, dtype=float).ravel()
        self.A_cov = np.asarray(self.A_cov, dtype=float)
        _, L, _ = _kmm_factor(self.x_m, self.hyp)
        self._L = L
        if self.white_mean is None:
            self.white_mean = solve_triangular(L, self.mu, lower=True, check_finite=False)
        if self.white_cov is None:
            T = solve_triangular(L, self.A_cov, lower=True, check_finite=False)
            self.white_cov = solve_triangular(L, T.T, lower=True, check_finite=False)
        self.white_mean = np.asarray(self.white_mean, dtype=float)
        self.white_cov = 0.5 * (np.asarray(self.white_cov, dtype=float) + np.asarray(self.white_cov, dtype=float).T)
        # K_mm^-1 mu, used by the NMPC hot path
        self._w_mean = solve_triangular(L, self.white_mean, lower=True, trans="T", check_finite=False)

    @property
    def m(self) -> int:
        return self.x_m.shape[0]

    def predict(self, x_star) -> tuple[NDArray, NDArray]:
        return sgp_predict(self, x_star)

    def mean_1d(self, x: NDArray) -> tuple[NDArray, NDArray]:
        """Mean and d(mean)/dx for scalar inputs."""
        z = self.x_m[:, 0]
        diff = x[:, None] - z[None, :]
        k = self.hyp.sigma_f**2 * np.exp(-0.5 * diff * diff / self.hyp.length_scale**2)
        kw = k * self._w_mean
        mean = kw.sum(axis=1) + self.data_mean
        grad = -(kw * diff).sum(axis=1) / self.hyp.length_scale**2
        return mean, grad

    def to_dict(self) -> dict:
        return {
            "kind": "sparse_gp",
            "hyp": self.hyp.to_dict(),
            "m": self.m,
            "x_m": self.x_m.tolist(),
            "mu": self.mu.tolist(),
            "A_cov": self.A_cov.tolist(),
            "data_mean": self.data_mean,
            "delta_v": self.delta_v,
            "white_mean": self.white_mean.tolist(),
            "white_cov": self.white_cov.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SgpModel:
        if d.get("kind") != "sparse_gp":
            raise DataError(f"not a sparse GP model document (kind={d.get('kind')!r})")
        return cls(
            hyp=KernelHyperparams.from_dict(d["hyp"]),
            x_m=np.asarray(d["x_m"], dtype=float),
            mu=np.asarray(d["mu"], dtype=float),
            A_cov=np.asarray(d["A_cov"], dtype=float),
            data_mean=float(d["data_mean"]),
            delta_v=float(d["delta_v"]),
            white_mean=np.asarray(d["white_mean"], dtype=float) if "white_mean" in d else None,
            white_cov=np.asarray(d["white_cov"], dtype=float) if "white_cov" in d else None,
        )

    @classmethod
    def from_training(cls, data: GpDataset, hyp: KernelHyperparams, x_m, delta_v: float = 1.0) -> SgpModel:
        x_m = as_inputs(x_m)
        mu, A_cov, white = _variational_terms(data, hyp, x_m)
        return cls(hyp=hyp, x_m=x_m, mu=mu, A_cov=A_cov, data_mean=data.y_mean, delta_v=delta_v, **white)


def sgp_predict(model: SgpModel, x_star) -> tuple[NDArray, NDArray]:
    """Approximate posterior mean and latent variance.

    var = k** - k*m K_mm^-1 km* + k*m K_mm^-1 A K_mm^-1 km*. Negative values
    from round-off are clamped to zero and counted.
    """
    global variance_clamp_count
    Xs = as_inputs(x_star)
    Ksm = se_gram(Xs, model.x_m, model.hyp)
    V = solve_triangular(model._L, Ksm.T, lower=True, check_finite=False)
    mean = V.T @ model.white_mean + model.data_mean
    var = model.hyp.sigma_f**2 - np.sum(V * V, axis=0) + np.sum(V * (model.white_cov @ V), axis=0)
    neg = var < 0.0
    if np.any(neg):
        variance_clamp_count += int(neg.sum())
        if np.min(var) < -1e-10:
            log.warning("sparse GP variance %.3g clamped to zero", float(np.min(var)))
        var = np.where(neg, 0.0, var)
    return mean, var


def select_inducing_points(data: GpDataset, m: int, bias: float = 0.0, seed: int = 0) -> NDArray:
    """Initial inducing inputs from (optionally weighted) k-means on the inputs.

    With ``bias > 0`` sample weights ``exp(-|x| / bias)`` pull centers toward
    low-velocity inputs.
    """
    from sklearn.cluster import KMeans

    X = data.X
    uniq = np.unique(X, axis=0)
    if not 1 <= m <= data.n:
        raise DataError(f"need 1 <= m <= n, got m={m}, n={data.n}")
    if m > uniq.shape[0]:
        raise DataError(f"m={m} exceeds the {uniq.shape[0]} distinct training inputs")
    if m == uniq.shape[0]:
        return uniq.copy()
    weights = np.exp(-np.linalg.norm(X, axis=1) / bias) if bias > 0 else None
    km = KMeans(n_clusters=m, n_init=4, random_state=seed).fit(X, sample_weight=weights)
    centers = km.cluster_centers_
    return _make_distinct(centers, uniq)


def _make_distinct(centers: NDArray, pool: NDArray) -> NDArray:
    scale = max(float(np.ptp(pool)), 1.0)
    keep: list[NDArray] = []
    for c in centers:
        if all(np.linalg.norm(c - k) > 1e-9 * scale for k in keep):
            keep.append(c)
    while len(keep) < centers.shape[0]:
        # farthest pool point from the current set
        d = np.min(sq_dist(pool, np.array(keep)), axis=1)
        keep.append(pool[int(np.argmax(d))])
    return np.array(keep)


def train_sgp(
    data: GpDataset,
    m: int,
    bias: float,
    hyp_init: KernelHyperparams,
    *,
    delta_v: float = 1.0,
    max_iter: int = 1000,
    gtol: float = 1e-5,
    seed: int = 0,
    optimize: bool = True,
) -> tuple[SgpModel, ElboReport]:
    """Fit inducing inputs and hyperparameters by ascending the collapsed bound.

    L-BFGS-B runs over ``[x_m, log(sigma_f, l, sigma_n)]`` with inducing inputs
    boxed to the range of the training inputs. The returned report carries the
    bound at each accepted iterate and, for ``n <= 2000``, the exact log
    marginal likelihood at the final hyperparameters.
    """
    if not 1 <= m <= data.n:
        raise DataError(f"need n >= m >= 1, got m={m}, n={data.n}")
    x0 = select_inducing_points(data, m, bias, seed=seed)
    d = data.X.shape[1]
    lo, hi = data.X.min(axis=0), data.X.max(axis=0)
    theta0 = hyp_init.log_params
    trace: list[float] = []
    cache: dict[bytes, float] = {}

    def unpack(p):
        return p[: m * d].reshape(m, d), p[m * d :]

    def objective(p):
        z, th = unpack(p)
        try:
            f, gz, gth = elbo_and_gradient(data.X, data.y, z, th, jitter_base=TRAIN_KMM_JITTER)
        except (SingularKernelError, np.linalg.LinAlgError):
            return np.inf, np.zeros_like(p)
        if not np.isfinite(f):
            return np.inf, np.zeros_like(p)
        cache[p.tobytes()] = f
        return -f, -np.concatenate([gz.ravel(), gth])

    declines = 0

    def callback(pk):
        nonlocal declines
        f = cache.get(np.asarray(pk).tobytes())
        if f is None:
            f = -objective(np.asarray(pk, dtype=float))[0]
        if trace and f < trace[-1]:
            declines += 1
            if declines >= DIVERGENCE_PATIENCE:
                raise SolverError(f"ELBO decreased over {declines} consecutive iterations; trace tail {trace[-12:]}")
        else:
            declines = 0
        trace.append(float(f))

    p0 = np.concatenate([x0.ravel(), theta0])
    f0 = -objective(p0)[0]
    if not np.isfinite(f0):
        raise SolverError("ELBO is not finite at the initial inducing set")
    trace.append(float(f0))
    p_best = p0
    if optimize:
        bounds = [(lo[k], hi[k]) for _ in range(m) for k in range(d)] + [LOG_BOUNDS] * 3
        res = minimize(
            objective,
            p0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            callback=callback,
            options={"maxiter": max_iter, "gtol": gtol},
        )
        if np.isfinite(res.fun) and -res.fun >= f0:
            p_best = res.x
    z, th = unpack(p_best)
    hyp = KernelHyperparams.from_log(th)
    try:
        model = SgpModel.from_training(data, hyp, z, delta_v)
    except SingularKernelError:
        # optimizer collapsed two inducing inputs onto each other; replace duplicates
        z = _make_distinct(z, data.X)
        model = SgpModel.from_training(data, hyp, z, delta_v)
    final = elbo(data, hyp, z)
    exact = None
    if data.n <= EXACT_LML_MAX_N:
        exact = log_marginal_likelihood(fit(data, hyp))
    report = ElboReport(elbo=final, exact_lml=exact, iterations=len(trace) - 1, trace=trace)
    return model, report


@dataclass
class SgpModelSet:
    """One sparse GP per world axis, each fed its own velocity component.

    Implements the residual-model protocol used by the dynamics module.
    """

    axes: tuple[SgpModel, SgpModel, SgpModel]
    delta_v: float
    training_hashes: frozenset[str] = frozenset()

    @property
    def m(self) -> int:
        return self.axes[0].m

    def mean(self, v: NDArray) -> NDArray:
        return self.mean_and_gradient(v)[0]

    def mean_and_gradient(self, v: NDArray) -> tuple[NDArray, NDArray]:
        v = np.asarray(v, dtype=float)
        flat = v.reshape(-1, 3)
        g = np.empty_like(flat)
        dg = np.empty_like(flat)
        for j, model in enumerate(self.axes):
            g[:, j], dg[:, j] = model.mean_1d(flat[:, j])
        return g.reshape(v.shape), dg.reshape(v.shape)

    def variance(self, v: NDArray) -> NDArray:
        flat = np.asarray(v, dtype=float).reshape(-1, 3)
        out = np.column_stack([self.axes[j].predict(flat[:, j])[1] for j in range(3)])
        return out.reshape(np.shape(v))

    def to_dict(self) -> dict:
        return {
            "kind": "sparse_gp_set",
            "delta_v": self.delta_v,
            "axes": [a.to_dict() for a in self.axes],
            "training_hashes": sorted(self.training_hashes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SgpModelSet:
        if d.get("kind") != "sparse_gp_set":
            raise DataError(f"not a sparse GP model set (kind={d.get('kind')!r})")
        axes = tuple(SgpModel.from_dict(a) for a in d["axes"])
        return cls(axes=axes, delta_v=float(d["delta_v"]), training_hashes=frozenset(d.get("training_hashes", [])))

    @classmethod
    def zero(cls, delta_v: float, hyp: KernelHyperparams | None = None) -> SgpModelSet:
        """A model that predicts exactly zero residual everywhere."""
        hyp = hyp or KernelHyperparams(1.0, 1.0, 0.1)
        ax = SgpModel(hyp=hyp, x_m=np.zeros((1, 1)), mu=np.zeros(1), A_cov=np.zeros((1, 1)), delta_v=delta_v)
        return cls(axes=(ax, ax, ax), delta_v=delta_v)


def model_digest(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()
