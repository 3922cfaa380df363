from residual_nmpc.gp.exact import (
    ExactGpModel,
    GpDataset,
    fit,
    log_marginal_likelihood,
    optimize_hyperparams,
    predict,
)
from residual_nmpc.gp.kernels import KernelHyperparams, se_gram, se_kernel
from residual_nmpc.gp.sparse import (
    ElboReport,
    SgpModel,
    SgpModelSet,
    compute_variational_params,
    elbo,
    elbo_and_gradient,
    select_inducing_points,
    sgp_predict,
    train_sgp,
)

__all__ = [
    "ElboReport",
    "ExactGpModel",
    "GpDataset",
    "KernelHyperparams",
    "SgpModel",
    "SgpModelSet",
    "compute_variational_params",
    "elbo",
    "elbo_and_gradient",
    "fit",
    "log_marginal_likelihood",
    "optimize_hyperparams",
    "predict",
    "se_gram",
    "se_kernel",
    "select_inducing_points",
    "sgp_predict",
    "train_sgp",
]
