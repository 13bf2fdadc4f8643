"""Prior-likelihood bundles."""

from ._common import Batch
from .linreg import LinearRegressionModel, linreg_closed_form
from .lmre import LmreModel, LmreState, lmre_elbo, lmre_rescale_weights
from .location import GaussianLocationModel, location_closed_form
from .logistic import LogisticRegressionModel, logistic_elbo_gradient, logistic_expected_loglik

__all__ = [
    "Batch",
    "GaussianLocationModel",
    "LinearRegressionModel",
    "LmreModel",
    "LmreState",
    "LogisticRegressionModel",
    "linreg_closed_form",
    "lmre_elbo",
    "lmre_rescale_weights",
    "location_closed_form",
    "logistic_elbo_gradient",
    "logistic_expected_loglik",
]
