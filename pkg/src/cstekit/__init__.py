"""Covariate-specific treatment effect estimation.

Calibrated propensity scores and weighted-likelihood outcome regressions
composed into AIPW influence values, projected onto basis functions of the
conditioning covariates, with sandwich confidence intervals; plus penalized
maximum-likelihood and kernel competitors and a Monte Carlo lab.
"""

__version__ = "0.1.0"

from . import cste, design, kernels, nuisance, optim, simlab  # noqa: E402
from .dataset import Dataset

__all__ = ["Dataset", "cste", "design", "kernels", "nuisance", "optim", "simlab", "__version__"]
