import numpy as np
import pytest

from bsc.config import HyperParams
from bsc.model import ModelContext
from bsc.pca import FactorPrior
from bsc.simulate import simulate_panel


class GaussianTarget:
    """Zero-mean Gaussian with covariance ``cov`` (identity by default)."""

    def __init__(self, dim, cov=None):
        self.dim = dim
        self.precision = np.eye(dim) if cov is None else np.linalg.inv(cov)

    def logp_and_grad(self, x):
        g = -self.precision @ x
        return 0.5 * float(x @ g), g

    def initial_point(self, seed):
        return np.random.default_rng(seed).uniform(-2, 2, self.dim)


SMALL_HYPER = HyperParams(
    gamma_sigma=1.0, delta_mu=0.0, delta_sd=2.0, k_mu=10.0, k_sd=5.0, gamma_kappa=2.0,
    alpha_mu=0.0, alpha_sd=10.0, b_mu=0.0, b_sd=1.0, gamma_beta=1.0, n_factors=2,
)


def small_factor_prior(T=15):
    t = np.arange(T)
    return FactorPrior(np.column_stack([3 * np.sin(t / 3), 0.3 * (t - T // 2)]), [1.0, 1.0],
                       [0.6, 0.3])


def simulated_context(T=15, J=6, T0=10, seed=0, **fixed):
    fp = small_factor_prior(T)
    panel, truth = simulate_panel(SMALL_HYPER, fp, J, T0, 0, seed=seed, **fixed)
    return ModelContext(panel.outcomes, panel.mask, SMALL_HYPER, fp, panel), truth


@pytest.fixture
def gaussian_target():
    return GaussianTarget


@pytest.fixture
def small_context():
    return simulated_context(seed=11, sigma=1.0)[0]


def trend_panel_matrix(T=20, J=8, seed=0, effect=0.0, T0=14):
    """Smooth society trajectories with two common factors plus noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(T)
    factors = np.column_stack([t / T, np.sin(t / 3.0)])
    loads = rng.normal(1.0, 0.5, size=(J, 2))
    y = 50 + rng.normal(0, 5, J) + 20 * factors @ loads.T + rng.normal(0, 0.5, (T, J))
    y[T0:, 0] += effect
    return y
