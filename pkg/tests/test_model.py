import math

import numpy as np
import pytest
from scipy import optimize, stats

from bsc.model import (LAYOUT_VERSION, ModelContext, _evaluate_numpy, build_context,
                       grad_log_posterior, initial_point, log_posterior, mean_draws,
                       pointwise_loglik)
from bsc.panel import from_matrix
from bsc.pca import FactorPrior

from conftest import SMALL_HYPER, simulated_context


def _oracle(ctx, v):
    """Joint log density assembled from scipy distributions."""
    p = ctx.layout.unpack(v)
    h = ctx.hyper
    sigma, kappa_sd = math.exp(p["log_sigma"]), math.exp(p["log_kappa_sd"])
    beta_sd = np.exp(p["log_beta_sd"])
    B = p["beta_mu"] + beta_sd * p["B_raw"]
    kappa = p["kappa_mu"] + kappa_sd * p["kappa_raw"]
    M = p["F"] @ B.T + p["delta"][:, None] + kappa[None, :]
    rows, cols = ctx.treated_cells
    M[rows, cols] += p["alpha"]
    fp = ctx.factor_prior
    lp = stats.norm.logpdf(ctx.outcomes, M, sigma).sum()
    lp += stats.norm.logpdf(p["F"], fp.means, fp.sds).sum()
    lp += stats.norm.logpdf(p["B_raw"]).sum() + stats.norm.logpdf(p["kappa_raw"]).sum()
    lp += stats.norm.logpdf(p["delta"], h.delta_mu, h.delta_sd).sum()
    lp += stats.norm.logpdf(p["alpha"], h.alpha_mu, h.alpha_sd).sum()
    lp += stats.norm.logpdf(p["kappa_mu"], h.k_mu, h.k_sd)
    lp += stats.norm.logpdf(p["beta_mu"], h.b_mu, h.b_sd).sum()
    lp += stats.halfcauchy.logpdf(sigma, scale=h.gamma_sigma) + p["log_sigma"]
    lp += stats.halfcauchy.logpdf(kappa_sd, scale=h.gamma_kappa) + p["log_kappa_sd"]
    lp += (stats.halfcauchy.logpdf(beta_sd, scale=h.gamma_beta) + p["log_beta_sd"]).sum()
    return float(lp)


def _fd_grad(f, v, h=1e-5):
    g = np.empty_like(v)
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        g[i] = (f(v + e) - f(v - e)) / (2 * h)
    return g


def test_layout_dimension_and_labels(small_context):
    ctx = small_context
    T, J, L = ctx.T, ctx.J, ctx.L
    assert ctx.dim == T * L + J * L + T + J + ctx.layout.n_alpha + 2 + 2 * L + 1
    labels = ctx.layout.labels()
    assert len(labels) == ctx.dim and labels[-1] == "log_sigma"
    assert LAYOUT_VERSION == "bsc-layout-1"


def test_pack_unpack_round_trip(small_context):
    v = np.random.default_rng(0).normal(size=small_context.dim)
    lay = small_context.layout
    np.testing.assert_array_equal(lay.pack(lay.unpack(v)), v)


@pytest.mark.parametrize("seed", range(5))
def test_density_matches_scipy_oracle(seed):
    ctx, _ = simulated_context(T=8, J=4, T0=5, seed=seed)
    v = initial_point(ctx, seed, jitter=1.0)
    assert log_posterior(ctx, v) == pytest.approx(_oracle(ctx, v), rel=1e-12, abs=1e-9)


def test_single_cell_panel():
    y = np.array([[3.0]])
    fp = FactorPrior(np.array([[0.5]]), [2.0], [1.0])
    ctx = ModelContext(y, np.zeros((1, 1), bool), SMALL_HYPER.replace(n_factors=1), fp)
    v = initial_point(ctx, 1, jitter=0.8)
    assert log_posterior(ctx, v) == pytest.approx(_oracle(ctx, v), rel=1e-12)


def test_single_cell_without_factors_at_prior_means():
    h = SMALL_HYPER
    y = np.array([[h.delta_mu + h.k_mu]])
    fp = FactorPrior(np.zeros((1, 0)), np.zeros(0), np.zeros(0))
    ctx = ModelContext(y, np.zeros((1, 1), bool), h, fp)
    assert ctx.dim == 5
    # unit scales: sigma = kappa_sd = 1, so y equals M exactly
    v = ctx.layout.pack({"F": np.zeros((1, 0)), "B_raw": np.zeros((1, 0)),
                         "delta": [h.delta_mu], "kappa_raw": [0.0], "alpha": np.zeros(0),
                         "kappa_mu": h.k_mu, "log_kappa_sd": 0.0, "beta_mu": np.zeros(0),
                         "log_beta_sd": np.zeros(0), "log_sigma": 0.0})

    def normal(x, m, s):
        return -0.5 * math.log(2 * math.pi) - math.log(s) - 0.5 * ((x - m) / s) ** 2

    def half_cauchy_at_one(scale):
        return math.log(2 / (math.pi * scale * (1 + (1 / scale) ** 2)))

    expect = (normal(0, 0, 1)                                   # likelihood
              + normal(h.delta_mu, h.delta_mu, h.delta_sd)
              + normal(0, 0, 1)                                 # kappa_raw
              + normal(h.k_mu, h.k_mu, h.k_sd)
              + half_cauchy_at_one(h.gamma_kappa)
              + half_cauchy_at_one(h.gamma_sigma))              # log-scale Jacobians are 0
    assert log_posterior(ctx, v) == pytest.approx(expect, rel=1e-14, abs=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    ctx, _ = simulated_context(T=12, J=5, T0=8, seed=seed)
    v = initial_point(ctx, seed, jitter=1.0)
    g = grad_log_posterior(ctx, v)
    fd = _fd_grad(lambda x: log_posterior(ctx, x), v)
    assert np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd))) < 1e-6


def test_kernel_matches_numpy_reference(small_context):
    rng = np.random.default_rng(3)
    for _ in range(5):
        v = initial_point(small_context, int(rng.integers(1 << 30)), jitter=1.5)
        lp, g = small_context.logp_and_grad(v)
        lp_ref, g_ref = _evaluate_numpy(small_context, v, True)
        assert lp == pytest.approx(lp_ref, rel=1e-13)
        np.testing.assert_allclose(g, g_ref, rtol=1e-11, atol=1e-9)


def test_gradient_vanishes_at_mode(small_context):
    ctx = small_context
    res = optimize.minimize(lambda x: -log_posterior(ctx, x), initial_point(ctx, 0, 0.0),
                            jac=lambda x: -grad_log_posterior(ctx, x), method="L-BFGS-B",
                            options=dict(maxiter=20_000, gtol=1e-9, ftol=0))
    x = res.x
    # L-BFGS stalls near 1e-5; Newton steps on a differenced Hessian finish the job
    for _ in range(3):
        H = np.empty((ctx.dim, ctx.dim))
        for i in range(ctx.dim):
            e = np.zeros(ctx.dim)
            e[i] = 1e-5
            H[i] = (grad_log_posterior(ctx, x + e) - grad_log_posterior(ctx, x - e)) / 2e-5
        H = 0.5 * (H + H.T)
        x = x - np.linalg.solve(H, grad_log_posterior(ctx, x))
    assert np.linalg.eigvalsh(H).max() < 0
    assert np.linalg.norm(grad_log_posterior(ctx, x)) < 1e-6


def test_extreme_values_return_minus_inf(small_context):
    v = initial_point(small_context, 0)
    v[small_context.layout.slices["log_sigma"]] = -400.0
    lp, _ = small_context.logp_and_grad(v)
    assert lp == -np.inf


def test_initial_points_differ_between_seeds(small_context):
    a, b = initial_point(small_context, 1), initial_point(small_context, 2)
    assert np.mean(a != b) >= 0.99
    np.testing.assert_array_equal(initial_point(small_context, 1), a)


def test_checked_entry_points_validate(small_context):
    with pytest.raises(ValueError):
        log_posterior(small_context, np.zeros(3))
    v = initial_point(small_context, 0)
    v[0] = np.nan
    with pytest.raises(ValueError):
        grad_log_posterior(small_context, v)


def test_mean_and_pointwise(small_context):
    ctx = small_context
    draws = np.stack([initial_point(ctx, s) for s in range(3)])
    M = mean_draws(ctx, draws)
    ll = pointwise_loglik(ctx, draws, chunk=2)
    sigma = np.exp(draws[:, -1])
    expect = stats.norm.logpdf(ctx.outcomes[None], M, sigma[:, None, None])
    np.testing.assert_allclose(ll, expect, rtol=1e-12)
    Mn = mean_draws(ctx, draws, include_effect=False)
    rows, cols = ctx.treated_cells
    np.testing.assert_allclose((M - Mn)[:, rows, cols],
                               draws[:, ctx.layout.slices["alpha"]])


def test_build_context_fits_pca():
    rng = np.random.default_rng(0)
    panel = from_matrix(rng.normal(size=(10, 5)).cumsum(0), 0, 7)
    ctx = build_context(panel, SMALL_HYPER)
    assert ctx.L == 2 and ctx.layout.n_alpha == 3


def test_shape_mismatch_rejected():
    fp = FactorPrior(np.zeros((3, 1)), [1.0], [1.0])
    with pytest.raises(ValueError):
        ModelContext(np.zeros((3, 2)), np.zeros((3, 3), bool), SMALL_HYPER, fp)
    with pytest.raises(ValueError):
        ModelContext(np.zeros((4, 2)), np.zeros((4, 2), bool), SMALL_HYPER, fp)
