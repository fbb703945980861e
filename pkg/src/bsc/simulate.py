"""Synthetic panels drawn from the BSC generative model."""

from __future__ import annotations

import numpy as np

from .config import HyperParams
from .model import ModelContext
from .panel import PanelData, from_matrix
from .pca import FactorPrior

__all__ = ["simulate_panel"]


def _half_cauchy(rng, scale, size=None):
    return np.abs(scale * rng.standard_cauchy(size))


def simulate_panel(hyper: HyperParams, factor_prior: FactorPrior, J: int, treatment_start: int,
                   treated: int = 0, seed: int = 0, **fixed) -> tuple[PanelData, dict]:
    """Draw parameters from the prior, then outcomes from the likelihood.

    Keyword arguments named after parameter blocks (``sigma``, ``kappa_sd``,
    ``beta_sd``, ``alpha``, ...) pin those values instead of drawing them.

    Returns the panel and a dict of true values, including the packed vector
    under ``"vector"`` (ordered as :class:`~bsc.model.ParamLayout`).
    """
    rng = np.random.default_rng(seed)
    T, L = factor_prior.T, factor_prior.L
    n_alpha = T - treatment_start
    h = hyper

    def draw(name, fn):
        return np.asarray(fixed[name], dtype=float) if name in fixed else fn()

    truth = {}
    truth["F"] = draw("F", lambda: factor_prior.means + factor_prior.sds * rng.standard_normal((T, L)))
    truth["beta_mu"] = draw("beta_mu", lambda: h.b_mu + h.b_sd * rng.standard_normal(L))
    truth["beta_sd"] = draw("beta_sd", lambda: _half_cauchy(rng, h.gamma_beta, L))
    truth["B_raw"] = draw("B_raw", lambda: rng.standard_normal((J, L)))
    truth["delta"] = draw("delta", lambda: h.delta_mu + h.delta_sd * rng.standard_normal(T))
    truth["kappa_mu"] = draw("kappa_mu", lambda: h.k_mu + h.k_sd * rng.standard_normal())
    truth["kappa_sd"] = draw("kappa_sd", lambda: _half_cauchy(rng, h.gamma_kappa))
    truth["kappa_raw"] = draw("kappa_raw", lambda: rng.standard_normal(J))
    truth["alpha"] = draw("alpha", lambda: h.alpha_mu + h.alpha_sd * rng.standard_normal(n_alpha))
    truth["sigma"] = draw("sigma", lambda: _half_cauchy(rng, h.gamma_sigma))

    B = truth["beta_mu"] + truth["beta_sd"] * truth["B_raw"]
    kappa = truth["kappa_mu"] + truth["kappa_sd"] * truth["kappa_raw"]
    M = truth["F"] @ B.T + truth["delta"][:, None] + kappa[None, :]
    M[treatment_start:, treated] += truth["alpha"]
    y = M + truth["sigma"] * rng.standard_normal((T, J))
    panel = from_matrix(y, treated, treatment_start)

    ctx = ModelContext(panel.outcomes, panel.mask, hyper, factor_prior, panel)
    truth["vector"] = ctx.layout.pack({
        "F": truth["F"], "B_raw": truth["B_raw"], "delta": truth["delta"],
        "kappa_raw": truth["kappa_raw"], "alpha": truth["alpha"],
        "kappa_mu": truth["kappa_mu"], "log_kappa_sd": np.log(truth["kappa_sd"]),
        "beta_mu": truth["beta_mu"], "log_beta_sd": np.log(truth["beta_sd"]),
        "log_sigma": np.log(truth["sigma"]),
    })
    truth["M"] = M
    return panel, truth
