"""Unconstrained parameterisation of the BSC posterior.

The outcome model is

    Y ~ N(M, sigma^2),   M = F B' + delta 1' + 1 kappa' + A o D

with a PCA-centred Gaussian prior on ``F``, hierarchical (non-centred) priors on
``kappa`` and the loadings ``B``, Gaussian priors on ``delta`` and the treated
cells of ``A`` and half-Cauchy priors on every scale. Scales are sampled on the
log scale; the log-Jacobian of that transform is part of the density.

Flat parameter vector layout (``LAYOUT_VERSION``)::

    F          T*L   row-major
    B_raw      J*L   row-major, standardised loadings
    delta      T
    kappa_raw  J     standardised intercepts
    alpha      T-T0  treated cells, in year order
    kappa_mu   1
    log_kappa_sd 1
    beta_mu    L
    log_beta_sd L
    log_sigma  1
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernel
from .config import HyperParams
from .panel import PanelData
from .pca import FactorPrior, fit_pca_prior

__all__ = [
    "LAYOUT_VERSION",
    "ParamLayout",
    "ModelContext",
    "build_context",
    "log_posterior",
    "grad_log_posterior",
    "initial_point",
    "pointwise_loglik",
    "mean_draws",
]

LAYOUT_VERSION = "bsc-layout-1"

_LOG_2PI = math.log(2.0 * math.pi)
_LOG_2_OVER_PI = math.log(2.0 / math.pi)
_BLOCKS = ("F", "B_raw", "delta", "kappa_raw", "alpha", "kappa_mu", "log_kappa_sd",
           "beta_mu", "log_beta_sd", "log_sigma")


@dataclass(frozen=True)
class ParamLayout:
    """Offsets of each parameter block in the flat vector."""

    T: int
    J: int
    L: int
    n_alpha: int
    slices: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sizes = dict(F=self.T * self.L, B_raw=self.J * self.L, delta=self.T,
                     kappa_raw=self.J, alpha=self.n_alpha, kappa_mu=1, log_kappa_sd=1,
                     beta_mu=self.L, log_beta_sd=self.L, log_sigma=1)
        out, start = {}, 0
        for name in _BLOCKS:
            out[name] = slice(start, start + sizes[name])
            start += sizes[name]
        object.__setattr__(self, "slices", out)

    @property
    def dim(self) -> int:
        return self.slices["log_sigma"].stop

    @property
    def names(self) -> tuple[str, ...]:
        return _BLOCKS

    def unpack(self, v: np.ndarray) -> dict[str, np.ndarray]:
        """Views into ``v`` (last axis) keyed by block; works on stacked draws too."""
        lead = v.shape[:-1]
        s = self.slices
        return {
            "F": v[..., s["F"]].reshape(lead + (self.T, self.L)),
            "B_raw": v[..., s["B_raw"]].reshape(lead + (self.J, self.L)),
            "delta": v[..., s["delta"]],
            "kappa_raw": v[..., s["kappa_raw"]],
            "alpha": v[..., s["alpha"]],
            "kappa_mu": v[..., s["kappa_mu"]][..., 0],
            "log_kappa_sd": v[..., s["log_kappa_sd"]][..., 0],
            "beta_mu": v[..., s["beta_mu"]],
            "log_beta_sd": v[..., s["log_beta_sd"]],
            "log_sigma": v[..., s["log_sigma"]][..., 0],
        }

    def pack(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        v = np.empty(self.dim)
        for name in _BLOCKS:
            v[self.slices[name]] = np.ravel(parts[name])
        return v

    def labels(self) -> list[str]:
        """Human-readable name for every coordinate."""
        out = []
        for t in range(self.T):
            out += [f"F[{t},{m}]" for m in range(self.L)]
        for j in range(self.J):
            out += [f"B_raw[{j},{m}]" for m in range(self.L)]
        out += [f"delta[{t}]" for t in range(self.T)]
        out += [f"kappa_raw[{j}]" for j in range(self.J)]
        out += [f"alpha[{k}]" for k in range(self.n_alpha)]
        out += ["kappa_mu", "log_kappa_sd"]
        out += [f"beta_mu[{m}]" for m in range(self.L)]
        out += [f"log_beta_sd[{m}]" for m in range(self.L)]
        out += ["log_sigma"]
        return out


@dataclass(frozen=True, eq=False)
class ModelContext:
    """Data, prior constants and factor prior bound into one evaluation target.

    ``outcomes`` and ``mask`` are ``T x J``; ``mask`` may mark any set of cells as
    treated, each of which receives its own effect parameter.
    """

    outcomes: np.ndarray
    mask: np.ndarray
    hyper: HyperParams
    factor_prior: FactorPrior
    panel: PanelData | None = None

    def __post_init__(self):
        y = np.array(self.outcomes, dtype=float, ndmin=2)
        d = np.array(self.mask, dtype=bool, ndmin=2)
        if y.shape != d.shape:
            raise ValueError(f"outcomes {y.shape} and mask {d.shape} differ in shape")
        if not np.all(np.isfinite(y)):
            raise ValueError("outcomes must be finite")
        if self.factor_prior.T != y.shape[0]:
            raise ValueError(f"factor prior has {self.factor_prior.T} years, data has {y.shape[0]}")
        y.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "mask", d)
        rows, cols = np.nonzero(d)
        object.__setattr__(self, "_treated", (rows, cols))
        T, J = y.shape
        object.__setattr__(self, "layout", ParamLayout(T, J, self.factor_prior.L, rows.size))
        object.__setattr__(self, "_inv_r2", 1.0 / self.factor_prior.sds ** 2)
        object.__setattr__(self, "_const", self._constant())
        object.__setattr__(self, "_hp", _kernel.pack_hyper(self.hyper))
        object.__setattr__(self, "_rows", np.ascontiguousarray(rows, dtype=np.int64))
        object.__setattr__(self, "_cols", np.ascontiguousarray(cols, dtype=np.int64))
        object.__setattr__(self, "_pmeans", np.ascontiguousarray(self.factor_prior.means))

    @property
    def T(self) -> int:
        return self.outcomes.shape[0]

    @property
    def J(self) -> int:
        return self.outcomes.shape[1]

    @property
    def L(self) -> int:
        return self.factor_prior.L

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def treated_cells(self) -> tuple[np.ndarray, np.ndarray]:
        return self._treated

    def _constant(self) -> float:
        """Terms of the log density that do not depend on the parameters."""
        h = self.hyper
        T, J, L = self.T, self.J, self.L
        n_alpha = self._treated[0].size
        c = -0.5 * T * J * _LOG_2PI
        # Gaussian normalisers: F, delta, alpha, kappa_raw, B_raw, kappa_mu, beta_mu
        c += -0.5 * T * L * _LOG_2PI - T * float(np.sum(np.log(self.factor_prior.sds)))
        c += T * (-0.5 * _LOG_2PI - math.log(h.delta_sd))
        c += n_alpha * (-0.5 * _LOG_2PI - math.log(h.alpha_sd))
        c += (J + J * L) * (-0.5 * _LOG_2PI)
        c += -0.5 * _LOG_2PI - math.log(h.k_sd)
        c += L * (-0.5 * _LOG_2PI - math.log(h.b_sd))
        # half-Cauchy normalisers: sigma, kappa_sd, beta_sd
        c += (2 + L) * _LOG_2_OVER_PI
        c -= math.log(h.gamma_sigma) + math.log(h.gamma_kappa) + L * math.log(h.gamma_beta)
        return c

    @property
    def compiled_model(self) -> tuple:
        """Arguments the compiled sampler passes to the log density kernel."""
        return (self.outcomes, self._rows, self._cols, self._pmeans, self._inv_r2, self._hp,
                self._const)

    def logp(self, v: np.ndarray) -> float:
        return _evaluate(self, v, grad=False)[0]

    def logp_and_grad(self, v: np.ndarray) -> tuple[float, np.ndarray]:
        """Unchecked fast path used by the sampler."""
        return _evaluate(self, v, grad=True)


def build_context(panel: PanelData, hyper: HyperParams,
                  factor_prior: FactorPrior | None = None, **pca_kw) -> ModelContext:
    """Bind ``panel`` and ``hyper``, fitting the PCA prior unless one is given."""
    if factor_prior is None:
        factor_prior = fit_pca_prior(panel, hyper.n_factors, hyper.pca_scale, **pca_kw)
    return ModelContext(panel.outcomes, panel.mask, hyper, factor_prior, panel)


def _log_half_cauchy(u, log_gamma):
    """Half-Cauchy log density of ``exp(u)`` plus the log-Jacobian ``u``, without
    the constant ``log(2/pi) - log(gamma)``; returns (value, d/du)."""
    a = u - log_gamma
    return u - np.logaddexp(0.0, 2.0 * a), -np.tanh(a)


def _evaluate(ctx: ModelContext, v: np.ndarray, grad: bool):
    v = np.ascontiguousarray(v, dtype=np.float64)
    g = np.empty(v.shape[0]) if grad else np.empty(0)
    lp = _kernel.log_density(v, ctx.outcomes, ctx._rows, ctx._cols, ctx._pmeans, ctx._inv_r2,
                             ctx._hp, ctx._const, g, grad)
    return lp, (g if grad else None)


def _evaluate_numpy(ctx: ModelContext, v: np.ndarray, grad: bool):
    """Vectorised reference implementation of :func:`_evaluate`."""
    lay = ctx.layout
    h = ctx.hyper
    s = lay.slices
    T, J, L = lay.T, lay.J, lay.L
    F = v[s["F"]].reshape(T, L)
    B_raw = v[s["B_raw"]].reshape(J, L)
    delta = v[s["delta"]]
    kappa_raw = v[s["kappa_raw"]]
    alpha = v[s["alpha"]]
    kappa_mu = v[s["kappa_mu"]][0]
    log_kappa_sd = v[s["log_kappa_sd"]][0]
    beta_mu = v[s["beta_mu"]]
    log_beta_sd = v[s["log_beta_sd"]]
    log_sigma = v[s["log_sigma"]][0]

    with np.errstate(over="ignore", invalid="ignore"):
        kappa_sd = math.exp(log_kappa_sd) if log_kappa_sd < 700 else math.inf
        beta_sd = np.exp(log_beta_sd)
        B = beta_mu + beta_sd * B_raw
        kappa = kappa_mu + kappa_sd * kappa_raw
        resid = ctx.outcomes - (F @ B.T) - delta[:, None] - kappa[None, :]
        rows, cols = ctx.treated_cells
        if alpha.size:
            resid[rows, cols] -= alpha
        inv_var = math.exp(-2.0 * log_sigma) if log_sigma > -350 else math.inf
        ss = float(np.dot(resid.ravel(), resid.ravel()))
        lp = -T * J * log_sigma - 0.5 * ss * inv_var

        zF = F - ctx.factor_prior.means
        lp -= 0.5 * float(np.sum(zF * zF * ctx._inv_r2))
        zd = (delta - h.delta_mu) / h.delta_sd
        lp -= 0.5 * float(zd @ zd)
        za = (alpha - h.alpha_mu) / h.alpha_sd
        lp -= 0.5 * float(za @ za)
        lp -= 0.5 * float(kappa_raw @ kappa_raw)
        lp -= 0.5 * float(np.sum(B_raw * B_raw))
        zk = (kappa_mu - h.k_mu) / h.k_sd
        lp -= 0.5 * zk * zk
        zb = (beta_mu - h.b_mu) / h.b_sd
        lp -= 0.5 * float(zb @ zb)
        hc_s, dhc_s = _log_half_cauchy(log_sigma, math.log(h.gamma_sigma))
        hc_k, dhc_k = _log_half_cauchy(log_kappa_sd, math.log(h.gamma_kappa))
        hc_b, dhc_b = _log_half_cauchy(log_beta_sd, math.log(h.gamma_beta))
        lp += float(hc_s) + float(hc_k) + float(np.sum(hc_b))
        lp += ctx._const

    if not math.isfinite(lp):
        return -math.inf, (np.full(lay.dim, np.nan) if grad else None)
    if not grad:
        return lp, None

    g = np.empty(lay.dim)
    G = resid * inv_var
    dB = G.T @ F
    g[s["F"]] = (G @ B - zF * ctx._inv_r2).ravel()
    g[s["B_raw"]] = (dB * beta_sd - B_raw).ravel()
    g[s["delta"]] = G.sum(axis=1) - zd / h.delta_sd
    dkappa = G.sum(axis=0)
    g[s["kappa_raw"]] = dkappa * kappa_sd - kappa_raw
    if alpha.size:
        g[s["alpha"]] = G[rows, cols] - za / h.alpha_sd
    g[s["kappa_mu"]] = dkappa.sum() - zk / h.k_sd
    g[s["log_kappa_sd"]] = float(dkappa @ kappa_raw) * kappa_sd + dhc_k
    g[s["beta_mu"]] = dB.sum(axis=0) - zb / h.b_sd
    g[s["log_beta_sd"]] = np.sum(dB * B_raw, axis=0) * beta_sd + dhc_b
    g[s["log_sigma"]] = -T * J + ss * inv_var + dhc_s
    return lp, g


def _checked(ctx: ModelContext, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.shape[0] != ctx.dim:
        raise ValueError(f"parameter vector has shape {v.shape}, expected ({ctx.dim},)")
    if not np.all(np.isfinite(v)):
        raise ValueError("parameter vector contains NaN or infinite entries")
    return v


def log_posterior(ctx: ModelContext, v) -> float:
    """Log joint density ``log p(Y | theta) + log p(theta)`` in unconstrained
    coordinates, normalising constants included."""
    return _evaluate(ctx, _checked(ctx, v), grad=False)[0]


def grad_log_posterior(ctx: ModelContext, v) -> np.ndarray:
    """Analytic gradient of :func:`log_posterior`."""
    return _evaluate(ctx, _checked(ctx, v), grad=True)[1]


def initial_point(ctx: ModelContext, rng_seed: int | None = 0, jitter: float = 0.5) -> np.ndarray:
    """Prior-centred starting vector plus ``uniform(-jitter, jitter)`` noise."""
    h = ctx.hyper
    lay = ctx.layout
    parts = {
        "F": ctx.factor_prior.means,
        "B_raw": np.zeros((lay.J, lay.L)),
        "delta": np.full(lay.T, h.delta_mu),
        "kappa_raw": np.zeros(lay.J),
        "alpha": np.full(lay.n_alpha, h.alpha_mu),
        "kappa_mu": h.k_mu,
        "log_kappa_sd": math.log(h.gamma_kappa),
        "beta_mu": np.full(lay.L, h.b_mu),
        "log_beta_sd": np.full(lay.L, math.log(h.gamma_beta)),
        "log_sigma": math.log(h.gamma_sigma),
    }
    v = lay.pack(parts)
    if jitter:
        rng = np.random.default_rng(rng_seed)
        v = v + rng.uniform(-jitter, jitter, size=v.shape)
    return v


def mean_draws(ctx: ModelContext, draws: np.ndarray, include_effect: bool = True) -> np.ndarray:
    """Mean matrix ``M`` for each row of ``draws`` (shape ``(S, dim)``) -> ``(S, T, J)``."""
    p = ctx.layout.unpack(np.asarray(draws, dtype=float))
    beta_sd = np.exp(p["log_beta_sd"])
    B = p["beta_mu"][:, None, :] + beta_sd[:, None, :] * p["B_raw"]
    kappa = p["kappa_mu"][:, None] + np.exp(p["log_kappa_sd"])[:, None] * p["kappa_raw"]
    M = np.einsum("stl,sjl->stj", p["F"], B)
    M += p["delta"][:, :, None]
    M += kappa[:, None, :]
    if include_effect and ctx.layout.n_alpha:
        rows, cols = ctx.treated_cells
        M[:, rows, cols] += p["alpha"]
    return M


def pointwise_loglik(ctx: ModelContext, draws: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """``log N(y_tj | M_tj, sigma)`` per draw and cell -> ``(S, T, J)``."""
    draws = np.asarray(draws, dtype=float)
    out = np.empty((draws.shape[0], ctx.T, ctx.J))
    sl = ctx.layout.slices["log_sigma"].start
    for a in range(0, draws.shape[0], chunk):
        d = draws[a:a + chunk]
        M = mean_draws(ctx, d)
        ls = d[:, sl][:, None, None]
        z = (ctx.outcomes[None] - M) * np.exp(-ls)
        out[a:a + chunk] = -0.5 * _LOG_2PI - ls - 0.5 * z * z
    return out
