"""Posterior summaries: counterfactual predictive, treatment effects, split-R-hat, WAIC."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .model import ModelContext, mean_draws, pointwise_loglik
from .nuts import Trace

__all__ = [
    "CounterfactualSummary",
    "EffectSummary",
    "RhatResult",
    "WaicResult",
    "counterfactual",
    "effect_summary",
    "split_rhat",
    "rhat_by",
    "waic",
    "waic_from_loglik",
    "summary_document",
    "write_summary",
    "SUMMARY_SCHEMA",
]

SUMMARY_SCHEMA = "bsc-summary/1"


def _years(ctx: ModelContext, rows) -> np.ndarray:
    if ctx.panel is not None:
        return np.asarray(ctx.panel.years)[rows]
    return np.asarray(rows)


def _interval(draws, level):
    tail = 0.5 * (1.0 - level)
    lo, hi = np.quantile(draws, [tail, 1.0 - tail], axis=0)
    return lo, hi


def _check(trace: Trace, level: float):
    if trace.n_draws * trace.n_chains == 0:
        raise ValueError("trace is empty")
    if not 0.0 < level < 1.0:
        raise ValueError("ci_level must lie in (0, 1)")


@dataclass(frozen=True)
class CounterfactualSummary:
    """Predictive distribution of the untreated outcome at every treated cell."""

    years: np.ndarray
    observed: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    ci_level: float
    draws: np.ndarray  # (total draws, treated cells)

    def interval(self, level: float):
        """Equal-tailed bounds at another level from the stored draws."""
        return _interval(self.draws, level)


@dataclass(frozen=True)
class EffectSummary:
    years: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    ci_level: float
    draws: np.ndarray  # (total draws, treated cells)
    average_mean: float
    average_lower: float
    average_upper: float
    cumulative_mean: float
    prob_nonnegative: float

    @property
    def end_draws(self) -> np.ndarray:
        """Effect draws for the last treated year."""
        return self.draws[:, -1]


def counterfactual(ctx: ModelContext, trace: Trace, ci_level: float = 0.95,
                   seed: int = 0) -> CounterfactualSummary:
    """Posterior predictive of the outcome without the treatment term.

    Each retained draw contributes ``F B' + delta + kappa`` at the treated cells
    plus fresh Gaussian noise with that draw's sigma. ``seed`` drives the noise.
    """
    _check(trace, ci_level)
    rows, cols = ctx.treated_cells
    if rows.size == 0:
        raise ValueError("no treated cells")
    flat = trace.flat()
    M = mean_draws(ctx, flat, include_effect=False)[:, rows, cols]
    sigma = np.exp(flat[:, ctx.layout.slices["log_sigma"].start])
    noise = np.random.default_rng(seed).standard_normal(M.shape)
    draws = M + sigma[:, None] * noise
    lo, hi = _interval(draws, ci_level)
    return CounterfactualSummary(
        years=_years(ctx, rows), observed=ctx.outcomes[rows, cols].copy(),
        mean=draws.mean(axis=0), sd=draws.std(axis=0, ddof=1) if draws.shape[0] > 1
        else np.zeros(rows.size), lower=lo, upper=hi, ci_level=ci_level, draws=draws)


def effect_summary(ctx: ModelContext, trace: Trace, ci_level: float = 0.95) -> EffectSummary:
    """Per-year and post-period-average summaries of the treatment effect draws."""
    _check(trace, ci_level)
    rows, _ = ctx.treated_cells
    if rows.size == 0:
        raise ValueError("no treated cells")
    a = trace.flat()[:, ctx.layout.slices["alpha"]]
    lo, hi = _interval(a, ci_level)
    avg = a.mean(axis=1)
    alo, ahi = _interval(avg, ci_level)
    return EffectSummary(
        years=_years(ctx, rows), mean=a.mean(axis=0), lower=lo, upper=hi,
        ci_level=ci_level, draws=a, average_mean=float(avg.mean()),
        average_lower=float(alo), average_upper=float(ahi),
        cumulative_mean=float(a.sum(axis=1).mean()),
        prob_nonnegative=float(np.mean(avg >= 0.0)))


class RhatResult(NamedTuple):
    rhat: np.ndarray
    degenerate: np.ndarray  # True where within-chain variance is zero

    @property
    def max(self) -> float:
        ok = self.rhat[~self.degenerate]
        return float(ok.max()) if ok.size else math.nan


def split_rhat(draws: np.ndarray) -> RhatResult:
    """Split-chain potential scale reduction per trailing-axis quantity.

    ``draws`` has shape ``(chains, n, ...)``. An odd ``n`` drops the middle draw.
    Quantities with zero pooled within-chain variance get ``nan`` and a flag.
    """
    x = np.asarray(draws, dtype=float)
    if x.ndim < 2:
        raise ValueError("draws need shape (chains, n, ...)")
    if x.shape[1] < 4:
        raise ValueError("split R-hat needs at least 4 draws per chain")
    half = x.shape[1] // 2
    split = np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)
    n = half
    W = split.var(axis=1, ddof=1).mean(axis=0)
    B = n * split.mean(axis=1).var(axis=0, ddof=1)
    degenerate = ~(W > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(((n - 1) / n * W + B / n) / W)
    r = np.where(degenerate, np.nan, r)
    return RhatResult(np.atleast_1d(r), np.atleast_1d(degenerate))


def rhat_by(ctx: ModelContext, trace: Trace, which: str) -> RhatResult:
    """Split-R-hat for a parameter block name, ``"M"`` (every cell of the mean
    matrix) or ``"identified"`` (``M``, effects and sigma together)."""
    if which == "M":
        M = mean_draws(ctx, trace.flat()).reshape(trace.n_chains, trace.n_draws, -1)
        return split_rhat(M)
    if which == "identified":
        parts = [rhat_by(ctx, trace, "M"), rhat_by(ctx, trace, "alpha"),
                 rhat_by(ctx, trace, "log_sigma")]
        return RhatResult(np.concatenate([p.rhat for p in parts]),
                          np.concatenate([p.degenerate for p in parts]))
    if which == "all":
        return split_rhat(trace.draws)
    sl = ctx.layout.slices[which]
    return split_rhat(trace.draws[:, :, sl])


class WaicResult(NamedTuple):
    waic: float
    lppd: float
    p_waic: float
    pointwise: np.ndarray  # per-cell deviance contributions, T x J
    waic_untreated: float
    lppd_untreated: float
    p_waic_untreated: float


def waic_from_loglik(loglik: np.ndarray):
    """``(waic, lppd, p_waic, pointwise_waic)`` from draws x cells log-likelihoods.

    The draw axis is the first; p_waic uses the unbiased (ddof=1) variance.
    """
    ll = np.asarray(loglik, dtype=float)
    S = ll.shape[0]
    if S == 0:
        raise ValueError("no draws")
    lppd_i = logsumexp(ll, axis=0) - math.log(S)
    # shifting by the first draw keeps the variance exactly zero for constant columns
    p_i = (ll - ll[0]).var(axis=0, ddof=1) if S > 1 else np.zeros(ll.shape[1:])
    lppd = float(lppd_i.sum())
    p = float(p_i.sum())
    return -2.0 * (lppd - p), lppd, p, -2.0 * (lppd_i - p_i)


def waic(ctx: ModelContext, trace: Trace) -> WaicResult:
    """WAIC over every observed cell; the untreated-only variant rides along."""
    if trace.n_draws * trace.n_chains == 0:
        raise ValueError("trace is empty")
    ll = pointwise_loglik(ctx, trace.flat())
    w, lppd, p, pw = waic_from_loglik(ll)
    keep = ~ctx.mask
    wu, lu, pu, _ = waic_from_loglik(ll[:, keep])
    return WaicResult(w, lppd, p, pw, wu, lu, pu)


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def summary_document(ctx: ModelContext, trace: Trace, cf: CounterfactualSummary,
                     eff: EffectSummary, waic_res: WaicResult | None = None,
                     rhat: RhatResult | None = None, extra: dict | None = None) -> dict:
    """JSON-ready summary; non-finite numbers become ``null``."""
    years = [{
        "year": int(y), "observed": cf.observed[i],
        "cf_mean": cf.mean[i], "cf_lo": cf.lower[i], "cf_hi": cf.upper[i],
        "effect_mean": eff.mean[i], "effect_lo": eff.lower[i], "effect_hi": eff.upper[i],
    } for i, y in enumerate(cf.years)]
    scalars = {
        "n_divergences": trace.n_divergences,
        "max_rhat": rhat.max if rhat is not None else None,
        "ci_level": cf.ci_level,
        "effect_average_mean": eff.average_mean,
        "effect_average_lo": eff.average_lower,
        "effect_average_hi": eff.average_upper,
        "prob_nonnegative_effect": eff.prob_nonnegative,
        "treedepth_saturation": trace.saturation_count,
    }
    if waic_res is not None:
        scalars.update(waic=waic_res.waic, lppd=waic_res.lppd, p_waic=waic_res.p_waic,
                       waic_untreated=waic_res.waic_untreated)
    doc = {"schema": SUMMARY_SCHEMA, "years": years, "scalars": scalars,
           "layout_version": trace.layout_version}
    if extra:
        doc.update(extra)
    return _clean(doc)


def write_summary(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")
