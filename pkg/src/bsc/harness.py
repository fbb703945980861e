"""Multi-run studies: placebo accuracy/coverage comparison and the factor-count WAIC scan."""

from __future__ import annotations

import concurrent.futures as cf
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .config import HyperParams
from .model import ModelContext, build_context
from .nuts import SamplerSettings, Trace, sample
from .panel import PanelData, drop_society
from .pca import fit_pca_prior
from .posterior import (CounterfactualSummary, EffectSummary, RhatResult, WaicResult,
                        counterfactual, effect_summary, rhat_by, waic)
from .scm import fit_scm

__all__ = [
    "FitResult",
    "fit_bsc",
    "PlaceboReport",
    "run_placebo_study",
    "accuracy_comparison",
    "coverage_by_year",
    "WaicScan",
    "waic_scan",
    "sub_seed",
]

log = logging.getLogger(__name__)

METHODS = ("bsc", "scm")


def sub_seed(seed: int, index: int) -> int:
    """Stable per-run seed derived from a master seed and a run index."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class FitResult:
    ctx: ModelContext
    trace: Trace
    counterfactual: CounterfactualSummary
    effect: EffectSummary
    waic: WaicResult
    rhat: RhatResult

    @property
    def max_rhat(self) -> float:
        return self.rhat.max


def fit_bsc(panel: PanelData, hyper: HyperParams, settings: SamplerSettings,
            factor_prior=None, ci_level: float = 0.95, workers: int | None = None) -> FitResult:
    """PCA prior (unless given), NUTS, and every posterior summary for one panel."""
    ctx = build_context(panel, hyper, factor_prior)
    trace = sample(ctx, settings, workers=workers)
    return FitResult(
        ctx=ctx, trace=trace,
        counterfactual=counterfactual(ctx, trace, ci_level, seed=settings.seed),
        effect=effect_summary(ctx, trace, ci_level),
        waic=waic(ctx, trace),
        rhat=rhat_by(ctx, trace, "identified"),
    )


# -- placebo study -----------------------------------------------------------

@dataclass
class PlaceboReport:
    """One row per (placebo society, post-period year).

    Row keys: ``society, year, observed`` plus ``<method>_prediction`` and
    ``<method>_abs_pct_error`` for each method; BSC rows also carry the 95% and
    99% predictive bounds and the ``in_ci95``, ``in_ci99``, ``zero_density`` flags.
    """

    methods: tuple[str, ...]
    rows: list[dict]
    runs: list[dict] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)

    def columns(self) -> list[str]:
        cols = ["society", "year", "observed"]
        for m in self.methods:
            cols += [f"{m}_prediction", f"{m}_abs_pct_error"]
        if "bsc" in self.methods:
            cols += ["bsc_ci95_lo", "bsc_ci95_hi", "bsc_ci99_lo", "bsc_ci99_hi",
                     "in_ci95", "in_ci99", "zero_density"]
        return cols + ["seed", "chains", "tune", "draws", "n_factors", "reuse_prior", "config"]

    def write_csv(self, path) -> None:
        _write_rows(path, self.columns(), self.rows)


def _pct_error(pred, obs):
    return math.nan if obs == 0 else abs(pred - obs) / abs(obs) * 100.0


def _placebo_one(panel: PanelData, j: int, hyper: HyperParams, settings: SamplerSettings,
                 methods, reuse_prior, original_prior, config_tag):
    sub = drop_society(panel, panel.treated_society, treated=j)
    name = panel.societies[j]
    seed = sub_seed(settings.seed, j)
    obs = sub.outcomes[sub.treatment_start:, sub.treated_society]
    base = {"seed": seed, "chains": settings.chains, "tune": settings.tune,
            "draws": settings.draws, "n_factors": hyper.n_factors,
            "reuse_prior": int(reuse_prior), "config": config_tag}
    rows = [dict(society=name, year=y, observed=float(o), **base)
            for y, o in zip(sub.post_years, obs)]
    run = {"society": name, **base}
    if "scm" in methods:
        pred = fit_scm(sub).counterfactual
        for r, p in zip(rows, pred):
            r["scm_prediction"] = float(p)
            r["scm_abs_pct_error"] = _pct_error(p, r["observed"])
    if "bsc" in methods:
        if reuse_prior:
            # original prior was fit with column j among the untreated
            prior = original_prior
        else:
            prior = fit_pca_prior(sub, hyper.n_factors, hyper.pca_scale)
        ctx = build_context(sub, hyper, prior)
        s = dataclasses.replace(settings, seed=seed)
        trace = sample(ctx, s, workers=1)
        cfs = counterfactual(ctx, trace, 0.95, seed=seed)
        lo99, hi99 = cfs.interval(0.99)
        dmin, dmax = cfs.draws.min(axis=0), cfs.draws.max(axis=0)
        for i, r in enumerate(rows):
            o = r["observed"]
            r.update(
                bsc_prediction=float(cfs.mean[i]),
                bsc_abs_pct_error=_pct_error(cfs.mean[i], o),
                bsc_ci95_lo=float(cfs.lower[i]), bsc_ci95_hi=float(cfs.upper[i]),
                bsc_ci99_lo=float(lo99[i]), bsc_ci99_hi=float(hi99[i]),
                in_ci95=int(cfs.lower[i] <= o <= cfs.upper[i]),
                in_ci99=int(lo99[i] <= o <= hi99[i]),
                zero_density=int(not dmin[i] <= o <= dmax[i]),
            )
        run.update(n_divergences=trace.n_divergences,
                   max_rhat=rhat_by(ctx, trace, "identified").max)
    return rows, run


def run_placebo_study(panel: PanelData, hyper: HyperParams, settings: SamplerSettings,
                      methods: Iterable[str] = METHODS, *, reuse_prior: bool = False,
                      workers: int = 1, config_tag: str = "") -> PlaceboReport:
    """Treat each comparison society in turn as if treated and predict its post period.

    The originally treated society is removed from every placebo panel. With
    ``reuse_prior`` the factor prior fitted on the full panel is used for every
    run instead of one refitted without the placebo society.
    """
    methods = tuple(m for m in METHODS if m in set(methods))
    if not methods:
        raise ValueError(f"methods must be a non-empty subset of {METHODS}")
    if panel.J < 3:
        raise ValueError("placebo study needs at least three societies")
    original_prior = (fit_pca_prior(panel, hyper.n_factors, hyper.pca_scale)
                      if "bsc" in methods and reuse_prior else None)
    comps = list(panel.untreated_columns)
    args = [(panel, j, hyper, settings, methods, reuse_prior, original_prior, config_tag)
            for j in comps]
    results: list = [None] * len(comps)
    failures: dict[str, str] = {}
    if workers > 1:
        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(_placebo_one, *a) for a in args]
            for i, f in enumerate(futs):
                try:
                    results[i] = f.result()
                except Exception as exc:  # noqa: BLE001
                    failures[panel.societies[comps[i]]] = f"{type(exc).__name__}: {exc}"
    else:
        for i, a in enumerate(args):
            try:
                results[i] = _placebo_one(*a)
            except Exception as exc:  # noqa: BLE001
                failures[panel.societies[comps[i]]] = f"{type(exc).__name__}: {exc}"
    for name, msg in failures.items():
        log.warning("placebo run for %s failed: %s", name, msg)
    rows, runs = [], []
    for res in results:
        if res is not None:
            rows += res[0]
            runs.append(res[1])
    return PlaceboReport(methods, rows, runs, failures)


def accuracy_comparison(report: PlaceboReport) -> list[dict]:
    """Mean absolute percent error per year and method, averaged over societies.

    Cells whose observed value is exactly zero are excluded (and logged).
    """
    out = []
    for year in sorted({r["year"] for r in report.rows}):
        rec = {"year": year}
        for m in report.methods:
            errs = [_pct_error(r[f"{m}_prediction"], r["observed"])
                    for r in report.rows if r["year"] == year]
            kept = [e for e in errs if not math.isnan(e)]
            if len(kept) < len(errs):
                log.info("year %s: %d cells with observed 0 excluded", year, len(errs) - len(kept))
            rec[f"{m}_mape"] = float(np.mean(kept)) if kept else math.nan
            rec[f"{m}_n"] = len(kept)
        out.append(rec)
    return out


def coverage_by_year(report: PlaceboReport) -> list[dict]:
    """Share of placebo societies inside the 95%/99% predictive intervals per year."""
    if "bsc" not in report.methods:
        raise ValueError("coverage needs BSC predictions")
    out = []
    for year in sorted({r["year"] for r in report.rows}):
        rs = [r for r in report.rows if r["year"] == year]
        out.append({
            "year": year, "n": len(rs),
            "coverage95": float(np.mean([r["in_ci95"] for r in rs])),
            "coverage99": float(np.mean([r["in_ci99"] for r in rs])),
            "zero_density_rate": float(np.mean([r["zero_density"] for r in rs])),
        })
    return out


# -- WAIC scan -----------------------------------------------------------------

@dataclass
class WaicScan:
    records: list[dict]

    COLUMNS = ("n_factors", "status", "waic", "lppd", "p_waic", "waic_untreated", "max_rhat",
               "n_divergences", "error", "seed", "chains", "tune", "draws", "config")

    def write_csv(self, path) -> None:
        _write_rows(path, list(self.COLUMNS), self.records)

    def waic_values(self) -> dict[int, float]:
        return {r["n_factors"]: r["waic"] for r in self.records if r["status"] == "ok"}


def waic_scan(panel: PanelData, hyper: HyperParams, settings: SamplerSettings,
              factor_counts: Iterable[int], *, config_tag: str = "") -> WaicScan:
    """One full fit per factor count (PCA prior refit each time), all with ``settings.seed``."""
    records = []
    for L in sorted(set(int(x) for x in factor_counts)):
        rec = {"n_factors": L, "seed": settings.seed, "chains": settings.chains,
               "tune": settings.tune, "draws": settings.draws, "config": config_tag,
               "status": "ok", "error": ""}
        try:
            res = fit_bsc(panel, hyper.replace(n_factors=L), settings)
            rec.update(waic=res.waic.waic, lppd=res.waic.lppd, p_waic=res.waic.p_waic,
                       waic_untreated=res.waic.waic_untreated, max_rhat=res.max_rhat,
                       n_divergences=res.trace.n_divergences)
        except Exception as exc:  # noqa: BLE001 - recorded, scan continues
            log.warning("WAIC scan L=%d failed: %s", L, exc)
            rec.update(status="failed", error=f"{type(exc).__name__}: {exc}", waic=math.nan,
                       lppd=math.nan, p_waic=math.nan, waic_untreated=math.nan,
                       max_rhat=math.nan, n_divergences=-1)
        records.append(rec)
    return WaicScan(records)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if math.isnan(v) else repr(v)
    return v


def _write_rows(path, columns, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def write_records(path, rows: list[dict]) -> None:
    """CSV from homogeneous dict records, columns in first-record key order."""
    _write_rows(path, list(rows[0]) if rows else [], rows)
