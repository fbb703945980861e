"""Synthetic control weights, counterfactual projection and the relabeling test.

Weights solve ``min ||x1 - X0 w||^2`` over the probability simplex, where ``x1``
holds the treated society's pre-period outcomes and the columns of ``X0`` those
of the comparison societies. Predictor weighting is the identity and no
covariates enter.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .panel import PanelData, relabel

__all__ = [
    "ScmFit",
    "RelabelResult",
    "simplex_project",
    "solve_simplex_ls",
    "fit_scm",
    "scm_effect",
    "relabel_significance",
    "write_weights_csv",
    "write_effects_csv",
]

log = logging.getLogger(__name__)


def simplex_project(y) -> np.ndarray:
    """Euclidean projection of ``y`` onto ``{w >= 0, sum(w) = 1}``."""
    y = np.asarray(y, dtype=float)
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, y.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(y - theta, 0.0)


def solve_simplex_ls(X0, x1, tol: float = 1e-10, max_iter: int = 100_000):
    """Accelerated projected gradient with adaptive restart.

    Data are rescaled by their largest absolute entry first, so ``tol`` applies
    to the gradient-mapping norm of a unit-scale problem and the weights do not
    depend on the outcome units. Returns ``(w, iterations, converged)``.
    """
    X0 = np.asarray(X0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    n = X0.shape[1]
    scale = max(float(np.max(np.abs(X0))), float(np.max(np.abs(x1))), 1e-300)
    A = X0 / scale
    b = x1 / scale
    AtA = A.T @ A
    Atb = A.T @ b
    lip = 2.0 * float(np.linalg.eigvalsh(AtA)[-1])
    w = np.full(n, 1.0 / n)
    if lip <= 0.0:
        return w, 0, True
    step = 1.0 / lip
    y = w.copy()
    t = 1.0
    for it in range(1, max_iter + 1):
        grad_y = 2.0 * (AtA @ y - Atb)
        w_new = simplex_project(y - step * grad_y)
        grad_w = 2.0 * (AtA @ w_new - Atb)
        mapping = lip * (w_new - simplex_project(w_new - step * grad_w))
        if np.linalg.norm(mapping) < tol:
            return _polish(w_new, AtA, Atb), it, True
        if np.dot(y - w_new, w_new - w) > 0.0:
            t = 1.0
            y = w_new.copy()
        else:
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            y = w_new + ((t - 1.0) / t_new) * (w_new - w)
            t = t_new
        w = w_new
    log.warning("simplex least squares stopped at %d iterations without converging", max_iter)
    return w, max_iter, False


def _polish(w, AtA, Atb):
    """Re-solve on the support with only the sum constraint; keep if feasible and no worse."""
    S = np.flatnonzero(w > 1e-9)
    k = S.size
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = 2.0 * AtA[np.ix_(S, S)]
    kkt[:k, k] = kkt[k, :k] = 1.0
    rhs = np.append(2.0 * Atb[S], 1.0)
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
    if np.any(sol < 0):
        return w
    cand = np.zeros_like(w)
    cand[S] = sol / sol.sum()

    def obj(x):
        return float(x @ AtA @ x - 2.0 * x @ Atb)
    return cand if obj(cand) <= obj(w) else w


@dataclass(frozen=True)
class ScmFit:
    weights: np.ndarray
    donors: tuple[str, ...]
    pre_loss: float
    counterfactual: np.ndarray
    post_years: tuple[int, ...]
    observed_post: np.ndarray
    iterations: int = 0
    converged: bool = True

    @property
    def effect(self) -> np.ndarray:
        """Observed minus synthetic outcome per post-period year."""
        return self.observed_post - self.counterfactual


def fit_scm(panel: PanelData) -> ScmFit:
    if panel.treatment_start < 2:
        raise ValueError("need at least two pre-treatment years")
    if panel.J < 2:
        raise ValueError("need at least one comparison society")
    donors = panel.untreated_columns
    t0 = panel.treatment_start
    y = panel.outcomes
    X0 = y[:t0, donors]
    x1 = y[:t0, panel.treated_society]
    w, iters, ok = solve_simplex_ls(X0, x1)
    return ScmFit(
        weights=w, donors=tuple(panel.societies[j] for j in donors),
        pre_loss=float(np.linalg.norm(x1 - X0 @ w)),
        counterfactual=y[t0:, donors] @ w, post_years=panel.post_years,
        observed_post=y[t0:, panel.treated_society].copy(), iterations=iters, converged=ok)


def scm_effect(panel: PanelData) -> np.ndarray:
    return fit_scm(panel).effect


@dataclass(frozen=True)
class RelabelResult:
    """Outcome of refitting with every society in turn labelled as treated.

    ``rank`` counts the target in the reference set; ``rank_excluding_target``
    compares the target against the other societies only.
    """

    rank: float
    rank_excluding_target: float
    significant: bool
    effects: dict[str, np.ndarray]
    failures: dict[str, str] = field(default_factory=dict)
    target: str = ""
    years: tuple[int, ...] = ()


def relabel_significance(panel: PanelData,
                         effect_fn: Callable[[PanelData], np.ndarray] = scm_effect,
                         level: float = 0.95) -> RelabelResult:
    """Rank the target's mean absolute post-period effect among all societies.

    Failures of ``effect_fn`` on a relabeled panel are recorded and that
    society left out of the ranking; a failure on the target itself raises.
    """
    if panel.J < 2:
        raise ValueError("need at least two societies")
    target = panel.treated_society
    effects: dict[str, np.ndarray] = {}
    failures: dict[str, str] = {}
    for j in range(panel.J):
        name = panel.societies[j]
        try:
            effects[name] = np.asarray(effect_fn(relabel(panel, j)), dtype=float)
        except Exception as exc:  # noqa: BLE001 - recorded per society
            if j == target:
                raise
            log.warning("relabel run for %s failed: %s", name, exc)
            failures[name] = f"{type(exc).__name__}: {exc}"
    size = {k: float(np.mean(np.abs(v))) for k, v in effects.items()}
    tname = panel.societies[target]
    ref = size[tname]
    rank = sum(s <= ref for s in size.values()) / len(size)
    others = [s for k, s in size.items() if k != tname]
    rank_ex = sum(s <= ref for s in others) / len(others) if others else math.nan
    return RelabelResult(rank=rank, rank_excluding_target=rank_ex, significant=rank >= level,
                         effects=effects, failures=failures, target=tname,
                         years=panel.post_years)


def write_weights_csv(fit: ScmFit, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["society", "weight"])
        for name, wt in zip(fit.donors, fit.weights):
            w.writerow([name, repr(float(wt))])


def write_effects_csv(result: RelabelResult, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["society", "year", "effect"])
        for name, series in result.effects.items():
            for yr, e in zip(result.years, series):
                w.writerow([name, yr, repr(float(e))])
