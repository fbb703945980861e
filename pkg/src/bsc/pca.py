"""PCA-anchored prior for the latent factor trajectories."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .panel import PanelData

__all__ = ["FactorPrior", "fit_pca_prior", "pca_scores"]


@dataclass(frozen=True)
class FactorPrior:
    """Gaussian prior for the ``T x L`` factor matrix.

    ``means[:, m]`` is the prior mean trajectory of factor ``m`` and ``sds[m]``
    its (time-constant) prior standard deviation.
    """

    means: np.ndarray
    sds: np.ndarray
    explained_variance_ratio: np.ndarray

    def __post_init__(self):
        means = np.array(self.means, dtype=float, ndmin=2)
        sds = np.array(self.sds, dtype=float, ndmin=1)
        evr = np.array(self.explained_variance_ratio, dtype=float, ndmin=1)
        if means.shape[1] != sds.shape[0]:
            raise ValueError("means and sds disagree on the number of factors")
        if np.any(sds <= 0):
            raise ValueError("factor prior sds must be positive")
        for name, arr in (("means", means), ("sds", sds), ("explained_variance_ratio", evr)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.means.shape[0]

    @property
    def L(self) -> int:
        return self.means.shape[1]

    @classmethod
    def empty(cls, T: int) -> "FactorPrior":
        """A prior with no factors (``L = 0``)."""
        return cls(np.zeros((T, 0)), np.zeros(0), np.zeros(0))


def pca_scores(x: np.ndarray):
    """Thin SVD of the column-centred ``x`` with a deterministic sign convention.

    Returns ``(scores, singular_values, components)`` where ``scores = U * S``
    and each right singular vector has its largest-magnitude entry positive.
    """
    xc = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    idx = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(vt.shape[0]), idx])
    signs[signs == 0] = 1.0
    u = u * signs
    vt = vt * signs[:, None]
    return u * s, s, vt.T


def fit_pca_prior(panel: PanelData, L: int, lam: float = 2.0, *,
                  pre_period_only: bool = False) -> FactorPrior:
    """Factor prior from the untreated societies' outcomes.

    Parameters
    ----------
    panel : PanelData
        The treated society's column is excluded entirely.
    L : int
        Number of factors; must be below the number of untreated societies and
        not exceed ``T``.
    lam : float
        Prior sd multiplier, ``sds[m] = lam * sd(score_m)`` (population sd).
    pre_period_only : bool
        Fit the decomposition on years before ``T0`` only, then project every
        year onto the resulting components.
    """
    untreated = panel.outcomes[:, panel.untreated_columns]
    n_untreated = untreated.shape[1]
    if not 1 <= L < n_untreated:
        raise ValueError(f"L={L} must satisfy 1 <= L < {n_untreated} untreated societies")
    if L > panel.T:
        raise ValueError(f"L={L} exceeds the number of years {panel.T}")
    if not lam > 0:
        raise ValueError("lam must be positive")

    fit_rows = untreated[: panel.treatment_start] if pre_period_only else untreated
    if L > min(fit_rows.shape):
        raise ValueError(f"L={L} exceeds the rank bound of the fitted block {fit_rows.shape}")
    scores, s, comps = pca_scores(fit_rows)
    total = float(np.sum(s ** 2))
    if total <= 0 or s[L - 1] <= s[0] * 1e-12:
        raise ValueError("untreated data has too little variance for the requested factors")
    if pre_period_only:
        scores = (untreated - fit_rows.mean(axis=0)) @ comps
    means = scores[:, :L]
    sds = lam * means.std(axis=0)
    return FactorPrior(means, sds, (s[:L] ** 2) / total)
