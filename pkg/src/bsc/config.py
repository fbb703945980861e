"""Fixed prior constants of the BSC model and their config-file form."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = [
    "HyperParams",
    "ConfigError",
    "PRESETS",
    "preset",
    "parse_config",
    "write_config",
    "check_effect_prior",
]

log = logging.getLogger(__name__)

_SCALES = ("gamma_sigma", "delta_sd", "k_sd", "gamma_kappa", "alpha_sd", "b_sd",
           "gamma_beta", "pca_scale")


class ConfigError(ValueError):
    """Invalid hyperparameter configuration."""


@dataclass(frozen=True)
class HyperParams:
    """Every fixed constant of the prior.

    Scale-type fields must be strictly positive. ``n_factors`` is the number of
    latent factors ``L`` and ``pca_scale`` the multiplier applied to the PCA
    score standard deviations to obtain the factor prior scales.
    """

    gamma_sigma: float
    delta_mu: float
    delta_sd: float
    k_mu: float
    k_sd: float
    gamma_kappa: float
    alpha_mu: float
    alpha_sd: float
    b_mu: float
    b_sd: float
    gamma_beta: float
    n_factors: int
    pca_scale: float = 2.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "n_factors":
                if isinstance(v, bool) or int(v) != v:
                    raise ConfigError("n_factors must be an integer")
                object.__setattr__(self, f.name, int(v))
                continue
            if isinstance(v, bool) or not isinstance(v, (int, float, np.floating, np.integer)):
                raise ConfigError(f"{f.name} must be a real number, got {v!r}")
            v = float(v)
            if not np.isfinite(v):
                raise ConfigError(f"{f.name} must be finite")
            object.__setattr__(self, f.name, v)
        for name in _SCALES:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive, got {getattr(self, name)}")
        if self.n_factors < 1:
            raise ConfigError("n_factors must be >= 1")

    def replace(self, **changes) -> "HyperParams":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


KEYS = tuple(f.name for f in dataclasses.fields(HyperParams))

PRESETS: dict[str, dict] = {
    "germany": dict(
        gamma_sigma=500.0, delta_mu=0.0, delta_sd=10_000.0,
        k_mu=18_000.0, k_sd=6_000.0, gamma_kappa=2_500.0,
        alpha_mu=0.0, alpha_sd=30_000.0,
        b_mu=0.0, b_sd=1.0, gamma_beta=1.0,
        n_factors=4, pca_scale=2.0,
    ),
    "california": dict(
        gamma_sigma=10.0, delta_mu=0.0, delta_sd=30.0,
        k_mu=180.0, k_sd=90.0, gamma_kappa=90.0,
        alpha_mu=0.0, alpha_sd=500.0,
        b_mu=0.0, b_sd=1.0, gamma_beta=1.0,
        n_factors=8, pca_scale=2.0,
    ),
}


def preset(name: str) -> HyperParams:
    """Hyperparameters used for the German reunification or California tobacco study."""
    try:
        return HyperParams(**PRESETS[name.lower()])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def parse_config(path) -> HyperParams:
    """Read a TOML file of ``key = value`` pairs.

    Keys absent from the file are taken from the preset named by an optional
    ``preset`` key; without a preset every field must be given.
    """
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return config_from_mapping(raw)


def config_from_mapping(raw: dict) -> HyperParams:
    raw = dict(raw)
    base_name = raw.pop("preset", None)
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    values = dict(PRESETS[_preset_key(base_name)]) if base_name is not None else {}
    values.update(raw)
    missing = [k for k in KEYS if k not in values]
    if missing:
        raise ConfigError(f"missing config keys and no preset given: {missing}")
    return HyperParams(**values)


def _preset_key(name) -> str:
    if not isinstance(name, str) or name.lower() not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    return name.lower()


def write_config(hyper: HyperParams, path) -> None:
    """Write every field explicitly (no preset key), round-trip exact."""
    lines = []
    for k in KEYS:
        v = getattr(hyper, k)
        lines.append(f"{k} = {v}" if k == "n_factors" else f"{k} = {float(v)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def check_effect_prior(hyper: HyperParams, panel) -> bool:
    """Warn when the treatment-effect prior is not flat relative to the data.

    Returns True when ``alpha_sd`` is at least ten times the standard deviation of
    the treated society's pre-period outcomes.
    """
    pre = panel.outcomes[: panel.treatment_start, panel.treated_society]
    threshold = 10.0 * float(np.std(pre, ddof=1)) if pre.size > 1 else 0.0
    ok = hyper.alpha_sd >= threshold
    if not ok:
        log.warning("alpha_sd=%g is below 10x the treated pre-period sd (%g); "
                    "the effect prior may pull the counterfactual", hyper.alpha_sd, threshold)
    return ok
