"""Decay profiles and one-sided exponential envelope fits."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .filter import fmt17

__all__ = ["DecayProfile", "DecayFit", "fit_exponential_decay", "hhat_exponent"]

# fraction of the largest value below which a point counts as numerically zero
_ZERO_FLOOR = 1e-13
ENVELOPE_SLACK = 1.05


@dataclass(frozen=True)
class DecayFit:
    prefactor: float
    rate: float
    quality: float
    envelope_ok: bool
    model: str = "pure-exp"
    eta1: float | None = None
    a_tilde: float | None = None

    def envelope(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.model == "pure-exp":
            return self.prefactor * np.exp(-self.rate * x)
        return self.prefactor * np.exp(-self.rate * hhat_exponent(x, 1.0, self.a_tilde))

    def to_dict(self) -> dict:
        out = {
            "prefactor": self.prefactor,
            "rate": self.rate,
            "quality": self.quality,
            "envelope_ok": self.envelope_ok,
            "model": self.model,
        }
        if self.model == "hhat-exp":
            out["eta1"] = self.eta1
            out["a_tilde"] = self.a_tilde
        return out


@dataclass(frozen=True)
class DecayProfile:
    """Measured norms against a distance or cutoff, with an optional fitted envelope."""

    abscissa: np.ndarray
    values: np.ndarray
    fit: DecayFit | None = None
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.abscissa, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if x.shape != v.shape:
            raise ValueError("abscissa and values differ in shape")
        if np.any(np.diff(x) <= 0):
            raise ValueError("abscissa must be strictly increasing")
        if np.any(v < 0):
            raise ValueError("profile values must be nonnegative")
        object.__setattr__(self, "abscissa", x)
        object.__setattr__(self, "values", v)

    @property
    def fit_c(self):
        return None if self.fit is None else self.fit.prefactor

    @property
    def fit_rate(self):
        return None if self.fit is None else self.fit.rate

    @property
    def fit_quality(self):
        return None if self.fit is None else self.fit.quality

    def with_fit(self, model: str = "pure-exp", **kw) -> "DecayProfile":
        return replace(self, fit=fit_exponential_decay(self, model, **kw))

    def is_nonincreasing(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.diff(self.values) <= tol))

    def write_csv(self, path: str | Path) -> None:
        env = self.fit.envelope(self.abscissa) if self.fit else np.full(self.values.shape, np.nan)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["abscissa", "value", "envelope_value"])
            for row in zip(self.abscissa, self.values, env):
                w.writerow([fmt17(v) for v in row])

    def write_fit_json(self, path: str | Path) -> None:
        if self.fit is None:
            raise ValueError("profile has no fit")
        Path(path).write_text(json.dumps(self.fit.to_dict(), indent=2, sort_keys=True) + "\n")


def hhat_exponent(x, eta1: float, a_tilde: float) -> np.ndarray:
    """h-hat(x) = eta1 * h(a_tilde x) with h(x) = x/ln^2 x above e^2, flat at e^2/4 below."""
    y = a_tilde * np.asarray(x, dtype=float)
    e2 = np.e**2
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(y > e2, y / np.log(np.maximum(y, e2)) ** 2, e2 / 4.0)
    return eta1 * h


def _linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    a = np.vstack([np.ones_like(x), x]).T
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    resid = y - a @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), r2


def fit_exponential_decay(
    profile: DecayProfile,
    model: str = "pure-exp",
    a_tilde_grid=None,
    floor: float | None = None,
) -> DecayFit:
    """Least squares on log-values.

    ``pure-exp`` fits value ~ C exp(-rate x). ``hhat-exp`` fits
    value ~ C exp(-eta1 h(a_tilde x)), scanning a_tilde on a grid and
    fitting (log C, eta1) linearly for each; the best r^2 wins.
    ``envelope_ok`` reports whether every measured point, zeros included,
    lies below 1.05 times the fitted envelope.
    """
    x = profile.abscissa
    v = profile.values
    if v.size == 0 or np.max(v) <= 0:
        raise ValueError("profile has no usable (nonzero) points")
    cut = floor if floor is not None else _ZERO_FLOOR * float(np.max(v))
    use = v > cut
    if np.count_nonzero(use) < 3:
        raise ValueError("need at least 3 nonzero points to fit")
    xs, ly = x[use], np.log(v[use])
    if model == "pure-exp":
        intercept, slope, r2 = _linear_fit(xs, ly)
        fit = DecayFit(float(np.exp(intercept)), -slope, r2, False, model)
    elif model == "hhat-exp":
        grid = np.geomspace(0.05, 20.0, 121) if a_tilde_grid is None else np.asarray(a_tilde_grid)
        best = None
        for at in grid:
            feat = hhat_exponent(xs, 1.0, at)
            if np.ptp(feat) == 0:
                continue
            intercept, slope, r2 = _linear_fit(feat, ly)
            if best is None or r2 > best[2]:
                best = (intercept, slope, r2, at)
        if best is None:
            raise ValueError("h-hat model is flat on this abscissa; no fit possible")
        intercept, slope, r2, at = best
        fit = DecayFit(float(np.exp(intercept)), -slope, r2, False, model, eta1=-slope, a_tilde=float(at))
    else:
        raise ValueError(f"unknown model {model!r}")
    env = fit.envelope(x)
    ok = bool(np.all(v <= ENVELOPE_SLACK * env))
    return replace(fit, envelope_ok=ok)


def one_sided_prefactor(x, values, exponent: Callable[[np.ndarray], np.ndarray]) -> float:
    """Smallest C with values <= C exp(exponent(x)) at every point."""
    values = np.asarray(values, dtype=float)
    e = exponent(np.asarray(x, dtype=float))
    with np.errstate(divide="ignore"):
        return float(np.max(values * np.exp(-e)))
