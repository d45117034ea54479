"""Distances between discretized densities and log-log rate fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .density import DensityEstimate, normalize
from .errors import ConfigurationError, DomainError

__all__ = [
    "DivergenceValue",
    "ConvergenceReport",
    "relative_entropy",
    "relative_entropies",
    "total_variation",
    "pinsker_margin",
    "wasserstein1_1d",
    "fit_convergence_rate",
    "METRICS",
]

METRICS = ("KL_raw", "KL_normalized", "TV", "W1")


@dataclass(frozen=True)
class DivergenceValue:
    metric: str
    value: float
    epsilon: Optional[float] = None
    grid_id: Optional[str] = None


@dataclass
class ConvergenceReport:
    """Divergence per step size plus the fitted empirical order.

    ``rows`` are dicts keyed by ``"h"`` and the metric names; the slope
    is fitted on ``fit_metric``.
    """

    rows: list
    fit_metric: str
    slope: float
    intercept: float
    residual_max: float
    reference: dict = field(default_factory=dict)
    extra_slopes: dict = field(default_factory=dict)


def _check_pair(p: DensityEstimate, q: DensityEstimate):
    if not p.grid.same_as(q.grid):
        raise ConfigurationError("densities live on different grids")


def _clamped_kl(p, q, w, eps):
    pc = np.maximum(p, eps)
    qc = np.maximum(q, eps)
    return float(np.sum(pc * np.log(pc / qc) * w))


def relative_entropy(p_hat: DensityEstimate, p_ref: DensityEstimate, epsilon: float = 1e-10,
                     *, normalized: bool = True) -> DivergenceValue:
    """Discretized ``sum_i max(p_i, eps) log(max(p_i, eps) / max(q_i, eps)) dx_i``.

    With ``normalized=False`` the raw KDE values are used as they are;
    otherwise both inputs are first rescaled to unit quadrature mass.
    """
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    _check_pair(p_hat, p_ref)
    if normalized:
        p_hat, p_ref = normalize(p_hat), normalize(p_ref)
    value = _clamped_kl(p_hat.values, p_ref.values, p_hat.grid.weights, epsilon)
    return DivergenceValue("KL_normalized" if normalized else "KL_raw", value, epsilon, p_hat.grid.digest())


def relative_entropies(p_hat: DensityEstimate, p_ref: DensityEstimate, epsilon: float = 1e-10) -> dict:
    """Both the raw and the normalized relative entropy, keyed by metric name."""
    return {
        "KL_raw": relative_entropy(p_hat, p_ref, epsilon, normalized=False),
        "KL_normalized": relative_entropy(p_hat, p_ref, epsilon, normalized=True),
    }


def total_variation(p: DensityEstimate, q: DensityEstimate, *, normalized: bool = True) -> DivergenceValue:
    """``0.5 sum_i |p_i - q_i| dx_i``."""
    _check_pair(p, q)
    if normalized:
        p, q = normalize(p), normalize(q)
    value = 0.5 * float(np.sum(np.abs(p.values - q.values) * p.grid.weights))
    return DivergenceValue("TV", value, None, p.grid.digest())


def pinsker_margin(p: DensityEstimate, q: DensityEstimate, epsilon: float = 1e-10) -> float:
    """``sqrt(2 KL) - TV``; nonnegative up to clamping and quadrature slack."""
    kl = relative_entropy(p, q, epsilon, normalized=True).value
    tv = total_variation(p, q).value
    return math.sqrt(2.0 * max(kl, 0.0)) - tv


def wasserstein1_1d(samples_a, samples_b) -> DivergenceValue:
    """Exact W1 between two empirical measures: ``int |F_a - F_b| dx``."""
    a = np.sort(np.asarray(samples_a, dtype=float).reshape(-1))
    b = np.sort(np.asarray(samples_b, dtype=float).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise DomainError("W1 needs nonempty sample sets")
    pts = np.concatenate([a, b])
    pts.sort(kind="mergesort")
    gaps = np.diff(pts)
    left = pts[:-1]
    fa = np.searchsorted(a, left, side="right") / a.size
    fb = np.searchsorted(b, left, side="right") / b.size
    return DivergenceValue("W1", float(np.sum(np.abs(fa - fb) * gaps)))


def fit_convergence_rate(rows: Sequence[tuple[float, float]]) -> tuple[float, float, float]:
    """Least-squares line through ``(log h, log value)``.

    Returns ``(slope, intercept, residual_max)``; the slope is the empirical
    order and ``residual_max`` is measured in log space.
    """
    if len(rows) < 3:
        raise ConfigurationError(f"need >= 3 rows to fit a slope, got {len(rows)}")
    h = np.array([r[0] for r in rows], dtype=float)
    v = np.array([r[1] for r in rows], dtype=float)
    if np.any(np.diff(h) >= 0):
        raise ConfigurationError("step sizes must be strictly decreasing")
    if np.any(h <= 0) or np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise DomainError("log-log fit needs positive finite step sizes and values")
    x, y = np.log(h), np.log(v)
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    return float(slope), float(intercept), float(np.max(np.abs(resid)))
