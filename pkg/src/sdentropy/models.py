"""SDE coefficient bundles and the benchmark models.

Array conventions (leading batch axes ``...`` broadcast freely):

- state ``x``: ``(..., d)``
- ``drift(t, x)``: ``(..., d)``
- ``diffusion(t, x)``: ``(..., d, m)``
- ``drift_dx(t, x)``: ``(..., d, d)`` with ``[i, j] = d b_i / d x_j``
- ``diffusion_dx(t, x)``: ``(..., d, m, d)`` with ``[i, k, j] = d sigma_ik / d x_j``
- ``diffusion_dt(t, x)``: ``(..., d, m)``
- ``diffusion_dxx(t, x)``: ``(..., d, m, d, d)``
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import CapabilityError, ConfigurationError, DomainError

__all__ = [
    "SdeModel",
    "GbmParams",
    "GlParams",
    "gbm_model",
    "tamed_gl_model",
    "tamed_saturation_1d_model",
    "elliptic_demo_model",
    "additive_model",
    "taming_term",
    "gbm_exact_terminal",
    "gbm_log_moments",
    "gbm_exact_density",
    "gbm_smoothed_density",
    "derivative_mismatch",
]

Coefficient = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SdeModel:
    label: str
    d: int
    m: int
    drift: Coefficient
    diffusion: Coefficient
    drift_dx: Optional[Coefficient] = None
    diffusion_dx: Optional[Coefficient] = None
    diffusion_dt: Optional[Coefficient] = None
    diffusion_dxx: Optional[Coefficient] = None
    diagonal_noise: bool = False
    kappa: Optional[float] = None  # uniform ellipticity bound, sigma sigma^T >= kappa I

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise CapabilityError(f"model '{self.label}' does not provide {', '.join(missing)}")

    def diffusion_diag(self, t, x):
        """Diagonal entries ``sigma_ii`` for diagonal-noise models, shape ``(..., d)``."""
        return np.diagonal(self.diffusion(t, x), axis1=-2, axis2=-1)


@dataclass(frozen=True)
class GbmParams:
    alpha: float = 0.6
    sigma: float = 0.1
    x0: float = 1.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigurationError(f"GBM volatility must be >= 0, got {self.sigma}")
        if self.x0 <= 0:
            raise ConfigurationError(f"GBM initial state must be > 0, got {self.x0}")


@dataclass(frozen=True)
class GlParams:
    alpha: float = 0.5
    beta: float = 1.0
    gamma: float = 3.0
    sigma: float = 0.5
    x0: float = 1.0
    y0: float = 1.0

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigurationError(f"saturation beta must be >= 0, got {self.beta}")


def _ones_like_batch(x, *trailing):
    return np.ones(np.shape(x)[:-1] + trailing)


def gbm_model(p: GbmParams) -> SdeModel:
    alpha, sigma = float(p.alpha), float(p.sigma)

    return SdeModel(
        label=f"gbm(alpha={alpha:g},sigma={sigma:g})",
        d=1,
        m=1,
        drift=lambda t, x: alpha * np.asarray(x, dtype=float),
        diffusion=lambda t, x: sigma * np.asarray(x, dtype=float)[..., None],
        drift_dx=lambda t, x: alpha * _ones_like_batch(x, 1, 1),
        diffusion_dx=lambda t, x: sigma * _ones_like_batch(x, 1, 1, 1),
        diffusion_dt=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1)),
        diffusion_dxx=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1, 1, 1)),
        diagonal_noise=True,
    )


def taming_term(u):
    """Globally Lipschitz replacement ``u^3 / (1 + u^2)`` of a cubic."""
    u = np.asarray(u, dtype=float)
    return u**3 / (1.0 + u * u)


def _taming_term_du(u):
    u2 = u * u
    return (3.0 * u2 + u2 * u2) / (1.0 + u2) ** 2


def tamed_gl_model(p: GlParams) -> SdeModel:
    """Two-component Ginzburg-Landau system with tamed cubic saturation.

    Each component carries its own multiplicative noise ``sigma * x_i dW^i``.
    """
    a, b, g, s = float(p.alpha), float(p.beta), float(p.gamma), float(p.sigma)

    def drift(t, x):
        x = np.asarray(x, dtype=float)
        u, v = x[..., 0], x[..., 1]
        return np.stack([a * u - g * v - b * taming_term(u), a * v + g * u - b * taming_term(v)], axis=-1)

    def diffusion(t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (2,))
        out[..., 0, 0] = s * x[..., 0]
        out[..., 1, 1] = s * x[..., 1]
        return out

    def drift_dx(t, x):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape + (2,))
        out[..., 0, 0] = a - b * _taming_term_du(x[..., 0])
        out[..., 0, 1] = -g
        out[..., 1, 0] = g
        out[..., 1, 1] = a - b * _taming_term_du(x[..., 1])
        return out

    def diffusion_dx(t, x):
        out = np.zeros(np.shape(x)[:-1] + (2, 2, 2))
        out[..., 0, 0, 0] = s
        out[..., 1, 1, 1] = s
        return out

    return SdeModel(
        label=f"tamed_gl(alpha={a:g},beta={b:g},gamma={g:g},sigma={s:g})",
        d=2,
        m=2,
        drift=drift,
        diffusion=diffusion,
        drift_dx=drift_dx,
        diffusion_dx=diffusion_dx,
        diffusion_dt=lambda t, x: np.zeros(np.shape(x)[:-1] + (2, 2)),
        diffusion_dxx=lambda t, x: np.zeros(np.shape(x)[:-1] + (2, 2, 2, 2)),
        diagonal_noise=True,
    )


def tamed_saturation_1d_model(alpha: float = 0.5, beta: float = 1.0, sigma: float = 0.5) -> SdeModel:
    """Scalar tamed model ``dX = (alpha X - beta X^3/(1+X^2)) dt + sigma X dW``.

    Multiplicative noise with nonlinear drift; ``d^2 sigma / dx^2 = 0``.
    """
    a, b, s = float(alpha), float(beta), float(sigma)
    return SdeModel(
        label=f"tamed_1d(alpha={a:g},beta={b:g},sigma={s:g})",
        d=1,
        m=1,
        drift=lambda t, x: a * np.asarray(x, dtype=float) - b * taming_term(x),
        diffusion=lambda t, x: s * np.asarray(x, dtype=float)[..., None],
        drift_dx=lambda t, x: (a - b * _taming_term_du(np.asarray(x, dtype=float)))[..., None],
        diffusion_dx=lambda t, x: s * _ones_like_batch(x, 1, 1, 1),
        diffusion_dt=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1)),
        diffusion_dxx=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1, 1, 1)),
        diagonal_noise=True,
    )


def elliptic_demo_model() -> SdeModel:
    """``dX = -X dt + sqrt(1 + X^2) dW``: diffusion bounded below, kappa = 1."""

    def sig(x):
        return np.sqrt(1.0 + np.asarray(x, dtype=float) ** 2)

    return SdeModel(
        label="elliptic(b=-x,sigma=sqrt(1+x^2))",
        d=1,
        m=1,
        drift=lambda t, x: -np.asarray(x, dtype=float),
        diffusion=lambda t, x: sig(x)[..., None],
        drift_dx=lambda t, x: -_ones_like_batch(x, 1, 1),
        diffusion_dx=lambda t, x: (np.asarray(x, dtype=float) / sig(x))[..., None, None],
        diffusion_dt=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1)),
        diffusion_dxx=lambda t, x: (sig(x) ** -3)[..., None, None, None],
        diagonal_noise=True,
        kappa=1.0,
    )


def additive_model(d: int = 1, scale: float = 1.0) -> SdeModel:
    """Driftless model with constant diffusion ``scale * I``."""
    c = float(scale)
    eye = np.eye(d)
    return SdeModel(
        label=f"additive(d={d},sigma={c:g})",
        d=d,
        m=d,
        drift=lambda t, x: np.zeros(np.shape(x)),
        diffusion=lambda t, x: c * np.broadcast_to(eye, np.shape(x)[:-1] + (d, d)).copy(),
        drift_dx=lambda t, x: np.zeros(np.shape(x)[:-1] + (d, d)),
        diffusion_dx=lambda t, x: np.zeros(np.shape(x)[:-1] + (d, d, d)),
        diffusion_dt=lambda t, x: np.zeros(np.shape(x)[:-1] + (d, d)),
        diffusion_dxx=lambda t, x: np.zeros(np.shape(x)[:-1] + (d, d, d, d)),
        diagonal_noise=True,
        kappa=c * c if c != 0 else None,
    )


# --- exact GBM law ---------------------------------------------------------


def gbm_exact_terminal(p: GbmParams, T: float, w_T):
    """Strong solution ``x0 exp((alpha - sigma^2/2) T + sigma w_T)``."""
    if T < 0:
        raise DomainError(f"T must be >= 0, got {T}")
    w_T = np.asarray(w_T, dtype=float)
    return p.x0 * np.exp((p.alpha - 0.5 * p.sigma**2) * T + p.sigma * w_T)


def gbm_log_moments(p: GbmParams, T: float) -> tuple[float, float]:
    """Mean and standard deviation of ``log X_T``."""
    return math.log(p.x0) + (p.alpha - 0.5 * p.sigma**2) * T, p.sigma * math.sqrt(T)


def gbm_exact_density(p: GbmParams, T: float, x):
    """Lognormal density of ``X_T``."""
    if T <= 0 or p.sigma <= 0:
        raise DomainError("exact GBM density needs T > 0 and sigma > 0")
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise DomainError("GBM density is only defined for x > 0")
    mu, s = gbm_log_moments(p, T)
    z = (np.log(x) - mu) / s
    return np.exp(-0.5 * z * z) / (x * s * math.sqrt(2.0 * math.pi))


def gbm_smoothed_density(p: GbmParams, T: float, x, bandwidth: float, n_nodes: int = 4001):
    """Exact GBM law convolved with a Gaussian kernel of width ``bandwidth``.

    This is the expectation of a Gaussian KDE built from exact samples, so
    it carries the same smoothing bias as any KDE it is compared against.
    The integral over the log-variable is done with the trapezoid rule on
    ``[-10, 10]`` standard deviations.
    """
    if bandwidth <= 0:
        raise DomainError(f"bandwidth must be positive, got {bandwidth}")
    x = np.asarray(x, dtype=float)
    mu, s = gbm_log_moments(p, T)
    z = np.linspace(-10.0, 10.0, n_nodes)
    w = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi) * (z[1] - z[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    y = np.exp(mu + s * z)
    out = np.empty(x.shape)
    flat = x.reshape(-1)
    res = out.reshape(-1)
    for i in range(0, flat.size, 256):
        u = (flat[i : i + 256, None] - y[None, :]) / bandwidth
        res[i : i + 256] = (np.exp(-0.5 * u * u) @ w) / (bandwidth * math.sqrt(2.0 * math.pi))
    return out


# --- finite-difference checks ------------------------------------------------


def derivative_mismatch(model: SdeModel, points, t: float = 0.0, step: float = 1e-5) -> dict[str, float]:
    """Max relative error of analytic spatial derivatives against central differences.

    Relative error is measured against ``max(1, |analytic|)``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = {}
    pairs = [("drift_dx", model.drift), ("diffusion_dx", model.diffusion)]
    if model.diffusion_dxx is not None and model.diffusion_dx is not None:
        pairs.append(("diffusion_dxx", model.diffusion_dx))
    for name, base in pairs:
        analytic = getattr(model, name)
        if analytic is None:
            continue
        a = analytic(t, points)
        cols = []
        for j in range(model.d):
            e = np.zeros(model.d)
            e[j] = step
            cols.append((base(t, points + e) - base(t, points - e)) / (2 * step))
        fd = np.stack(cols, axis=-1)
        out[name] = float(np.max(np.abs(a - fd) / np.maximum(1.0, np.abs(a))))
    if model.diffusion_dt is not None:
        fd = (model.diffusion(t + step, points) - model.diffusion(t - step, points)) / (2 * step)
        a = model.diffusion_dt(t, points)
        out["diffusion_dt"] = float(np.max(np.abs(a - fd) / np.maximum(1.0, np.abs(a))))
    return out
