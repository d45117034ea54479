"""Stochastic Jacobian, Malliavin derivative and Malliavin matrix of the Euler chain.

Matrix conventions follow the row-vector calculus used for these objects:
``J[i, j] = d Y^j / d y_i`` and ``D_r Y`` is ``m x d`` with
``D_r Y[k, j] = D^k_r Y^j``. One Euler step from ``Y_k`` with increment
``dW`` multiplies both from the right by

    S_k = I + h grad b + grad sigma . dW,   S_k[i, j] = delta_ij + h d_i b_j + sum_l d_i sigma_jl dW_l.

The Malliavin matrix ``G_t = int (D_r Y_t)^T D_r Y_t dr`` is a step sum since
``D_r Y_t`` is constant in ``r`` on each step.

The ``*_1d`` functions evaluate the scalar closed forms along a simulated
path, with time integrals taken by the left-endpoint rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .brownian import coarse_increments, make_lattice
from .divergence import fit_convergence_rate
from .errors import CapabilityError, ConfigurationError, DomainError, SingularityError
from .integrators import SchemeKind, integrate_paths
from .models import SdeModel

__all__ = [
    "MalliavinPathBundle",
    "ScalingProbeResult",
    "euler_path",
    "step_matrix",
    "build_bundle",
    "discrete_jacobian",
    "discrete_malliavin_derivative",
    "malliavin_matrix",
    "malliavin_matrix_recursive",
    "inverse_moment_probe",
    "jacobian_deviation_probe",
    "feedback_rate",
    "jacobian_closed_form_1d",
    "jacobian_variational_1d",
    "malliavin_closed_form_1d",
    "bump_jacobian",
    "bump_malliavin_derivative",
    "closed_form_crosscheck",
]


def euler_path(model: SdeModel, y, increments, h: float, a: float = 0.0):
    """Euler states at every grid time, shape ``(..., n + 1, d)``.

    ``increments`` is ``(n, m)`` for one path or ``(B, n, m)`` for a batch.
    """
    inc = np.asarray(increments, dtype=float)
    single = inc.ndim == 2
    if single:
        inc = inc[None]
    _, paths, _ = integrate_paths(model, SchemeKind.EULER_MARUYAMA, y, inc, h, t0=a, keep_paths=True)
    return paths[0] if single else paths


def step_matrix(model: SdeModel, t: float, y, h: float, dW):
    """Linearized one-step map ``S`` (row convention), shape ``(..., d, d)``."""
    model.require("drift_dx", "diffusion_dx")
    y = np.asarray(y, dtype=float)
    dW = np.asarray(dW, dtype=float)
    bx = np.swapaxes(model.drift_dx(t, y), -1, -2)
    sx = np.einsum("...jli,...l->...ij", model.diffusion_dx(t, y), dW)
    return np.eye(model.d) + h * bx + sx


def discrete_jacobian(model: SdeModel, path, increments, h: float, a: float = 0.0):
    """``J`` at every grid time: ``J_0 = I``, ``J_{k+1} = J_k S_k``."""
    path = np.asarray(path, dtype=float)
    increments = np.asarray(increments, dtype=float)
    n = increments.shape[-2]
    J = np.empty(path.shape[:-2] + (n + 1, model.d, model.d))
    J[..., 0, :, :] = np.eye(model.d)
    for k in range(n):
        S = step_matrix(model, a + k * h, path[..., k, :], h, increments[..., k, :])
        J[..., k + 1, :, :] = J[..., k, :, :] @ S
    return J


def discrete_malliavin_derivative(model: SdeModel, path, increments, h: float, r_step: int, a: float = 0.0):
    """``D_r Y`` at every grid time for ``r`` in the step ``(t_k, t_{k+1}]``, ``k = r_step``.

    Returns shape ``(..., n + 1, m, d)``: zero up to ``t_k``, ``sigma(t_k, Y_k)^T``
    at ``t_{k+1}``, then propagated by the step maps.
    """
    path = np.asarray(path, dtype=float)
    increments = np.asarray(increments, dtype=float)
    n = increments.shape[-2]
    if not 0 <= r_step < n:
        raise DomainError(f"r_step={r_step} outside the simulated window of {n} steps")
    D = np.zeros(path.shape[:-2] + (n + 1, model.m, model.d))
    tk = a + r_step * h
    D[..., r_step + 1, :, :] = np.swapaxes(model.diffusion(tk, path[..., r_step, :]), -1, -2)
    for k in range(r_step + 1, n):
        S = step_matrix(model, a + k * h, path[..., k, :], h, increments[..., k, :])
        D[..., k + 1, :, :] = D[..., k, :, :] @ S
    return D


@dataclass
class MalliavinPathBundle:
    """One Euler path with its Jacobian, Malliavin derivatives and Malliavin matrices.

    ``derivative[k, j]`` is ``D_r Y_{t_j}`` for ``r`` in step ``k``.
    """

    model: SdeModel
    h: float
    a: float
    y: np.ndarray
    path: np.ndarray
    increments: np.ndarray
    jacobian: np.ndarray
    derivative: np.ndarray
    gram: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    def time(self, j: int) -> float:
        return self.a + j * self.h


def malliavin_matrix(bundle: MalliavinPathBundle, t_index: int):
    """``G_t`` by the direct step sum ``sum_k h (D_k Y_t)^T D_k Y_t``."""
    if t_index < 0 or t_index > bundle.n_steps:
        raise DomainError(f"t_index={t_index} outside [0, {bundle.n_steps}]")
    D = bundle.derivative[:t_index, t_index]
    return bundle.h * np.einsum("kmi,kmj->ij", D, D) if t_index else np.zeros((bundle.model.d,) * 2)


def malliavin_matrix_recursive(model: SdeModel, path, increments, h: float, a: float = 0.0):
    """``G`` at every grid time via ``G_{n} = h Lambda_{n-1} + S^T G_{n-1} S``."""
    path = np.asarray(path, dtype=float)
    increments = np.asarray(increments, dtype=float)
    n = increments.shape[-2]
    G = np.zeros(path.shape[:-2] + (n + 1, model.d, model.d))
    for k in range(n):
        t = a + k * h
        sig = model.diffusion(t, path[..., k, :])
        S = step_matrix(model, t, path[..., k, :], h, increments[..., k, :])
        G[..., k + 1, :, :] = h * sig @ np.swapaxes(sig, -1, -2) + np.swapaxes(S, -1, -2) @ G[..., k, :, :] @ S
    return G


def build_bundle(model: SdeModel, y, increments, h: float, a: float = 0.0) -> MalliavinPathBundle:
    model.require("drift_dx", "diffusion_dx")
    increments = np.asarray(increments, dtype=float)
    y = np.asarray(y, dtype=float).reshape(model.d)
    path = euler_path(model, y, increments, h, a)
    n = increments.shape[0]
    J = discrete_jacobian(model, path, increments, h, a)
    D = np.stack([discrete_malliavin_derivative(model, path, increments, h, k, a) for k in range(n)])
    bundle = MalliavinPathBundle(model, h, a, y, path, increments, J, D, np.empty((n + 1, model.d, model.d)))
    for j in range(n + 1):
        bundle.gram[j] = malliavin_matrix(bundle, j)
    return bundle


# --- bump oracles --------------------------------------------------------------


def bump_jacobian(model: SdeModel, y, increments, h: float, delta: float = 1e-5, a: float = 0.0):
    """Central difference of the terminal state in each initial coordinate (row convention)."""
    y = np.asarray(y, dtype=float).reshape(model.d)
    rows = []
    for i in range(model.d):
        e = np.zeros(model.d)
        e[i] = delta
        hi = euler_path(model, y + e, increments, h, a)[-1]
        lo = euler_path(model, y - e, increments, h, a)[-1]
        rows.append((hi - lo) / (2 * delta))
    return np.stack(rows)


def bump_malliavin_derivative(model: SdeModel, y, increments, h: float, r_step: int,
                              eta: float = 1e-5, a: float = 0.0):
    """Central difference of the terminal state in the increment of step ``r_step``."""
    increments = np.asarray(increments, dtype=float)
    rows = []
    for k in range(model.m):
        up = increments.copy()
        dn = increments.copy()
        up[r_step, k] += eta
        dn[r_step, k] -= eta
        hi = euler_path(model, y, up, h, a)[-1]
        lo = euler_path(model, y, dn, h, a)[-1]
        rows.append((hi - lo) / (2 * eta))
    return np.stack(rows)


# --- scaling probes ----------------------------------------------------------


@dataclass
class ScalingProbeResult:
    """Monte-Carlo moments against elapsed time ``t - a`` with a log-log fit.

    ``rows`` holds ``(elapsed, estimate, stderr)``. ``envelope_constant`` is
    ``C = estimate(t_max) * (t_max - a)^(-power)``; ``envelope_ok`` says
    whether every estimate lies on or below ``C (t - a)^power``.
    """

    quantity: str
    p: float
    rows: list
    exponent: float
    intercept: float
    sample_count: int
    power: Optional[float] = None
    envelope_constant: Optional[float] = None
    envelope_ok: Optional[bool] = None
    meta: dict = field(default_factory=dict)


def _grid_indices(times: Sequence[float], h: float) -> list[int]:
    idx = []
    for t in times:
        k = int(round(t / h))
        if k < 1 or abs(k * h - t) > 1e-12 * max(1.0, t):
            raise ConfigurationError(f"probe time {t} is not a positive multiple of h={h}")
        idx.append(k)
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ConfigurationError("probe times must be strictly increasing")
    return idx


def _finish_probe(quantity, p, elapsed, samples, M, power, meta):
    est = samples.mean(axis=0)
    err = samples.std(axis=0, ddof=1) / np.sqrt(M) if M > 1 else np.zeros_like(est)
    rows = [(float(t), float(e), float(s)) for t, e, s in zip(elapsed, est, err)]
    if np.all(est > 0) and len(rows) >= 3:
        slope, intercept, _ = fit_convergence_rate([(t, e) for t, e, _ in reversed(rows)])
    else:
        slope, intercept = float("nan"), float("nan")
    res = ScalingProbeResult(quantity, p, rows, slope, intercept, M, power=power, meta=meta)
    if power is not None and est[-1] > 0:
        C = est[-1] * elapsed[-1] ** (-power)
        res.envelope_constant = float(C)
        res.envelope_ok = bool(np.all(est <= C * elapsed**power * (1 + 1e-12)))
    return res


def _probe_paths(model, y0, times, h, M, seed, block_size):
    idx = _grid_indices(times, h)
    lattice = make_lattice(seed, M, idx[-1] * h, h, model.m)
    for start in range(0, M, block_size):
        inc = lattice.block(start, start + block_size)
        path = euler_path(model, y0, inc, h)
        yield idx, inc, path


def inverse_moment_probe(model: SdeModel, p: float, times: Sequence[float], M: int, seed: int,
                         *, h: Optional[float] = None, y0=None, block_size: int = 4096) -> ScalingProbeResult:
    """Estimate ``E |G_t^{-1}|^p`` (spectral norm) at grid times ``t`` with ``a = 0``.

    Requires a model declaring a uniform ellipticity bound ``kappa > 0``.
    """
    if model.kappa is None or not model.kappa > 0:
        raise CapabilityError(f"model '{model.label}' declares no ellipticity bound kappa > 0")
    if len(times) < 4:
        raise ConfigurationError("inverse-moment probe needs at least 4 times")
    h = float(times[0]) if h is None else float(h)
    y0 = np.zeros(model.d) if y0 is None else np.asarray(y0, dtype=float).reshape(model.d)
    chunks = []
    for idx, inc, path in _probe_paths(model, y0, times, h, M, seed, block_size):
        G = malliavin_matrix_recursive(model, path, inc, h)[:, idx]
        lam_min = np.linalg.eigvalsh(G)[..., 0]
        if np.any(lam_min <= 0):
            raise SingularityError("singular Malliavin matrix for a uniformly elliptic model")
        chunks.append(lam_min ** (-p))
    samples = np.concatenate(chunks)
    elapsed = np.asarray(times, dtype=float)
    return _finish_probe("inverse_malliavin_matrix", p, elapsed, samples, M, -p,
                         {"model": model.label, "h": h, "seed": seed, "y0": y0.tolist()})


def jacobian_deviation_probe(model: SdeModel, times: Sequence[float], M: int, seed: int, p: int = 2,
                             *, h: Optional[float] = None, y0=None, block_size: int = 4096) -> ScalingProbeResult:
    """Estimate ``E |J_t - I|^p`` (spectral norm) at grid times ``t`` with ``a = 0``."""
    if p < 2 or int(p) != p or p % 2:
        raise ConfigurationError(f"p must be an even integer >= 2, got {p}")
    h = float(times[0]) if h is None else float(h)
    y0 = np.zeros(model.d) if y0 is None else np.asarray(y0, dtype=float).reshape(model.d)
    chunks = []
    for idx, inc, path in _probe_paths(model, y0, times, h, M, seed, block_size):
        J = discrete_jacobian(model, path, inc, h)[:, idx]
        dev = np.linalg.norm(J - np.eye(model.d), ord=2, axis=(-2, -1))
        chunks.append(dev**p)
    samples = np.concatenate(chunks)
    elapsed = np.asarray(times, dtype=float)
    return _finish_probe("jacobian_deviation", p, elapsed, samples, M, p / 2,
                         {"model": model.label, "h": h, "seed": seed, "y0": y0.tolist()})


# --- scalar closed forms --------------------------------------------------------


def _require_scalar(model: SdeModel):
    if model.d != 1 or model.m != 1:
        raise CapabilityError("closed forms are available for scalar models only")


def _scalar(fn, t, x):
    return np.asarray(fn(t, np.asarray(x, dtype=float)[..., None]), dtype=float).reshape(np.shape(x))


def feedback_rate(model: SdeModel, t: float, x):
    """``b' - (sigma'/sigma) b - sigma_t/sigma - sigma'' sigma / 2`` for a scalar model."""
    _require_scalar(model)
    model.require("drift_dx", "diffusion_dx", "diffusion_dt", "diffusion_dxx")
    x = np.asarray(x, dtype=float)
    sig = _scalar(model.diffusion, t, x)
    if np.any(sig == 0):
        raise SingularityError(f"diffusion vanishes at t={t}")
    b = _scalar(model.drift, t, x)
    bx = _scalar(model.drift_dx, t, x)
    sx = _scalar(model.diffusion_dx, t, x)
    st = _scalar(model.diffusion_dt, t, x)
    sxx = _scalar(model.diffusion_dxx, t, x)
    return bx - sx / sig * b - st / sig - 0.5 * sxx * sig


def _lambda_along(model, path, h, a):
    y = np.asarray(path, dtype=float)[..., 0]
    n = y.shape[-1] - 1
    lam = np.stack([feedback_rate(model, a + k * h, y[..., k]) for k in range(n)], axis=-1) if n else np.zeros(y.shape[:-1] + (0,))
    cum = np.zeros(y.shape)
    cum[..., 1:] = np.cumsum(lam * h, axis=-1)
    return y, cum


def jacobian_closed_form_1d(model: SdeModel, path, h: float, a: float = 0.0):
    """``J_t = sigma(t, Y_t)/sigma(a, y) exp(int_a^t lambda ds)`` at every grid time."""
    _require_scalar(model)
    y, cum = _lambda_along(model, path, h, a)
    times = a + h * np.arange(y.shape[-1])
    sig = np.stack([_scalar(model.diffusion, times[k], y[..., k]) for k in range(y.shape[-1])], axis=-1)
    if np.any(sig == 0):
        raise SingularityError("diffusion vanishes along the path")
    return sig / sig[..., :1] * np.exp(cum)


def jacobian_variational_1d(model: SdeModel, path, increments, h: float, a: float = 0.0):
    """Euler discretization of ``dJ = b' J dt + sigma' J dW``, ``J_a = 1``."""
    _require_scalar(model)
    model.require("drift_dx", "diffusion_dx")
    y = np.asarray(path, dtype=float)[..., 0]
    dW = np.asarray(increments, dtype=float)[..., 0]
    n = dW.shape[-1]
    J = np.ones(y.shape)
    for k in range(n):
        t = a + k * h
        J[..., k + 1] = J[..., k] * (1 + _scalar(model.drift_dx, t, y[..., k]) * h
                                     + _scalar(model.diffusion_dx, t, y[..., k]) * dW[..., k])
    return J


def malliavin_closed_form_1d(model: SdeModel, path, h: float, r_index: int, t_index: int, a: float = 0.0):
    """``D_r Y_t = sigma(t, Y_t) exp(int_r^t lambda ds)`` for grid times ``r <= t``.

    Cross-checked internally against ``sigma(r, Y_r) J_t / J_r``.
    """
    _require_scalar(model)
    if r_index > t_index:
        return np.zeros(np.shape(path)[:-2])
    y, cum = _lambda_along(model, path, h, a)
    sig_t = _scalar(model.diffusion, a + t_index * h, y[..., t_index])
    sig_r = _scalar(model.diffusion, a + r_index * h, y[..., r_index])
    if np.any(sig_t == 0) or np.any(sig_r == 0):
        raise SingularityError("diffusion vanishes along the path")
    value = sig_t * np.exp(cum[..., t_index] - cum[..., r_index])
    J = jacobian_closed_form_1d(model, path, h, a)
    chain = sig_r * J[..., t_index] / J[..., r_index]
    if not np.allclose(value, chain, rtol=1e-10, atol=0.0):
        raise ArithmeticError("closed-form Malliavin derivative disagrees with sigma(r) J_t / J_r")
    return value


@dataclass
class CrosscheckResult:
    """Closed-form vs Euler-chain discrepancies over a coupled step ladder.

    Each row is ``(h, jacobian, derivative_pairing, derivative_pointwise)``,
    all mean relative errors at ``t = T``. ``derivative_pairing`` compares
    ``int_{r0}^T D_r Y_T dr``; ``derivative_pointwise`` compares ``D_{r0} Y_T``.
    """

    rows: list
    rates: dict
    n_paths: int
    r0: float


def closed_form_crosscheck(model: SdeModel, y0, *, exponents=range(4, 10), n_paths: int = 100,
                           seed: int = 0, t_end: float = 1.0, r0: float = 0.25) -> CrosscheckResult:
    """Compare Appendix-style closed forms with the discrete recursions on coupled paths.

    Pointwise in ``r`` the two derivatives differ by ``O(h^{1/2})`` for
    multiplicative noise (the discrete one freezes ``sigma`` over the step
    containing ``r``); paired against ``dr`` the fluctuations average out.
    """
    _require_scalar(model)
    exponents = list(exponents)
    kmax = max(exponents)
    lattice = make_lattice(seed, n_paths, t_end, t_end * 2.0**-kmax, 1)
    fine = lattice.block(0, n_paths)
    rows = []
    for k in exponents:
        h = t_end * 2.0**-k
        inc = coarse_increments(fine, 2 ** (kmax - k))
        n = inc.shape[1]
        r_idx = int(round(r0 / h))
        if abs(r_idx * h - r0) > 1e-12 or not 0 <= r_idx < n:
            raise ConfigurationError(f"r0={r0} is not an interior grid time for h={h}")
        path = euler_path(model, y0, inc, h)
        jd = discrete_jacobian(model, path, inc, h)[:, -1, 0, 0]
        jc = jacobian_closed_form_1d(model, path, h)[:, -1]
        dd = np.stack([discrete_malliavin_derivative(model, path, inc, h, r)[:, -1, 0, 0]
                       for r in range(r_idx, n)], axis=1)
        dc = np.stack([malliavin_closed_form_1d(model, path, h, r, n) for r in range(r_idx, n)], axis=1)
        pair_d, pair_c = h * dd.sum(axis=1), h * dc.sum(axis=1)
        rows.append((
            h,
            float(np.mean(np.abs(jc - jd) / np.abs(jd))),
            float(np.mean(np.abs(pair_c - pair_d) / np.abs(pair_c))),
            float(np.mean(np.abs(dc[:, 0] - dd[:, 0]) / np.abs(dd[:, 0]))),
        ))
    names = ("jacobian", "derivative_pairing", "derivative_pointwise")
    rates = {name: fit_convergence_rate([(r[0], r[i + 1]) for r in rows])[0] for i, name in enumerate(names)}
    return CrosscheckResult(rows, rates, n_paths, r0)
