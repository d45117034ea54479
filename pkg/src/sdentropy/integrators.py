"""Euler-Maruyama and diagonal Milstein step maps and ensemble drivers."""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .brownian import BrownianLattice, coarse_increments
from .errors import CapabilityError, ConfigurationError, DomainError, NumericalOverflowError
from .models import SdeModel

__all__ = [
    "SchemeKind",
    "PathEnsemble",
    "euler_step",
    "milstein_step_diag",
    "interpolate",
    "simulate_ensemble",
    "simulate_coupled",
    "integrate_paths",
]


class SchemeKind(str, enum.Enum):
    EULER_MARUYAMA = "euler"
    MILSTEIN = "milstein"


@dataclass
class PathEnsemble:
    label: str
    scheme: SchemeKind
    h: float
    T: float
    seed: int
    terminals: np.ndarray  # (M, d)
    paths: Optional[np.ndarray] = None  # (M, n_steps + 1, d) when requested
    failed: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    failed_steps: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    @property
    def n_paths(self) -> int:
        return self.terminals.shape[0]

    @property
    def valid_terminals(self) -> np.ndarray:
        """Terminals of the paths that stayed finite."""
        if self.failed.size == 0:
            return self.terminals
        return np.delete(self.terminals, self.failed, axis=0)


def _check_finite(out, t, x):
    if not np.all(np.isfinite(out)):
        raise NumericalOverflowError(f"non-finite state after step from t={t}", t=t, x=x)
    return out


def _diffusion_times_dw(model: SdeModel, t, x, dW):
    if model.diagonal_noise and model.d == model.m:
        return model.diffusion_diag(t, x) * dW
    return np.einsum("...ik,...k->...i", model.diffusion(t, x), dW)


def euler_step(model: SdeModel, t: float, x, h: float, dW, *, check: bool = True):
    """One Euler-Maruyama step ``x + h b(t, x) + sigma(t, x) dW``."""
    if not h > 0:
        raise DomainError(f"step size must be positive, got {h}")
    x = np.asarray(x, dtype=float)
    dW = np.asarray(dW, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = x + h * model.drift(t, x) + _diffusion_times_dw(model, t, x, dW)
    return _check_finite(out, t, x) if check else out


def _milstein_correction(model: SdeModel, t, x, h, dW):
    sig = model.diffusion_diag(t, x)
    dsig = np.diagonal(np.diagonal(model.diffusion_dx(t, x), axis1=-3, axis2=-2), axis1=-2, axis2=-1)
    return 0.5 * sig * dsig * (dW * dW - h)


def milstein_step_diag(model: SdeModel, t: float, x, h: float, dW, *, check: bool = True):
    """Milstein step for diagonal noise (no Levy areas needed).

    Adds ``0.5 sigma_i d_i sigma_i (dW_i^2 - h)`` to each coordinate of the
    Euler step.
    """
    if model.diffusion_dx is None:
        raise CapabilityError(f"model '{model.label}' has no diffusion_dx; Milstein unavailable")
    if not model.diagonal_noise or model.d != model.m:
        raise CapabilityError("Milstein is implemented for diagonal noise only")
    x = np.asarray(x, dtype=float)
    dW = np.asarray(dW, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = euler_step(model, t, x, h, dW, check=False) + _milstein_correction(model, t, x, h, dW)
    return _check_finite(out, t, x) if check else out


def interpolate(x_k, t_k: float, t: float, model: SdeModel, dW_partial, h: Optional[float] = None):
    """Time-continuous Euler interpolation on ``[t_k, t_k + h]``.

    Coefficients are frozen at ``(t_k, x_k)``; ``dW_partial`` is ``W_t - W_{t_k}``.
    Reproduces :func:`euler_step` exactly at ``t = t_k + h``.
    """
    if t < t_k or (h is not None and t > t_k + h):
        raise DomainError(f"t={t} outside the step [{t_k}, {t_k if h is None else t_k + h}]")
    x_k = np.asarray(x_k, dtype=float)
    if t == t_k:
        return x_k.copy()
    return euler_step(model, t_k, x_k, t - t_k, dW_partial)


_STEPPERS = {
    SchemeKind.EULER_MARUYAMA: euler_step,
    SchemeKind.MILSTEIN: milstein_step_diag,
}


def integrate_paths(model: SdeModel, scheme: SchemeKind, x0, increments, h: float, t0: float = 0.0,
                    keep_paths: bool = False):
    """Iterate a step map over a block of increments.

    ``increments`` has shape ``(B, n_steps, m)``. Returns ``(terminals,
    paths_or_None, failed_step)`` where ``failed_step[b]`` is the first step
    index producing a non-finite state, or -1. Failed paths are frozen at
    NaN from that step on.
    """
    scheme = SchemeKind(scheme)
    if scheme is SchemeKind.MILSTEIN:
        model.require("diffusion_dx")
    step = _STEPPERS[scheme]
    B, n, _ = increments.shape
    x = np.broadcast_to(np.asarray(x0, dtype=float), (B, model.d)).copy()
    failed = np.full(B, -1, dtype=int)
    paths = np.empty((B, n + 1, model.d)) if keep_paths else None
    if keep_paths:
        paths[:, 0] = x
    for k in range(n):
        with np.errstate(over="ignore", invalid="ignore"):
            x = step(model, t0 + k * h, x, h, increments[:, k], check=False)
        bad = ~np.all(np.isfinite(x), axis=-1)
        if bad.any():
            newly = bad & (failed < 0)
            failed[newly] = k
        if keep_paths:
            paths[:, k + 1] = x
    return x, paths, failed


def _validate_factors(lattice: BrownianLattice, factors: Sequence[int]):
    for f in factors:
        if f < 1 or lattice.n_steps % f:
            raise ConfigurationError(f"factor {f} does not divide {lattice.n_steps} fine steps")


def simulate_coupled(
    model: SdeModel,
    runs: Sequence[tuple[SchemeKind, int]],
    lattice: BrownianLattice,
    x0,
    *,
    block_size: int = 2048,
    workers: int = 1,
    keep_paths: bool = False,
    overflow_tolerance: float = 1e-4,
) -> list[PathEnsemble]:
    """Simulate several (scheme, coarsening factor) runs on one lattice.

    Each block of paths is drawn once and shared by every run, so the
    fine reference and all coarse runs see the same Brownian paths.
    Results are written by path index, so they do not depend on ``workers``.
    """
    if model.m != lattice.m:
        raise ConfigurationError(f"model noise dimension {model.m} != lattice dimension {lattice.m}")
    _validate_factors(lattice, [f for _, f in runs])
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (model.d,) or not np.all(np.isfinite(x0)):
        raise ConfigurationError(f"x0 must be a finite vector of length {model.d}")
    M = lattice.n_paths
    terminals = [np.empty((M, model.d)) for _ in runs]
    paths = [np.empty((M, lattice.n_steps // f + 1, model.d)) if keep_paths else None for _, f in runs]
    failed = [np.full(M, -1, dtype=int) for _ in runs]

    def work(start):
        stop = min(M, start + block_size)
        fine = lattice.block(start, stop)
        for r, (scheme, f) in enumerate(runs):
            inc = coarse_increments(fine, f)
            xt, pt, fl = integrate_paths(model, scheme, x0, inc, lattice.h_fine * f, keep_paths=keep_paths)
            terminals[r][start:stop] = xt
            failed[r][start:stop] = fl
            if keep_paths:
                paths[r][start:stop] = pt

    starts = range(0, M, block_size)
    if workers <= 1:
        for s in starts:
            work(s)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, starts))

    out = []
    for r, (scheme, f) in enumerate(runs):
        h = lattice.h_fine * f
        bad = np.flatnonzero(failed[r] >= 0)
        if bad.size > overflow_tolerance * M:
            raise NumericalOverflowError(
                f"{bad.size} of {M} paths overflowed for scheme={SchemeKind(scheme).value}, h={h:g}",
                step=int(failed[r][bad[0]]),
            )
        out.append(PathEnsemble(
            label=model.label,
            scheme=SchemeKind(scheme),
            h=h,
            T=lattice.t_end,
            seed=lattice.seed,
            terminals=terminals[r],
            paths=paths[r],
            failed=bad,
            failed_steps=failed[r][bad],
        ))
    return out


def simulate_ensemble(
    model: SdeModel,
    scheme: SchemeKind,
    lattice: BrownianLattice,
    factor: int,
    x0,
    **kwargs,
) -> PathEnsemble:
    """Terminal states of ``lattice.n_paths`` paths at step ``h_fine * factor``."""
    return simulate_coupled(model, [(scheme, factor)], lattice, x0, **kwargs)[0]
