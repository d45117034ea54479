"""Coupled Brownian increments on a dyadic lattice.

Every path owns a counter-based Philox stream keyed by ``(seed, path_index)``,
so path ``i`` can be regenerated in isolation and the result never depends on
how many paths were requested, in which order, or by how many workers.

Normals are produced by NumPy's ``Generator.standard_normal`` (ziggurat
transform) on top of the Philox bit stream. Bit-exact reproducibility holds
for a fixed NumPy build.

Coarser step sizes are obtained by summing consecutive fine increments, so
every scheme at every step size sees the same Brownian path.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "BrownianLattice",
    "IncrementView",
    "make_lattice",
    "coarsen",
    "coarse_increments",
    "gaussian_pair_stream",
    "step_count",
]

_MASK64 = (1 << 64) - 1


def gaussian_pair_stream(seed: int, path_index: int) -> np.random.Generator:
    """Return the standard-normal stream owned by ``(seed, path_index)``.

    The Philox key packs the path index in the high word and the seed in the
    low word; the counter starts at zero.
    """
    if path_index < 0:
        raise ConfigurationError(f"path_index must be nonnegative, got {path_index}")
    key = ((int(path_index) & _MASK64) << 64) | (int(seed) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


def step_count(t_end: float, h: float) -> int:
    """Number of steps of size ``h`` covering ``[0, t_end]``; must be an integer."""
    if not (t_end > 0 and h > 0):
        raise ConfigurationError(f"t_end and h must be positive (got t_end={t_end}, h={h})")
    n = int(round(t_end / h))
    if n < 1 or abs(n * h - t_end) > 1e-12 * t_end:
        raise ConfigurationError(f"t_end={t_end} is not an integer multiple of h={h}")
    return n


@dataclass(frozen=True)
class IncrementView:
    path_index: int
    step: int
    h_eff: float
    dW: np.ndarray


@dataclass(frozen=True)
class BrownianLattice:
    """Finest-resolution Gaussian increments for ``n_paths`` independent paths.

    Increments are regenerated on demand from the per-path streams; call
    :meth:`materialize` to keep the full array in memory. Both routes return
    bit-identical values.
    """

    seed: int
    n_paths: int
    t_end: float
    h_fine: float
    m: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_steps(self) -> int:
        return step_count(self.t_end, self.h_fine)

    def path_increments(self, path_index: int) -> np.ndarray:
        """Fine increments of one path, shape ``(n_steps, m)``."""
        if not 0 <= path_index < self.n_paths:
            raise IndexError(f"path {path_index} outside lattice of {self.n_paths} paths")
        cached = self._cache.get("increments")
        if cached is not None:
            return cached[path_index]
        return self._draw(path_index)

    def _draw(self, path_index: int) -> np.ndarray:
        z = gaussian_pair_stream(self.seed, path_index).standard_normal((self.n_steps, self.m))
        z *= np.sqrt(self.h_fine)
        return z

    def block(self, start: int, stop: int, workers: int = 1) -> np.ndarray:
        """Fine increments of paths ``start..stop-1``, shape ``(stop-start, n_steps, m)``."""
        start = max(0, start)
        stop = min(self.n_paths, stop)
        cached = self._cache.get("increments")
        if cached is not None:
            return cached[start:stop]
        out = np.empty((stop - start, self.n_steps, self.m))

        def fill(i):
            out[i - start] = self._draw(i)

        if workers <= 1:
            for i in range(start, stop):
                fill(i)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(fill, range(start, stop)))
        return out

    def materialize(self, workers: int = 1) -> "BrownianLattice":
        if "increments" not in self._cache:
            self._cache["increments"] = self.block(0, self.n_paths, workers=workers)
        return self

    @property
    def increments(self) -> np.ndarray:
        """All fine increments, shape ``(n_paths, n_steps, m)`` (materializes)."""
        return self.materialize()._cache["increments"]

    def endpoints(self, workers: int = 1) -> np.ndarray:
        """Brownian endpoints ``W_{t_end}`` per path, shape ``(n_paths, m)``."""
        return self.block(0, self.n_paths, workers).sum(axis=1)


def make_lattice(
    seed: int,
    n_paths: int,
    t_end: float,
    h_fine: float,
    m: int = 1,
    *,
    materialize: bool = False,
) -> BrownianLattice:
    if n_paths < 1:
        raise ConfigurationError(f"n_paths must be >= 1, got {n_paths}")
    if m < 1:
        raise ConfigurationError(f"noise dimension m must be >= 1, got {m}")
    step_count(t_end, h_fine)
    lattice = BrownianLattice(int(seed), int(n_paths), float(t_end), float(h_fine), int(m))
    if materialize:
        lattice.materialize()
    return lattice


def coarse_increments(fine: np.ndarray, factor: int) -> np.ndarray:
    """Sum groups of ``factor`` consecutive fine increments along the step axis.

    ``fine`` has shape ``(..., n_steps, m)``.
    """
    n = fine.shape[-2]
    if factor < 1 or n % factor:
        raise ConfigurationError(f"factor {factor} does not divide {n} fine steps")
    if factor == 1:
        return fine
    shape = fine.shape[:-2] + (n // factor, factor, fine.shape[-1])
    return fine.reshape(shape).sum(axis=-2)


def coarsen(lattice: BrownianLattice, factor: int) -> Iterator[IncrementView]:
    """Yield coarse increments path by path at step ``h_fine * factor``."""
    if factor < 1 or lattice.n_steps % factor:
        raise ConfigurationError(f"factor {factor} does not divide {lattice.n_steps} fine steps")
    h_eff = lattice.h_fine * factor
    for i in range(lattice.n_paths):
        coarse = coarse_increments(lattice.path_increments(i), factor)
        for k, dW in enumerate(coarse):
            yield IncrementView(i, k, h_eff, dW)
