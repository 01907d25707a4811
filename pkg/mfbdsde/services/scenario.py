"""
Time grids and dual Brownian drivers.

Increments come from numpy's Philox counter-based generator. Every
(driver, group, particle) stream is keyed by the seed and a counter prefix,
so any increment can be regenerated on its own and parallel generation
gives the same arrays regardless of worker count or order.
"""

import logging
from typing import Optional

import numpy as np
from joblib import Parallel, delayed

from ..model.errors import InvalidArgumentError, ShapeError
from ..model.types import DriverPaths, ScenarioEnsemble, TimeGrid


logger = logging.getLogger(__name__)

FORWARD_TAG = 0
BACKWARD_TAG = 1
# fresh forward streams (query particles) start here
FRESH_TAG_BASE = 16

_KEY_MASK = (1 << 128) - 1
_WORD_MASK = (1 << 64) - 1


def _stream(seed: int, tag: int, group: int, particle: int) -> np.random.Generator:
    counter = ((tag & _WORD_MASK) << 192) | ((group & _WORD_MASK) << 128) | ((particle & _WORD_MASK) << 64)
    return np.random.Generator(np.random.Philox(key=seed & _KEY_MASK, counter=counter))


def _draw(seed: int, tag: int, group: int, particle: int, n_steps: int, scale: float) -> np.ndarray:
    return _stream(seed, tag, group, particle).standard_normal(n_steps) * scale


def _forward_block(seed: int, tag: int, group: int, k_inner: int, n_steps: int, scale: float) -> np.ndarray:
    block = np.empty((k_inner, n_steps))
    for particle in range(k_inner):
        block[particle] = _draw(seed, tag, group, particle, n_steps, scale)
    return block


def _forward_increments(grid: TimeGrid, m_outer: int, k_inner: int, seed: int, tag: int, threads: int) -> np.ndarray:
    scale = float(np.sqrt(grid.dt))
    if threads > 1 and m_outer > 1:
        blocks = Parallel(n_jobs=threads, backend="threading")(
            delayed(_forward_block)(seed, tag, g, k_inner, grid.n_steps, scale) for g in range(m_outer)
        )
    else:
        blocks = [_forward_block(seed, tag, g, k_inner, grid.n_steps, scale) for g in range(m_outer)]
    return np.stack(blocks)


def sample_ensemble(grid: TimeGrid, m_outer: int, k_inner: int, seed: int, threads: int = 1) -> ScenarioEnsemble:
    """Draw forward and backward increments for m_outer groups of k_inner particles"""
    if m_outer < 1 or k_inner < 1:
        raise InvalidArgumentError(f"particle counts must be >= 1, got m_outer={m_outer}, k_inner={k_inner}")
    if seed < 0:
        raise InvalidArgumentError(f"seed must be nonnegative, got {seed}")

    scale = float(np.sqrt(grid.dt))
    dW = _forward_increments(grid, m_outer, k_inner, seed, FORWARD_TAG, threads)
    dB = np.stack([_draw(seed, BACKWARD_TAG, g, 0, grid.n_steps, scale) for g in range(m_outer)])

    logger.debug(f"Sampled ensemble {m_outer}x{k_inner} over {grid.n_steps} steps (seed={seed})")
    return ScenarioEnsemble(grid=grid, m_outer=m_outer, k_inner=k_inner, dW=dW, dB=dB, seed=seed)


def with_fresh_forward(ens: ScenarioEnsemble, stream: int = 0, threads: int = 1) -> ScenarioEnsemble:
    """Same backward groups, new forward particles from an independent stream"""
    if stream < 0:
        raise InvalidArgumentError(f"stream must be nonnegative, got {stream}")
    dW = _forward_increments(ens.grid, ens.m_outer, ens.k_inner, ens.seed, FRESH_TAG_BASE + stream, threads)
    return ScenarioEnsemble(
        grid=ens.grid, m_outer=ens.m_outer, k_inner=ens.k_inner, dW=dW, dB=ens.dB, seed=ens.seed,
    )


def time_reverse(ens: ScenarioEnsemble) -> ScenarioEnsemble:
    """
    Reverse step order and exchange the roles of the two drivers.

    With k_inner = 1, step k of the reversed backward driver of group g is
    step n-1-k of the original forward driver of group g, and vice versa.

    Square layouts (m_outer = k_inner) are transposed: particle k of new
    group g carries the reversed forward path of old particle (k, g), except
    the diagonal particle (g, g), which takes the reversed old backward path
    of group g while its reversed forward path becomes the new backward
    driver of group g. Applying the map twice restores the ensemble exactly.
    """
    m, k = ens.m_outer, ens.k_inner
    if k != 1 and m != k:
        raise ShapeError(
            f"ensemble reversal needs k_inner = 1 or m_outer = k_inner (got {m}x{k}); "
            "use DriverPaths.reversed() for other grouped ensembles"
        )
    if k == 1:
        dW = ens.dB[:, None, ::-1].copy()
        dB = ens.dW[:, 0, ::-1].copy()
    else:
        diagonal = np.arange(m)
        forward = ens.dW[:, :, ::-1]
        dW = forward.transpose(1, 0, 2).copy()
        dW[diagonal, diagonal] = ens.dB[:, ::-1]
        dB = forward[diagonal, diagonal].copy()
    return ScenarioEnsemble(grid=ens.grid, m_outer=m, k_inner=k, dW=dW, dB=dB, seed=ens.seed)


def forward_levels(ens: ScenarioEnsemble) -> np.ndarray:
    """W_{t_i} per particle, shape (N, n_steps + 1)"""
    return driver_paths(ens).forward_levels()


def backward_levels(ens: ScenarioEnsemble) -> np.ndarray:
    """B_T - B_{t_i} per particle, shape (N, n_steps + 1)"""
    return driver_paths(ens).backward_levels()


def driver_paths(ens: ScenarioEnsemble, times: Optional[np.ndarray] = None) -> DriverPaths:
    """Flatten an ensemble into per-particle increments (particle index = g*k_inner + k)"""
    n = ens.grid.n_steps
    forward = ens.dW.reshape(ens.n_particles, n)
    backward = np.repeat(ens.dB, ens.k_inner, axis=0)
    return DriverPaths(
        dt=ens.grid.dt,
        times=ens.grid.points if times is None else times,
        forward=forward,
        backward=backward,
        group_size=ens.k_inner,
    )
