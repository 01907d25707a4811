"""
Empirical mean-field operators.

E' (integrate the second outcome) and E* (integrate the first outcome) are
both realized by the N-particle empirical measure of the whole ensemble.
Reductions use a fixed pairwise tree so results do not depend on thread
count or summation order.
"""

import logging
from functools import lru_cache
from typing import Mapping, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from ..model.errors import InvalidArgumentError, ShapeError
from ..model.expr import Expr, PRIME_PAIRS, uses_primed
from ..model.schemas import LipschitzMeta
from ..model.types import ContractionReport, PopulationSnapshot
from .dsl import evaluate, separate


logger = logging.getLogger(__name__)

COUPLING_GRID = 2.0 ** np.arange(-10, 11)

# own-rows per block of the O(N^2) fallback, sized to ~4M kernel values
_BLOCK_ELEMENTS = 1 << 22

_split = lru_cache(maxsize=512)(separate)


def pairwise_sum(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum along axis with a fixed halving tree; the odd element is carried to the next level"""
    a = np.moveaxis(np.asarray(values, dtype=float), axis, -1)
    if a.shape[-1] == 0:
        return np.zeros(a.shape[:-1])
    while a.shape[-1] > 1:
        n = a.shape[-1]
        half = n // 2
        paired = a[..., 0:2 * half:2] + a[..., 1:2 * half:2]
        if n % 2:
            paired = np.concatenate([paired, a[..., -1:]], axis=-1)
        a = paired
    return a[..., 0]


def pairwise_mean(values: np.ndarray, axis: int = -1) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return pairwise_sum(values, axis=axis) / values.shape[axis]


def std_err(values: np.ndarray) -> float:
    """Standard error of the mean of a 1-d sample (0 for a single value)"""
    values = np.asarray(values, dtype=float).ravel()
    n = len(values)
    if n < 2:
        return 0.0
    centered = values - pairwise_mean(values)
    variance = float(pairwise_sum(centered * centered)) / (n - 1)
    return float(np.sqrt(variance / n))


def snapshot_bindings(snap: PopulationSnapshot) -> dict:
    """Population values under their primed names"""
    bindings = {PRIME_PAIRS["y"]: snap.y, PRIME_PAIRS["z"]: snap.z}
    if snap.v is not None:
        bindings[PRIME_PAIRS["v"]] = snap.v
    if snap.x is not None:
        bindings[PRIME_PAIRS["x"]] = snap.x
    return bindings


def empirical_average(
    kernel: Expr,
    own: Mapping,
    snap: PopulationSnapshot,
    t: float,
    weights: Optional[np.ndarray] = None,
    threads: int = 1,
) -> np.ndarray:
    """
    For every own row i: (1/N) * sum_j w_j * kernel(own_i, particle_j), where the
    primed variables of the kernel read particle j. Own values may be scalars
    or arrays of a common length M; the result always has shape (M,).
    """
    n = len(snap)
    if weights is not None and len(weights) != n:
        raise ShapeError(f"carrier has length {len(weights)}, snapshot has {n}")

    own_env = {name: value for name, value in own.items()}
    own_env["t"] = t
    rows = _row_count(own_env)

    if not uses_primed(kernel):
        value = np.broadcast_to(evaluate(kernel, own_env), (rows,))
        if weights is None:
            return value.astype(float)
        return value * pairwise_mean(weights)

    pop_env = snapshot_bindings(snap)
    pop_env["t"] = t
    terms = _split(kernel)
    if terms is not None:
        result = np.zeros(rows)
        for term in terms:
            primed = np.broadcast_to(evaluate(term.primed, pop_env), (n,))
            if weights is not None:
                primed = primed * weights
            result = result + term.coef * np.broadcast_to(evaluate(term.own, own_env), (rows,)) * pairwise_mean(primed)
        return result

    return _blocked_average(kernel, own_env, pop_env, rows, n, weights, threads)


def _row_count(env: Mapping) -> int:
    sizes = {np.size(value) for value in env.values() if isinstance(value, np.ndarray) and np.ndim(value) > 0}
    if len(sizes) > 1:
        raise ShapeError(f"own bindings have mismatched lengths {sorted(sizes)}")
    return sizes.pop() if sizes else 1


def _blocked_average(kernel, own_env, pop_env, rows, n, weights, threads) -> np.ndarray:
    block = max(1, _BLOCK_ELEMENTS // n)
    starts = list(range(0, rows, block))

    def run(start: int) -> np.ndarray:
        stop = min(start + block, rows)
        env = {}
        for name, value in own_env.items():
            if isinstance(value, np.ndarray) and value.ndim > 0:
                env[name] = value[start:stop, None]
            else:
                env[name] = value
        for name, value in pop_env.items():
            env[name] = value[None, :] if isinstance(value, np.ndarray) else value
        values = np.broadcast_to(evaluate(kernel, env), (stop - start, n))
        if weights is not None:
            values = values * weights[None, :]
        return pairwise_sum(values, axis=-1) / n

    if threads > 1 and len(starts) > 1:
        parts = Parallel(n_jobs=threads, backend="threading")(delayed(run)(s) for s in starts)
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts)


def gamma_hat(theta: Expr, own: Mapping, snap: PopulationSnapshot, t: float) -> float:
    """Empirical Gamma operator at one own state"""
    return float(empirical_average(theta, own, snap, t)[0])


def gamma_hat_many(theta: Expr, own: Mapping, snap: Optional[PopulationSnapshot], t: float,
                   threads: int = 1) -> np.ndarray:
    """Gamma operator for a whole population of own states"""
    if snap is None:
        if uses_primed(theta):
            raise InvalidArgumentError("coefficient references primed variables but no population is frozen")
        env = dict(own)
        env["t"] = t
        return np.broadcast_to(evaluate(theta, env), (_row_count(env),)).astype(float)
    return empirical_average(theta, own, snap, t, threads=threads)


def estar_hat(kernel: Expr, carrier: np.ndarray, snap_at_star: PopulationSnapshot, own: Mapping, t: float) -> float:
    """E* average: carrier_j times the kernel with primed slots bound to particle j"""
    carrier = np.asarray(carrier, dtype=float)
    return float(empirical_average(kernel, own, snap_at_star, t, weights=carrier)[0])


def estar_hat_many(kernel: Expr, carrier: np.ndarray, snap_at_star: PopulationSnapshot, own: Mapping, t: float,
                   threads: int = 1) -> np.ndarray:
    return empirical_average(kernel, own, snap_at_star, t, weights=np.asarray(carrier, dtype=float), threads=threads)


def _coupling_constants(meta: LipschitzMeta, C: float) -> Tuple[float, float, float, float]:
    lg = meta.L_gamma
    M1 = meta.K_y ** 2 * (1 + meta.alpha2) + (1 + lg) * (
        meta.L_y + meta.L_z * C + 0.5 * lg ** 2 + lg * meta.L_zp * C
    )
    M2 = (1 + lg) * meta.L_z / C + (meta.alpha1 + meta.alpha2 * meta.alpha3)
    M3 = 0.5 * meta.L_yp ** 2 + meta.alpha2 * meta.K_yp
    M4 = lg * meta.L_zp / C + meta.alpha2 * meta.alpha4
    return M1, M2, M3, M4


def check_h1(meta: LipschitzMeta) -> ContractionReport:
    """
    Contraction check: margin = 1 - (a1 + a2*a3 + a2*a4) must be positive and
    some coupling constant C on the log grid must give M2 < 1 and M4/(1-M2) < 1.
    The report carries the constants at the best C found.
    """
    margin = 1.0 - (meta.alpha1 + meta.alpha2 * meta.alpha3 + meta.alpha2 * meta.alpha4)

    best = None
    best_key = None
    for C in COUPLING_GRID:
        M1, M2, M3, M4 = _coupling_constants(meta, float(C))
        ratio = M4 / (1.0 - M2) if M2 < 1.0 else np.inf
        feasible = M2 < 1.0 and ratio < 1.0
        # feasible points first, then the smallest contraction ratio, then the smallest M2
        key = (0 if feasible else 1, ratio, M2)
        if best_key is None or key < best_key:
            best_key = key
            best = (float(C), M1, M2, M3, M4, feasible)

    C, M1, M2, M3, M4, feasible = best
    report = ContractionReport(M1=M1, M2=M2, M3=M3, M4=M4, h1_ok=bool(margin > 0 and feasible), margin=margin, C=C)
    logger.debug(f"Contraction check: margin={margin:.4f}, C={C}, M2={M2:.4f}, M4={M4:.4f}, ok={report.h1_ok}")
    return report


def check_h2(meta: LipschitzMeta) -> Tuple[bool, float]:
    """Control-problem condition a3 + a4 < 1; returns (ok, margin)"""
    margin = 1.0 - (meta.alpha3 + meta.alpha4)
    return margin > 0, margin
