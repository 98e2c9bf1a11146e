"""Equilibrium occupancy of the pull-based system.

The large-system limit settles into a state where a fraction ``nu_j`` of
all servers is busy (with exactly one customer) in pool ``j`` and the idle
servers of each pool spread their pull-messages evenly over the routers.
The ``nu_j`` are pinned down by two conditions: total service rate matches
the arrival rate, and the per-pool ratio ``nu_j * mu_j / (beta_j - nu_j)``
is common to all pools.  Substituting ``nu_j = c * beta_j / (mu_j + c)``
reduces the system to a single strictly increasing scalar equation in that
common ratio ``c``, solved here by bracketing bisection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import MeanFieldState, NonSubcriticalError, SystemConfig

#: Absolute tolerance on the scalar balance residual at the returned root.
RATE_BALANCE_TOL = 1e-12

#: Bisection iteration cap; the bracket halves each step so this is ample.
MAX_BISECTION_STEPS = 200


class DegeneratePoolError(ValueError):
    """A candidate equilibrium leaves some pool with no idle servers."""


@dataclass(frozen=True)
class EquilibriumPoint:
    """Solved equilibrium: busy fractions, common ratio, aggregated state."""

    busy_fractions: np.ndarray
    common_ratio: float
    state: MeanFieldState


def _total_rate(cfg: SystemConfig, c: float) -> float:
    """Total service throughput when the common ratio equals ``c``.

    Strictly increasing in ``c``, from 0 toward the total capacity.
    """
    return float(
        sum(
            c * b * m / (m + c)
            for b, m in zip(cfg.pool_fractions, cfg.service_rates)
        )
    )


def solve_equilibrium(cfg: SystemConfig) -> EquilibriumPoint:
    """Compute the equilibrium point of a validated configuration.

    Returns busy fractions ``nu``, the common ratio ``c``, and the
    aggregated state with ``tail[1] = nu``, nothing above level 1, and the
    idle mass of each pool split evenly over the routers.
    """
    lam = cfg.arrival_rate
    if lam >= cfg.total_capacity:
        raise NonSubcriticalError(
            f"arrival rate {lam} is not below capacity {cfg.total_capacity}"
        )

    # Bracket the root, then bisect.  _total_rate(0) = 0 <= lam and the
    # function approaches total_capacity > lam, so doubling finds an upper
    # end in finitely many steps.
    lo, hi = 0.0, 1.0
    while _total_rate(cfg, hi) <= lam:
        hi *= 2.0
    for _ in range(MAX_BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if abs(_total_rate(cfg, mid) - lam) <= RATE_BALANCE_TOL:
            lo = hi = mid
            break
        if _total_rate(cfg, mid) < lam:
            lo = mid
        else:
            hi = mid
    c = 0.5 * (lo + hi)

    beta = np.asarray(cfg.pool_fractions)
    mu = np.asarray(cfg.service_rates)
    nu = c * beta / (mu + c)

    tail = np.vstack([beta, nu])
    idle = np.tile((beta - nu) / cfg.num_routers, (cfg.num_routers, 1))
    return EquilibriumPoint(busy_fractions=nu, common_ratio=c, state=MeanFieldState(tail, idle))


def equilibrium_residual(point: EquilibriumPoint, cfg: SystemConfig) -> float:
    """How far a candidate point is from satisfying the balance conditions.

    Returns the larger of the rate-balance error ``|sum(nu*mu) - lam|`` and
    the maximal spread between the per-pool ratios ``nu*mu / (beta - nu)``.
    """
    nu = np.asarray(point.busy_fractions, dtype=float)
    beta = np.asarray(cfg.pool_fractions)
    mu = np.asarray(cfg.service_rates)
    if nu.shape != beta.shape:
        raise ValueError(f"busy fractions cover {nu.shape[0]} pools, config has {len(beta)}")
    if np.any(nu >= beta):
        raise DegeneratePoolError(
            f"busy fractions {nu} leave no idle servers in some pool (fractions {beta})"
        )
    rate_err = abs(float(np.dot(nu, mu)) - cfg.arrival_rate)
    ratios = nu * mu / (beta - nu)
    spread = float(ratios.max() - ratios.min())
    return max(rate_err, spread)
