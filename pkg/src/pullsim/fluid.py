"""Deterministic fluid dynamics of the aggregated state.

In the large-system limit the aggregated state follows an ODE.  While every
router holds pull-messages (all per-router idle sums positive), arrivals
flow into idle servers in proportion to each router's idle split and the
field is :func:`fluid_derivative`.  When no router holds any messages but
idle servers regenerate them faster than arrivals consume them, only the
one-sided field :func:`boundary_derivative` applies.  The fixed-step
integrator switches between the two regimes and refuses to guess anywhere
else (some routers starved while others are not), raising
:class:`UndefinedFieldError`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import MeanFieldState, SystemConfig

#: Per-router idle-sum threshold below which the state counts as being on
#: the nobody-has-messages boundary.
IDLE_EPS = 1e-12


class EmptyRouterError(ValueError):
    """Interior field evaluated where some router has no idle mass."""


class BoundaryPreconditionError(ValueError):
    """Boundary field evaluated where its entry conditions fail."""


class UndefinedFieldError(RuntimeError):
    """Neither the interior nor the boundary field applies."""


@dataclass
class FluidTrajectory:
    """Grid trajectory produced by :func:`integrate_fluid`."""

    times: np.ndarray
    states: list[MeanFieldState]
    step: float

    @property
    def final(self) -> MeanFieldState:
        return self.states[-1]


def _levels(tail: np.ndarray) -> np.ndarray:
    """Per-level fractions: levels[k] = tail[k] - tail[k + 1] (zero past the end)."""
    levels = tail.copy()
    levels[:-1] -= tail[1:]
    return levels


def _at_least_two_rows(tail: np.ndarray) -> np.ndarray:
    """Pad the tail with an explicit zero level-1 row if it only stores level 0."""
    if tail.shape[0] >= 2:
        return tail
    return np.vstack([tail, np.zeros_like(tail[0])])


def _interior_field(
    tail: np.ndarray, idle: np.ndarray, cfg: SystemConfig
) -> tuple[np.ndarray, np.ndarray]:
    router_sums = idle.sum(axis=1)
    if np.any(router_sums <= 0.0):
        raise EmptyRouterError(
            f"router idle sums {router_sums} must all be positive"
        )
    lam = cfg.arrival_rate
    mu = np.asarray(cfg.service_rates)
    r = cfg.num_routers
    share = idle / router_sums[:, None]

    levels = _levels(tail)
    d_tail = -mu[None, :] * levels
    d_tail[0] = 0.0
    d_tail[1] += (lam / r) * share.sum(axis=0)
    d_idle = (mu * levels[1])[None, :] / r - (lam / r) * share
    return d_tail, d_idle


def _boundary_field(
    tail: np.ndarray, idle: np.ndarray, cfg: SystemConfig, atol: float
) -> tuple[np.ndarray, np.ndarray]:
    if np.any(idle.sum(axis=1) > atol):
        raise BoundaryPreconditionError("idle fractions are not all zero")
    lam = cfg.arrival_rate
    mu = np.asarray(cfg.service_rates)
    r = cfg.num_routers

    levels = _levels(tail)
    refill = mu * levels[1]
    if np.any(refill <= 0.0):
        raise BoundaryPreconditionError(
            f"per-pool message refill rates {refill} must all be positive"
        )
    total = refill.sum()
    if total <= lam:
        raise BoundaryPreconditionError(
            f"total refill rate {total} does not exceed the arrival rate {lam}"
        )

    # All arrivals enter idle servers, apportioned by the refill rates.
    d_tail = -mu[None, :] * levels
    d_tail[0] = 0.0
    d_tail[1] += lam * refill / total
    d_idle = np.tile((refill - refill / total * lam) / r, (r, 1))
    return d_tail, d_idle


def fluid_derivative(
    state: MeanFieldState, cfg: SystemConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Interior derivative field ``(d_tail, d_idle)``.

    Requires every router to hold idle mass; raises
    :class:`EmptyRouterError` otherwise.  Level 1 gains the arrival inflow
    ``(lam / R) * sum_r idle[r, j] / sum_l idle[r, l]`` and loses service at
    rate ``mu_j * level_1``; deeper levels only drain; each idle entry gains
    a ``1/R`` share of pool ``j``'s service completions and loses its share
    of router ``r``'s arrivals.
    """
    _check_dims(state, cfg)
    return _interior_field(_at_least_two_rows(state.tail), state.idle, cfg)


def boundary_derivative(
    state: MeanFieldState, cfg: SystemConfig, atol: float = IDLE_EPS
) -> tuple[np.ndarray, np.ndarray]:
    """One-sided derivative field where no router holds messages.

    Applies only when all idle fractions vanish, every pool has busy
    servers (``mu_j * level_1 > 0``), and messages regenerate faster than
    arrivals consume them; each idle entry then grows at the strictly
    positive rate ``(refill_j - refill_j / total * lam) / R``.
    """
    _check_dims(state, cfg)
    return _boundary_field(_at_least_two_rows(state.tail), state.idle, cfg, atol)


def _check_dims(state: MeanFieldState, cfg: SystemConfig) -> None:
    if state.num_pools != cfg.num_pools or state.num_routers != cfg.num_routers:
        raise ValueError(
            f"state covers ({state.num_routers}, {state.num_pools}), config expects"
            f" ({cfg.num_routers}, {cfg.num_pools})"
        )


def _field(
    tail: np.ndarray, idle: np.ndarray, cfg: SystemConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Dispatch between the interior and boundary regimes."""
    router_sums = idle.sum(axis=1)
    if np.all(router_sums > IDLE_EPS):
        return _interior_field(tail, idle, cfg)
    if np.all(router_sums <= IDLE_EPS):
        try:
            return _boundary_field(tail, idle, cfg, IDLE_EPS)
        except BoundaryPreconditionError as exc:
            raise UndefinedFieldError(
                f"boundary field does not apply: {exc}"
            ) from exc
    raise UndefinedFieldError(
        f"mixed regime: router idle sums {router_sums} are neither all positive"
        " nor all zero"
    )


def _renormalize(tail: np.ndarray, idle: np.ndarray, r: int) -> None:
    """Project a post-step state back onto the state space, in place.

    Clamps negatives, restores monotonicity of the tail levels, and rescales
    the idle split of each pool to match its idle mass exactly.
    """
    np.maximum(tail, 0.0, out=tail)
    np.minimum.accumulate(tail, axis=0, out=tail)
    np.maximum(idle, 0.0, out=idle)
    gap = tail[0] - tail[1]
    sums = idle.sum(axis=0)
    for j in range(tail.shape[1]):
        if sums[j] > 0.0:
            idle[:, j] *= gap[j] / sums[j]
        elif gap[j] > 0.0:
            idle[:, j] = gap[j] / r
        else:
            idle[:, j] = 0.0


def integrate_fluid(
    start: MeanFieldState,
    horizon: float,
    step: float,
    cfg: SystemConfig,
) -> FluidTrajectory:
    """Integrate the fluid field with the classical 4-stage scheme.

    Fixed step size; ``horizon`` is rounded to a whole number of steps.
    Every stored grid state is renormalized back onto the state space.
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    if horizon < 0.0:
        raise ValueError("horizon must be nonnegative")
    _check_dims(start, cfg)

    num_steps = int(round(horizon / step))
    tail = _at_least_two_rows(np.asarray(start.tail, dtype=float)).copy()
    idle = np.asarray(start.idle, dtype=float).copy()
    _renormalize(tail, idle, cfg.num_routers)

    states = [MeanFieldState(tail.copy(), idle.copy())]
    h = step
    for _ in range(num_steps):
        kt1, ki1 = _field(tail, idle, cfg)
        kt2, ki2 = _field(tail + 0.5 * h * kt1, idle + 0.5 * h * ki1, cfg)
        kt3, ki3 = _field(tail + 0.5 * h * kt2, idle + 0.5 * h * ki2, cfg)
        kt4, ki4 = _field(tail + h * kt3, idle + h * ki3, cfg)
        tail += (h / 6.0) * (kt1 + 2.0 * kt2 + 2.0 * kt3 + kt4)
        idle += (h / 6.0) * (ki1 + 2.0 * ki2 + 2.0 * ki3 + ki4)
        _renormalize(tail, idle, cfg.num_routers)
        states.append(MeanFieldState(tail.copy(), idle.copy()))

    times = np.arange(num_steps + 1) * h
    return FluidTrajectory(times=times, states=states, step=h)


def max_unit_buffer_state(cfg: SystemConfig) -> MeanFieldState:
    """Fullest state of a unit-buffer system: every server busy, no messages."""
    beta = np.asarray(cfg.pool_fractions)
    tail = np.vstack([beta, beta])
    idle = np.zeros((cfg.num_routers, cfg.num_pools))
    return MeanFieldState(tail, idle)
