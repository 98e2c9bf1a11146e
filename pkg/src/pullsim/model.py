"""Core model types: system configuration, exact and aggregated state views.

A system consists of ``num_pools`` pools of identical servers, pool ``j``
holding ``pool_sizes[j]`` servers of service rate ``service_rates[j]`` and
buffer size ``buffer_sizes[j]`` (``None`` meaning unbounded).  Customers
arrive at total rate ``arrival_rate * num_servers`` and are split evenly
across ``num_routers`` routers.  Idle servers advertise themselves with a
pull-message parked at one router.

Two state views are provided:

* :class:`FullState` -- per-server queue lengths plus, for each idle server,
  the router holding its pull-message.
* :class:`MeanFieldState` -- aggregated fractions: ``tail[k, j]`` is the
  fraction of *all* servers that sit in pool ``j`` with queue length >= k,
  and ``idle[r, j]`` the fraction idle in pool ``j`` with a message at
  router ``r``.

Both views carry a natural partial order (``full_state_leq`` /
``mean_field_leq``) used by the coupled simulator, and the aggregated view
carries the metric :func:`state_distance`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

#: Sentinel for an unbounded buffer.
UNBOUNDED = None


class ConfigError(ValueError):
    """A system configuration violates a structural constraint."""


class BadFractionsError(ConfigError):
    """Pool fractions do not sum to one."""


class NonSubcriticalError(ConfigError):
    """Arrival rate is not below the total service capacity."""


class EmptyPoolError(ConfigError):
    """Rounding the pool fractions left some pool without servers."""


class DimensionMismatchError(ValueError):
    """Two states do not live on the same index sets."""


class InvariantViolationError(RuntimeError):
    """A state object violates one of its structural invariants."""


def _allocate_pool_sizes(fractions: Sequence[float], n: int) -> tuple[int, ...]:
    """Split ``n`` servers over pools by largest-remainder rounding.

    Guarantees the sizes sum to ``n`` exactly; ties go to the lower pool
    index so the allocation is deterministic.
    """
    raw = [f * n for f in fractions]
    sizes = [math.floor(v) for v in raw]
    short = n - sum(sizes)
    # Hand the leftover servers to the pools with the largest remainders.
    order = sorted(range(len(raw)), key=lambda j: (-(raw[j] - sizes[j]), j))
    for j in order[:short]:
        sizes[j] += 1
    return tuple(sizes)


@dataclass(frozen=True)
class SystemConfig:
    """Validated model parameters plus run-scale information.

    Build instances through :func:`validate_config`; the constructor itself
    performs no checking.
    """

    pool_fractions: tuple[float, ...]
    service_rates: tuple[float, ...]
    buffer_sizes: tuple[int | None, ...]
    arrival_rate: float
    num_servers: int
    num_routers: int
    pool_sizes: tuple[int, ...]
    # Pool index for every server, derived; kept out of repr/eq noise.
    server_pools: tuple[int, ...] = field(repr=False, compare=False, default=())

    @property
    def num_pools(self) -> int:
        return len(self.pool_fractions)

    @property
    def total_capacity(self) -> float:
        """Normalized service capacity: sum of fraction * rate over pools."""
        return float(
            sum(b * m for b, m in zip(self.pool_fractions, self.service_rates))
        )

    @property
    def effective_fractions(self) -> tuple[float, ...]:
        """Realized pool fractions ``pool_sizes[j] / num_servers``."""
        return tuple(s / self.num_servers for s in self.pool_sizes)

    def pool_of(self, server: int) -> int:
        return self.server_pools[server]

    def with_num_servers(self, n: int) -> "SystemConfig":
        """Re-validate this configuration at a different scale ``n``."""
        return validate_config(
            pool_fractions=self.pool_fractions,
            service_rates=self.service_rates,
            buffer_sizes=self.buffer_sizes,
            arrival_rate=self.arrival_rate,
            num_servers=n,
            num_routers=self.num_routers,
        )


def validate_config(
    params: Mapping[str, object] | None = None,
    *,
    pool_fractions: Sequence[float] | None = None,
    service_rates: Sequence[float] | None = None,
    buffer_sizes: Sequence[int | None] | None = None,
    arrival_rate: float | None = None,
    num_servers: int | None = None,
    num_routers: int = 1,
    fraction_tol: float = 1e-12,
) -> SystemConfig:
    """Check raw parameters and return a :class:`SystemConfig`.

    Accepts either a mapping with the field names of :class:`SystemConfig`
    or the same values as keyword arguments.  Raises
    :class:`BadFractionsError` if the pool fractions do not sum to one,
    :class:`NonSubcriticalError` if ``arrival_rate`` is not strictly below
    the total capacity, and :class:`EmptyPoolError` if any pool rounds to
    zero servers.
    """
    if params is not None:
        known = {
            "pool_fractions", "service_rates", "buffer_sizes",
            "arrival_rate", "num_servers", "num_routers",
        }
        unknown = set(params) - known
        if unknown:
            raise ConfigError(f"unknown configuration fields {sorted(unknown)}")
        pool_fractions = params.get("pool_fractions", pool_fractions)  # type: ignore[assignment]
        service_rates = params.get("service_rates", service_rates)  # type: ignore[assignment]
        buffer_sizes = params.get("buffer_sizes", buffer_sizes)  # type: ignore[assignment]
        arrival_rate = params.get("arrival_rate", arrival_rate)  # type: ignore[assignment]
        num_servers = params.get("num_servers", num_servers)  # type: ignore[assignment]
        num_routers = params.get("num_routers", num_routers)  # type: ignore[assignment]

    if pool_fractions is None or service_rates is None or arrival_rate is None:
        raise ConfigError("pool_fractions, service_rates and arrival_rate are required")
    if num_servers is None or num_servers < 1:
        raise ConfigError("num_servers must be a positive integer")
    if num_routers < 1:
        raise ConfigError("num_routers must be a positive integer")

    beta = tuple(float(b) for b in pool_fractions)
    mu = tuple(float(m) for m in service_rates)
    if buffer_sizes is None:
        buffers: tuple[int | None, ...] = (UNBOUNDED,) * len(beta)
    else:
        buffers = tuple(None if b is None else int(b) for b in buffer_sizes)

    if not (len(beta) == len(mu) == len(buffers)) or len(beta) == 0:
        raise ConfigError("pool_fractions, service_rates and buffer_sizes must have equal nonzero length")
    if any(b <= 0 for b in beta):
        raise BadFractionsError(f"pool fractions must be positive, got {beta}")
    if abs(sum(beta) - 1.0) > fraction_tol:
        raise BadFractionsError(f"pool fractions sum to {sum(beta)!r}, expected 1 within {fraction_tol}")
    if any(m <= 0 for m in mu):
        raise ConfigError(f"service rates must be positive, got {mu}")
    if any(b is not None and b < 1 for b in buffers):
        raise ConfigError(f"finite buffer sizes must be >= 1, got {buffers}")

    lam = float(arrival_rate)
    capacity = sum(b * m for b, m in zip(beta, mu))
    if lam < 0:
        raise ConfigError("arrival_rate must be nonnegative")
    if lam >= capacity:
        raise NonSubcriticalError(
            f"arrival rate {lam} is not below the service capacity {capacity} "
            "(subcritical load requires arrival_rate < sum(fraction * rate))"
        )

    sizes = _allocate_pool_sizes(beta, num_servers)
    if any(s == 0 for s in sizes):
        raise EmptyPoolError(
            f"num_servers={num_servers} leaves an empty pool (sizes {sizes})"
        )

    server_pools: list[int] = []
    for j, s in enumerate(sizes):
        server_pools.extend([j] * s)

    return SystemConfig(
        pool_fractions=beta,
        service_rates=mu,
        buffer_sizes=buffers,
        arrival_rate=lam,
        num_servers=int(num_servers),
        num_routers=int(num_routers),
        pool_sizes=sizes,
        server_pools=tuple(server_pools),
    )


@dataclass
class FullState:
    """Per-server state: queue lengths and pull-message locations.

    ``queues[i]`` is the queue length of server ``i``; ``messages[i]`` is 0
    when the server is busy, otherwise the 1-based label of the router
    holding its pull-message.  A server is idle exactly when it has a
    message parked somewhere.
    """

    queues: list[int]
    messages: list[int]

    @property
    def num_servers(self) -> int:
        return len(self.queues)

    def copy(self) -> "FullState":
        return FullState(list(self.queues), list(self.messages))

    def check(self, cfg: SystemConfig) -> None:
        """Raise :class:`InvariantViolationError` on any broken invariant."""
        if len(self.queues) != cfg.num_servers or len(self.messages) != cfg.num_servers:
            raise InvariantViolationError(
                f"state has {len(self.queues)} servers, config expects {cfg.num_servers}"
            )
        for i, (q, d) in enumerate(zip(self.queues, self.messages)):
            if q < 0:
                raise InvariantViolationError(f"server {i}: negative queue {q}")
            if (q == 0) != (d != 0):
                raise InvariantViolationError(
                    f"server {i}: queue {q} inconsistent with message location {d}"
                )
            if d < 0 or d > cfg.num_routers:
                raise InvariantViolationError(f"server {i}: message location {d} out of range")
            cap = cfg.buffer_sizes[cfg.pool_of(i)]
            if cap is not None and q > cap:
                raise InvariantViolationError(f"server {i}: queue {q} exceeds buffer {cap}")


@dataclass
class MeanFieldState:
    """Aggregated state: queue-tail fractions and idle-message fractions.

    ``tail`` has shape ``(k_max + 1, num_pools)``; row ``k`` holds the
    fraction of all servers that are in pool ``j`` with queue length >= k,
    so row 0 is the pool-size split.  Entries beyond ``k_max`` are
    implicitly zero.  ``idle`` has shape ``(num_routers, num_pools)``.
    """

    tail: np.ndarray
    idle: np.ndarray

    def __post_init__(self) -> None:
        self.tail = np.asarray(self.tail, dtype=float)
        self.idle = np.asarray(self.idle, dtype=float)
        if self.tail.ndim != 2 or self.idle.ndim != 2:
            raise DimensionMismatchError("tail and idle must be 2-d arrays")
        if self.tail.shape[1] != self.idle.shape[1]:
            raise DimensionMismatchError(
                f"tail covers {self.tail.shape[1]} pools, idle covers {self.idle.shape[1]}"
            )

    @property
    def num_pools(self) -> int:
        return self.tail.shape[1]

    @property
    def num_routers(self) -> int:
        return self.idle.shape[0]

    @property
    def k_max(self) -> int:
        return self.tail.shape[0] - 1

    def level(self, k: int) -> np.ndarray:
        """Fraction of servers per pool with queue length exactly ``k``."""
        if k >= self.k_max:
            return self.tail[k] if k == self.k_max else np.zeros(self.num_pools)
        return self.tail[k] - self.tail[k + 1]

    def copy(self) -> "MeanFieldState":
        return MeanFieldState(self.tail.copy(), self.idle.copy())

    def check(self, tol: float = 1e-9) -> None:
        """Raise :class:`InvariantViolationError` if outside the state space."""
        if np.any(self.tail < -tol) or np.any(self.tail > 1 + tol):
            raise InvariantViolationError("tail fractions outside [0, 1]")
        if np.any(self.idle < -tol) or np.any(self.idle > 1 + tol):
            raise InvariantViolationError("idle fractions outside [0, 1]")
        if np.any(np.diff(self.tail, axis=0) > tol):
            raise InvariantViolationError("tail fractions increase in k")
        gap = self.tail[0] - (self.tail[1] if self.k_max >= 1 else 0.0)
        if np.any(np.abs(gap - self.idle.sum(axis=0)) > tol):
            raise InvariantViolationError(
                "idle fractions do not account for the idle mass per pool"
            )


def mean_field_project(state: FullState, cfg: SystemConfig) -> MeanFieldState:
    """Aggregate a :class:`FullState` into pool/router fractions."""
    n = cfg.num_servers
    if state.num_servers != n:
        raise DimensionMismatchError(
            f"state has {state.num_servers} servers, config expects {n}"
        )
    k_max = max(1, max(state.queues, default=0))
    counts = np.zeros((k_max + 1, cfg.num_pools))
    idle = np.zeros((cfg.num_routers, cfg.num_pools))
    for i, q in enumerate(state.queues):
        j = cfg.pool_of(i)
        counts[: q + 1, j] += 1.0
        if q == 0:
            idle[state.messages[i] - 1, j] += 1.0
    return MeanFieldState(counts / n, idle / n)


def state_distance(a: MeanFieldState, b: MeanFieldState) -> float:
    """Metric between aggregated states.

    Queue-tail differences at level ``k`` enter through the bounded term
    ``2**-k * |d| / (1 + |d|)``; idle-message differences enter linearly.
    Levels beyond both states' stored range are zero, so the level sum is
    finite and exact.
    """
    if a.num_pools != b.num_pools or a.num_routers != b.num_routers:
        raise DimensionMismatchError(
            f"states cover ({a.num_routers}, {a.num_pools}) vs ({b.num_routers}, {b.num_pools})"
        )
    k_hi = max(a.k_max, b.k_max)
    ta = np.zeros((k_hi + 1, a.num_pools))
    tb = np.zeros_like(ta)
    ta[: a.k_max + 1] = a.tail
    tb[: b.k_max + 1] = b.tail
    d = np.abs(ta - tb)
    weights = 2.0 ** -np.arange(k_hi + 1)
    tail_part = float(np.sum(weights[:, None] * d / (1.0 + d)))
    idle_part = float(np.sum(np.abs(a.idle - b.idle)))
    return tail_part + idle_part


def full_state_leq(low: FullState, high: FullState) -> bool:
    """Partial order on per-server states.

    ``low <= high`` iff every queue in ``low`` is at most the matching
    queue in ``high`` and every pull-message present in ``high`` is parked
    at the same router in ``low`` (so ``low`` holds a superset of the
    messages of ``high`` at every router).
    """
    if low.num_servers != high.num_servers:
        raise DimensionMismatchError(
            f"states have {low.num_servers} vs {high.num_servers} servers"
        )
    for ql, qh, dl, dh in zip(low.queues, high.queues, low.messages, high.messages):
        if ql > qh:
            return False
        if dh != 0 and dl != dh:
            return False
    return True


def mean_field_leq(low: MeanFieldState, high: MeanFieldState, tol: float = 0.0) -> bool:
    """Partial order on aggregated states.

    ``low <= high`` iff the queue-tail fractions of ``low`` are dominated
    componentwise and its idle-message fractions dominate componentwise.
    ``tol`` allows slack for states produced by floating-point integration.
    """
    if low.num_pools != high.num_pools or low.num_routers != high.num_routers:
        raise DimensionMismatchError(
            f"states cover ({low.num_routers}, {low.num_pools}) vs"
            f" ({high.num_routers}, {high.num_pools})"
        )
    k_hi = max(low.k_max, high.k_max)
    for k in range(k_hi + 1):
        tl = low.tail[k] if k <= low.k_max else np.zeros(low.num_pools)
        th = high.tail[k] if k <= high.k_max else np.zeros(high.num_pools)
        if np.any(tl > th + tol):
            return False
    return bool(np.all(low.idle >= high.idle - tol))
