"""Event-driven simulation of the pull-based routing system.

The continuous-time Markov chain is executed on an event calendar (a heap
keyed by event time with an insertion sequence number breaking float ties
deterministically).  Arrivals form one Poisson stream per router; each busy
server carries exactly one pending completion event, which is enough under
exponential service times and head-of-line service.

Routing policies:

* ``pull1`` -- assign through a pull-message at the arrival router, block
  when the router holds none (requires unit buffers everywhere);
* ``pull2`` -- same, but fall back to a uniformly random server in the
  whole system when the router holds no messages;
* ``jsq<d>`` -- sample ``d`` distinct servers, join the shortest queue
  among them (uniform tie-break);
* ``random`` -- join a uniformly random server.

All policies maintain the idle/pull-message machinery, since it is part of
the state; message counters are only meaningful for the pull policies.
"""

from __future__ import annotations

import heapq
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .model import (
    FullState,
    InvariantViolationError,
    MeanFieldState,
    SystemConfig,
)
from .streams import EventStream


class FullInitWithUnboundedBufferError(ValueError):
    """The all-full initial state needs every buffer to be finite."""


class DepartureFromIdleError(RuntimeError):
    """A departure was applied to a server with an empty queue."""


# Routing decision kinds.
VIA_MESSAGE = 0  # assigned through a pull-message at the arrival router
FALLBACK = 1  # assigned without using a pull-message
BLOCKED = 2  # refused at the router (no pull-message under pull1)

_JSQ_PATTERN = re.compile(r"^jsq(\d+)$")


@dataclass(frozen=True)
class Policy:
    """Routing policy: one of pull1, pull2, jsq<d>, random."""

    kind: str
    sample_size: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("pull1", "pull2", "jsq", "random"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "jsq" and self.sample_size < 1:
            raise ValueError("jsq needs a positive sample size")

    @property
    def name(self) -> str:
        return f"jsq{self.sample_size}" if self.kind == "jsq" else self.kind

    @classmethod
    def parse(cls, text: str) -> "Policy":
        text = text.strip().lower()
        m = _JSQ_PATTERN.match(text)
        if m:
            return cls("jsq", int(m.group(1)))
        if text in ("pull1", "pull2", "random"):
            return cls(text)
        raise ValueError(f"cannot parse policy {text!r} (expected pull1, pull2, jsq<d> or random)")


PULL1 = Policy("pull1")
PULL2 = Policy("pull2")
RANDOM = Policy("random")


def _int_rows(upto: int, width: int, rows: list[list[int]]) -> None:
    while len(rows) <= upto:
        rows.append([0] * width)


def _float_rows(upto: int, width: int, rows: list[list[float]]) -> None:
    while len(rows) <= upto:
        rows.append([0.0] * width)


@dataclass
class SimMetrics:
    """Cumulative event counts and time-integrated occupancy.

    Router indices in the lists and in the ``*_by_class`` keys are 0-based;
    class keys are ``(queue length seen by the event, pool, router)``.  For
    departures the router entry is the destination of the emitted
    pull-message when the server idles, otherwise a uniformly drawn
    bookkeeping label.  ``level_time[q][j]`` integrates the number of pool-j
    servers with queue length exactly ``q >= 1`` over time;
    ``idle_time[r][j]`` does the same for idle servers with a message at
    router ``r``.
    """

    arrivals_by_router: list[int]
    blocked_by_router: list[int]
    arrivals_by_class: dict = field(default_factory=lambda: defaultdict(int))
    departures_by_class: dict = field(default_factory=lambda: defaultdict(int))
    blocked_at_server: int = 0
    waited: int = 0
    admitted: int = 0
    fallback_routings: int = 0
    pull_messages: int = 0
    pull_remove_messages: int = 0
    initial_pull_messages: int = 0
    initial_customers: int = 0
    event_count: int = 0
    sim_time: float = 0.0
    level_time: list[list[float]] = field(default_factory=list)
    idle_time: list[list[float]] = field(default_factory=list)
    integrated_to: float = 0.0

    @classmethod
    def empty(cls, num_routers: int, num_pools: int) -> "SimMetrics":
        m = cls(
            arrivals_by_router=[0] * num_routers,
            blocked_by_router=[0] * num_routers,
        )
        m.idle_time = [[0.0] * num_pools for _ in range(num_routers)]
        m.level_time = [[0.0] * num_pools]
        return m

    @property
    def arrivals_total(self) -> int:
        return sum(self.arrivals_by_router)

    @property
    def blocked_total(self) -> int:
        return sum(self.blocked_by_router) + self.blocked_at_server

    @property
    def served(self) -> int:
        return sum(self.departures_by_class.values())

    @property
    def messages_per_customer(self) -> float | None:
        """Pull plus pull-remove messages per customer ever in the system."""
        customers = self.admitted + self.initial_customers
        if customers == 0:
            return None
        return (self.pull_messages + self.pull_remove_messages) / customers

    def copy(self) -> "SimMetrics":
        m = SimMetrics(
            arrivals_by_router=list(self.arrivals_by_router),
            blocked_by_router=list(self.blocked_by_router),
            arrivals_by_class=defaultdict(int, self.arrivals_by_class),
            departures_by_class=defaultdict(int, self.departures_by_class),
            blocked_at_server=self.blocked_at_server,
            waited=self.waited,
            admitted=self.admitted,
            fallback_routings=self.fallback_routings,
            pull_messages=self.pull_messages,
            pull_remove_messages=self.pull_remove_messages,
            initial_pull_messages=self.initial_pull_messages,
            initial_customers=self.initial_customers,
            event_count=self.event_count,
            sim_time=self.sim_time,
        )
        m.level_time = [list(row) for row in self.level_time]
        m.idle_time = [list(row) for row in self.idle_time]
        m.integrated_to = self.integrated_to
        return m

    def delta(self, earlier: "SimMetrics") -> "SimMetrics":
        """Counts and integrals accumulated after ``earlier`` was captured."""
        m = SimMetrics(
            arrivals_by_router=[a - b for a, b in zip(self.arrivals_by_router, earlier.arrivals_by_router)],
            blocked_by_router=[a - b for a, b in zip(self.blocked_by_router, earlier.blocked_by_router)],
            blocked_at_server=self.blocked_at_server - earlier.blocked_at_server,
            waited=self.waited - earlier.waited,
            admitted=self.admitted - earlier.admitted,
            fallback_routings=self.fallback_routings - earlier.fallback_routings,
            pull_messages=self.pull_messages - earlier.pull_messages,
            pull_remove_messages=self.pull_remove_messages - earlier.pull_remove_messages,
            event_count=self.event_count - earlier.event_count,
            sim_time=self.sim_time - earlier.sim_time,
        )
        for key, v in self.arrivals_by_class.items():
            d = v - earlier.arrivals_by_class.get(key, 0)
            if d:
                m.arrivals_by_class[key] = d
        for key, v in self.departures_by_class.items():
            d = v - earlier.departures_by_class.get(key, 0)
            if d:
                m.departures_by_class[key] = d
        m.level_time = [list(row) for row in self.level_time]
        for q, row in enumerate(earlier.level_time):
            for j, v in enumerate(row):
                m.level_time[q][j] -= v
        m.idle_time = [list(row) for row in self.idle_time]
        for r, row in enumerate(earlier.idle_time):
            for j, v in enumerate(row):
                m.idle_time[r][j] -= v
        m.integrated_to = self.integrated_to - earlier.integrated_to
        return m

    def mean_state(self, cfg: SystemConfig) -> MeanFieldState:
        """Time-averaged aggregated state over the integrated span."""
        duration = self.integrated_to
        if duration <= 0.0:
            raise ValueError("no integrated time span to average over")
        n = cfg.num_servers
        k_max = max(1, len(self.level_time) - 1)
        tail = np.zeros((k_max + 1, cfg.num_pools))
        tail[0] = np.asarray(cfg.pool_sizes) / n
        acc = np.zeros(cfg.num_pools)
        for q in range(len(self.level_time) - 1, 0, -1):
            acc += self.level_time[q]
            tail[q] = acc / (n * duration)
        idle = np.asarray(self.idle_time) / (n * duration)
        return MeanFieldState(tail, idle)


@dataclass
class TraceSample:
    """Snapshot taken at a fixed observation time during a run."""

    time: float
    state: MeanFieldState
    metrics: SimMetrics


@dataclass
class SimResult:
    final_state: FullState
    metrics: SimMetrics
    samples: list[TraceSample]


class SimulationState:
    """Mutable runtime state: full state plus routing and accounting indexes.

    ``router_servers[r]`` lists the idle servers with a message at router
    ``r`` (0-based here); ``msg_slot[i]`` is server ``i``'s position in that
    list, enabling O(1) uniform choice and removal.  Time integrals are
    accumulated lazily per server: each server remembers when its state last
    changed and contributes the elapsed stretch when touched again.
    """

    __slots__ = (
        "cfg", "policy", "streams", "time", "queues", "messages",
        "router_servers", "msg_slot", "level_counts", "idle_counts",
        "last_change", "metrics", "pool_of", "rate_of", "cap_of",
    )

    def __init__(
        self,
        cfg: SystemConfig,
        policy: Policy,
        state: FullState,
        streams: EventStream,
    ):
        state.check(cfg)
        if policy.kind == "pull1" and any(b != 1 for b in cfg.buffer_sizes):
            raise ValueError("pull1 requires unit buffers in every pool")
        if policy.kind == "jsq" and policy.sample_size > cfg.num_servers:
            raise ValueError("jsq sample size exceeds the number of servers")
        n = cfg.num_servers
        self.cfg = cfg
        self.policy = policy
        self.streams = streams
        self.time = 0.0
        self.queues = list(state.queues)
        self.messages = list(state.messages)
        self.pool_of = list(cfg.server_pools)
        self.rate_of = [cfg.service_rates[j] for j in self.pool_of]
        self.cap_of = [
            math.inf if cfg.buffer_sizes[j] is None else cfg.buffer_sizes[j]
            for j in self.pool_of
        ]
        self.router_servers: list[list[int]] = [[] for _ in range(cfg.num_routers)]
        self.msg_slot = [-1] * n
        self.level_counts: list[list[int]] = [[0] * cfg.num_pools]
        self.idle_counts = [[0] * cfg.num_pools for _ in range(cfg.num_routers)]
        self.last_change = [0.0] * n
        self.metrics = SimMetrics.empty(cfg.num_routers, cfg.num_pools)

        for i, (q, d) in enumerate(zip(self.queues, self.messages)):
            j = self.pool_of[i]
            _int_rows(q, cfg.num_pools, self.level_counts)
            self.level_counts[q][j] += 1
            if q == 0:
                lst = self.router_servers[d - 1]
                self.msg_slot[i] = len(lst)
                lst.append(i)
                self.idle_counts[d - 1][j] += 1
                self.metrics.initial_pull_messages += 1
            else:
                self.metrics.initial_customers += q

    # -- registry and accounting primitives -------------------------------

    def _touch(self, i: int) -> None:
        """Integrate server ``i``'s current class up to the present time."""
        dt = self.time - self.last_change[i]
        if dt > 0.0:
            j = self.pool_of[i]
            q = self.queues[i]
            if q == 0:
                self.metrics.idle_time[self.messages[i] - 1][j] += dt
            else:
                _float_rows(q, self.cfg.num_pools, self.metrics.level_time)
                self.metrics.level_time[q][j] += dt
            self.last_change[i] = self.time

    def _message_add(self, i: int, router: int) -> None:
        lst = self.router_servers[router - 1]
        self.msg_slot[i] = len(lst)
        lst.append(i)
        self.messages[i] = router
        self.idle_counts[router - 1][self.pool_of[i]] += 1

    def _message_remove(self, i: int) -> None:
        router = self.messages[i]
        lst = self.router_servers[router - 1]
        slot = self.msg_slot[i]
        moved = lst.pop()
        if moved != i:
            lst[slot] = moved
            self.msg_slot[moved] = slot
        self.msg_slot[i] = -1
        self.messages[i] = 0
        self.idle_counts[router - 1][self.pool_of[i]] -= 1

    def _move_level(self, j: int, old: int, new: int) -> None:
        _int_rows(new, self.cfg.num_pools, self.level_counts)
        self.level_counts[old][j] -= 1
        self.level_counts[new][j] += 1

    # -- views -------------------------------------------------------------

    def full_state(self) -> FullState:
        return FullState(list(self.queues), list(self.messages))

    def mean_field(self) -> MeanFieldState:
        """Instantaneous aggregated state."""
        n = self.cfg.num_servers
        k_max = max(1, len(self.level_counts) - 1)
        tail = np.zeros((k_max + 1, self.cfg.num_pools))
        tail[0] = np.asarray(self.cfg.pool_sizes) / n
        acc = np.zeros(self.cfg.num_pools)
        for q in range(len(self.level_counts) - 1, 0, -1):
            acc += self.level_counts[q]
            tail[q] = acc / n
        idle = np.asarray(self.idle_counts, dtype=float) / n
        return MeanFieldState(tail, idle)

    def flush_integrals(self, t: float) -> None:
        """Bring every server's lazy integral up to time ``t``."""
        if t < self.time:
            raise ValueError("cannot flush integrals backwards")
        self.time = t
        for i in range(self.cfg.num_servers):
            self._touch(i)
        self.metrics.integrated_to = t

    def check(self) -> None:
        """Verify every structural invariant; debug aid for checked runs."""
        self.full_state().check(self.cfg)
        n = self.cfg.num_servers
        idle_total = sum(1 for q in self.queues if q == 0)
        registered = sum(len(lst) for lst in self.router_servers)
        if registered != idle_total:
            raise InvariantViolationError(
                f"{registered} registered messages for {idle_total} idle servers"
            )
        for r, lst in enumerate(self.router_servers):
            for slot, i in enumerate(lst):
                if self.messages[i] != r + 1 or self.msg_slot[i] != slot:
                    raise InvariantViolationError(f"registry slot broken for server {i}")
        levels: list[list[int]] = [[0] * self.cfg.num_pools for _ in self.level_counts]
        idles = [[0] * self.cfg.num_pools for _ in range(self.cfg.num_routers)]
        for i in range(n):
            levels[self.queues[i]][self.pool_of[i]] += 1
            if self.queues[i] == 0:
                idles[self.messages[i] - 1][self.pool_of[i]] += 1
        if levels != self.level_counts or idles != self.idle_counts:
            raise InvariantViolationError("aggregated counts out of sync")
        state = self.mean_field()
        state.check(tol=1e-9)


def init_state(
    cfg: SystemConfig,
    init: str | FullState,
    streams: EventStream,
) -> FullState:
    """Build an initial state: ``"empty"``, ``"full"`` or a checked explicit one.

    Empty starts place every server's pull-message at an independently and
    uniformly chosen router, mirroring how freshly initialized servers
    announce themselves.  The full start needs finite buffers everywhere.
    """
    n = cfg.num_servers
    if isinstance(init, FullState):
        init.check(cfg)
        return init.copy()
    if init == "empty":
        draw = streams.init_messages.randint
        r = cfg.num_routers
        return FullState([0] * n, [1 + draw(r) for _ in range(n)])
    if init == "full":
        if any(b is None for b in cfg.buffer_sizes):
            raise FullInitWithUnboundedBufferError(
                "full initial state undefined with unbounded buffers"
            )
        queues = [cfg.buffer_sizes[cfg.pool_of(i)] for i in range(n)]
        return FullState(queues, [0] * n)  # type: ignore[arg-type]
    raise ValueError(f"unknown init {init!r}")


def route(sim: SimulationState, router: int) -> tuple[int, int]:
    """Decide where an arrival at ``router`` (1-based) goes.

    Returns ``(kind, server)`` with kind ``VIA_MESSAGE``, ``FALLBACK`` or
    ``BLOCKED`` (server -1).  For the sampling policies the chosen server
    may be full; blocking is then applied by :func:`apply_arrival`, exactly
    as for the pull2 fallback.
    """
    kind = sim.policy.kind
    if kind in ("pull1", "pull2"):
        lst = sim.router_servers[router - 1]
        m = len(lst)
        if m:
            return VIA_MESSAGE, lst[sim.streams.message_choice[router - 1].randint(m)]
        if kind == "pull1":
            return BLOCKED, -1
        return FALLBACK, sim.streams.server_choice[router - 1].randint(sim.cfg.num_servers)
    if kind == "random":
        return FALLBACK, sim.streams.server_choice[router - 1].randint(sim.cfg.num_servers)
    # jsq<d>: distinct uniform sample, shortest queue, uniform tie-break.
    stream = sim.streams.server_choice[router - 1]
    n = sim.cfg.num_servers
    d = sim.policy.sample_size
    sample: list[int] = []
    while len(sample) < d:
        i = stream.randint(n)
        if i not in sample:
            sample.append(i)
    best = min(sim.queues[i] for i in sample)
    ties = [i for i in sample if sim.queues[i] == best]
    chosen = ties[0] if len(ties) == 1 else ties[stream.randint(len(ties))]
    return FALLBACK, chosen


def apply_arrival(sim: SimulationState, decision: tuple[int, int], router: int) -> int:
    """Apply a routing decision for an arrival at ``router`` (1-based).

    Returns the queue length the customer found (0 means it started service
    on an idle server) or -1 if it was blocked.
    """
    m = sim.metrics
    m.arrivals_by_router[router - 1] += 1
    kind, i = decision
    if kind == BLOCKED:
        m.blocked_by_router[router - 1] += 1
        return -1
    if kind == FALLBACK:
        m.fallback_routings += 1
    q = sim.queues[i]
    j = sim.pool_of[i]
    if q == 0:
        sim._touch(i)
        # A stale message elsewhere is withdrawn explicitly under pull2;
        # a used message always sits at the arrival router itself.
        if sim.messages[i] != router and sim.policy.kind == "pull2":
            m.pull_remove_messages += 1
        sim._message_remove(i)
        sim.queues[i] = 1
        sim._move_level(j, 0, 1)
        m.arrivals_by_class[(0, j, router - 1)] += 1
        m.admitted += 1
        return 0
    if q >= sim.cap_of[i]:
        m.blocked_at_server += 1
        return -1
    sim._touch(i)
    sim.queues[i] = q + 1
    sim._move_level(j, q, q + 1)
    m.arrivals_by_class[(q, j, router - 1)] += 1
    m.admitted += 1
    m.waited += 1
    return q


def apply_departure(sim: SimulationState, i: int) -> int:
    """Complete the head-of-line service at server ``i``.

    Returns the pre-departure queue length.  A server left idle emits a
    pull-message to a uniformly chosen router; deeper departures draw the
    same kind of label purely for the by-class bookkeeping.
    """
    q = sim.queues[i]
    if q == 0:
        raise DepartureFromIdleError(f"server {i} has no customer to depart")
    j = sim.pool_of[i]
    sim._touch(i)
    sim.queues[i] = q - 1
    sim._move_level(j, q, q - 1)
    router = 1 + sim.streams.message_routers.randint(sim.cfg.num_routers)
    if q == 1:
        sim._message_add(i, router)
        sim.metrics.pull_messages += 1
    sim.metrics.departures_by_class[(q, j, router - 1)] += 1
    return q


# Event codes on the calendar.
_EV_ARRIVAL = 0
_EV_COMPLETE = 1


def simulate(
    cfg: SystemConfig,
    policy: Policy,
    horizon: float,
    seed: int | EventStream,
    init: str | FullState = "empty",
    *,
    observe_at: list[float] | None = None,
    check_invariants: bool = False,
) -> SimResult:
    """Run the chain to ``horizon`` and return state, metrics and samples.

    ``observe_at`` lists times at which to capture a :class:`TraceSample`
    (instantaneous aggregated state plus a cumulative metrics snapshot); a
    sample at time t reflects all events strictly before t plus any event
    at exactly t not yet processed.  Identical arguments reproduce the run
    bit for bit.
    """
    streams = seed if isinstance(seed, EventStream) else EventStream(seed, cfg.num_routers)
    start = init_state(cfg, init, streams)
    sim = SimulationState(cfg, policy, start, streams)
    m = sim.metrics

    heap: list[tuple[float, int, int, int]] = []
    push = heapq.heappush
    pop = heapq.heappop
    seq = 0

    svc = streams.service_times
    rate_of = sim.rate_of
    for i, q in enumerate(sim.queues):
        if q > 0:
            seq += 1
            push(heap, (svc.exponential(rate_of[i]), seq, _EV_COMPLETE, i))
    per_router_rate = cfg.arrival_rate * cfg.num_servers / cfg.num_routers
    if per_router_rate > 0.0:
        for r in range(cfg.num_routers):
            seq += 1
            push(heap, (streams.arrival_gaps[r].exponential(per_router_rate), seq, _EV_ARRIVAL, r + 1))

    obs = sorted(observe_at) if observe_at else []
    if obs and (obs[0] < 0.0 or obs[-1] > horizon):
        raise ValueError("observation times must lie within [0, horizon]")
    obs_ptr = 0
    samples: list[TraceSample] = []

    def take_samples(up_to: float) -> None:
        nonlocal obs_ptr
        while obs_ptr < len(obs) and obs[obs_ptr] <= up_to:
            t_obs = obs[obs_ptr]
            sim.flush_integrals(t_obs)
            snap = m.copy()
            snap.sim_time = t_obs
            samples.append(TraceSample(time=t_obs, state=sim.mean_field(), metrics=snap))
            obs_ptr += 1

    while heap:
        t, _, code, x = pop(heap)
        if t > horizon:
            break
        take_samples(t)
        sim.time = t
        m.event_count += 1
        if code == _EV_ARRIVAL:
            decision = route(sim, x)
            found = apply_arrival(sim, decision, x)
            if found == 0:
                seq += 1
                push(heap, (t + svc.exponential(rate_of[decision[1]]), seq, _EV_COMPLETE, decision[1]))
            seq += 1
            push(heap, (t + streams.arrival_gaps[x - 1].exponential(per_router_rate), seq, _EV_ARRIVAL, x))
        else:
            before = apply_departure(sim, x)
            if before >= 2:
                seq += 1
                push(heap, (t + svc.exponential(rate_of[x]), seq, _EV_COMPLETE, x))
        if check_invariants:
            sim.check()

    take_samples(horizon)
    sim.flush_integrals(horizon)
    m.sim_time = horizon
    return SimResult(final_state=sim.full_state(), metrics=m, samples=samples)
