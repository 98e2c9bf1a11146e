"""Reproducible random substreams for the event-driven simulator.

One master seed fans out, through ``numpy``'s seed-sequence spawning, into
independent counter-based (Philox) substreams with fixed roles: arrival
gaps per router, service completions, pull-message router choices, routing
choices per router, and two streams reserved for the coupled pair (extra
service clocks in the higher system, independent routing redraws).  Equal
seeds reproduce equal event sequences; distinct roles never share draws, so
consuming more randomness in one role cannot shift another.
"""

from __future__ import annotations

import math

import numpy as np


class Substream:
    """Buffered uniform source; draws are consumed one at a time."""

    __slots__ = ("_gen", "_buf", "_pos", "_block")

    def __init__(self, seed_seq: np.random.SeedSequence, block: int = 1 << 14):
        self._gen = np.random.Generator(np.random.Philox(seed_seq))
        self._block = block
        self._buf = self._gen.random(block)
        self._pos = 0

    def uniform(self) -> float:
        """Next uniform draw in [0, 1)."""
        pos = self._pos
        if pos == self._block:
            self._buf = self._gen.random(self._block)
            pos = 0
        self._pos = pos + 1
        return self._buf[pos]

    def exponential(self, rate: float) -> float:
        """Next exponential draw with the given rate (inf when rate <= 0)."""
        if rate <= 0.0:
            return math.inf
        return -math.log1p(-self.uniform()) / rate

    def randint(self, bound: int) -> int:
        """Next uniform integer in {0, ..., bound - 1}."""
        return int(self.uniform() * bound)


class EventStream:
    """Named substreams driving one simulation run (or one coupled pair)."""

    def __init__(self, seed: int | np.random.SeedSequence, num_routers: int):
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        children = root.spawn(5 + 3 * num_routers)
        self.num_routers = num_routers
        # Fixed spawn order; changing it changes every seeded run.
        self.init_messages = Substream(children[0])
        self.service_times = Substream(children[1])
        self.message_routers = Substream(children[2])
        self.extra_service_times = Substream(children[3])
        self.high_redraw = Substream(children[4])
        base = 5
        self.arrival_gaps = [Substream(children[base + r]) for r in range(num_routers)]
        base += num_routers
        self.message_choice = [Substream(children[base + r]) for r in range(num_routers)]
        base += num_routers
        self.server_choice = [Substream(children[base + r]) for r in range(num_routers)]
