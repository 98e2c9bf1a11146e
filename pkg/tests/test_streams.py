import math

import numpy as np

from pullsim import EventStream, Substream


def test_same_seed_same_draws():
    a = EventStream(7, num_routers=3)
    b = EventStream(7, num_routers=3)
    assert [a.service_times.uniform() for _ in range(100)] == [
        b.service_times.uniform() for _ in range(100)
    ]
    assert [a.arrival_gaps[2].uniform() for _ in range(10)] == [
        b.arrival_gaps[2].uniform() for _ in range(10)
    ]


def test_roles_are_distinct_streams():
    s = EventStream(7, num_routers=2)
    head = {
        name: getattr(s, name).uniform()
        for name in ("init_messages", "service_times", "message_routers", "high_redraw")
    }
    assert len(set(head.values())) == len(head)
    assert s.arrival_gaps[0].uniform() != s.arrival_gaps[1].uniform()


def test_substream_matches_raw_generator_across_refills():
    root = np.random.SeedSequence(99)
    sub = Substream(root, block=64)
    raw = np.random.Generator(np.random.Philox(root)).random(1000)
    assert np.array_equal(np.array([sub.uniform() for _ in range(1000)]), raw)


def test_exponential_and_randint():
    sub = Substream(np.random.SeedSequence(1))
    assert sub.exponential(0.0) == math.inf
    assert sub.exponential(-1.0) == math.inf
    draws = [sub.exponential(2.0) for _ in range(1000)]
    assert all(d >= 0.0 for d in draws)
    # mean of Exp(2) is 0.5; loose sanity bound
    assert abs(np.mean(draws) - 0.5) < 0.06
    ints = [sub.randint(7) for _ in range(1000)]
    assert set(ints) <= set(range(7))
    assert set(ints) == set(range(7))


def test_spawn_layout_is_stable():
    # arrival streams occupy spawn slots 5..5+R-1, in router order
    root = np.random.SeedSequence(123)
    children = root.spawn(5 + 3 * 2)
    s = EventStream(np.random.SeedSequence(123), num_routers=2)
    expected = Substream(children[5])
    assert s.arrival_gaps[0].uniform() == expected.uniform()
