import numpy as np
import pytest

from pullsim import (
    BoundaryPreconditionError,
    EmptyRouterError,
    MeanFieldState,
    UndefinedFieldError,
    boundary_derivative,
    fluid_derivative,
    integrate_fluid,
    max_unit_buffer_state,
    solve_equilibrium,
    state_distance,
    validate_config,
)


def _cfg(beta, mu, lam, R, buffers=None, n=100):
    return validate_config(
        pool_fractions=beta, service_rates=mu, arrival_rate=lam,
        num_servers=n, num_routers=R, buffer_sizes=buffers,
    )


def test_derivative_vanishes_at_equilibrium(two_pool_cfg):
    eq = solve_equilibrium(two_pool_cfg)
    d_tail, d_idle = fluid_derivative(eq.state, two_pool_cfg)
    assert np.max(np.abs(d_tail)) < 1e-9
    assert np.max(np.abs(d_idle)) < 1e-9


def test_derivative_hand_evaluation():
    cfg = _cfg((1.0,), (1.0,), 0.7, R=1, buffers=(1,))
    s = MeanFieldState(np.array([[1.0], [0.5]]), np.array([[0.5]]))
    d_tail, d_idle = fluid_derivative(s, cfg)
    assert d_tail[1, 0] == pytest.approx(0.2)  # 0.7 - 0.5
    assert d_idle[0, 0] == pytest.approx(-0.2)  # 0.5 - 0.7


def test_derivative_symmetric_over_routers(rng):
    cfg = _cfg((0.5, 0.5), (1.0, 2.0), 1.0, R=3)
    for _ in range(10):
        x1 = rng.uniform(0.05, 0.45, 2)
        z = (np.array([0.5, 0.5]) - x1) / 3.0
        s = MeanFieldState(np.vstack([[0.5, 0.5], x1]), np.tile(z, (3, 1)))
        _, d_idle = fluid_derivative(s, cfg)
        assert np.allclose(d_idle, d_idle[0])


def test_derivative_requires_messages_everywhere():
    cfg = _cfg((1.0,), (1.0,), 0.5, R=2)
    s = MeanFieldState(np.array([[1.0], [0.5]]), np.array([[0.5], [0.0]]))
    with pytest.raises(EmptyRouterError):
        fluid_derivative(s, cfg)


def test_boundary_single_pool():
    cfg = _cfg((1.0,), (1.0,), 0.5, R=2, buffers=(1,))
    s = max_unit_buffer_state(cfg)
    d_tail, d_idle = boundary_derivative(s, cfg)
    assert np.allclose(d_idle, 0.25)  # (1/2) (1 - 0.5)
    assert d_tail[1, 0] == pytest.approx(0.5 - 1.0)


def test_boundary_two_pools():
    cfg = _cfg((0.5, 0.5), (1.0, 2.0), 1.0, R=1, buffers=(1, 1))
    s = max_unit_buffer_state(cfg)
    _, d_idle = boundary_derivative(s, cfg)
    assert d_idle[0, 0] == pytest.approx(1.0 / 6.0)  # 0.5 - (0.5/1.5)
    assert d_idle[0, 1] == pytest.approx(1.0 / 3.0)  # 1.0 - (1.0/1.5)


def test_boundary_rates_strictly_positive(rng):
    for _ in range(20):
        beta = rng.dirichlet(np.ones(2))
        mu = rng.uniform(0.3, 3.0, 2)
        cap = float(beta @ mu)
        lam = cap * rng.uniform(0.1, 0.9)
        cfg = validate_config(
            pool_fractions=tuple(beta), service_rates=tuple(mu), arrival_rate=lam,
            num_servers=100, num_routers=2, buffer_sizes=(1, 1), fraction_tol=1e-9,
        )
        _, d_idle = boundary_derivative(max_unit_buffer_state(cfg), cfg)
        assert np.all(d_idle > 0.0)


def test_boundary_preconditions():
    cfg = _cfg((0.5, 0.5), (1.0, 2.0), 1.0, R=2, buffers=(1, 1))
    some_idle = MeanFieldState(
        np.array([[0.5, 0.5], [0.4, 0.5]]), np.array([[0.05, 0.0], [0.05, 0.0]])
    )
    with pytest.raises(BoundaryPreconditionError):
        boundary_derivative(some_idle, cfg)
    # a pool with no busy servers cannot regenerate messages
    empty_pool = MeanFieldState(np.array([[0.5, 0.5], [0.0, 0.5]]), np.zeros((2, 2)))
    with pytest.raises(BoundaryPreconditionError):
        boundary_derivative(empty_pool, cfg)
    # refill below the arrival rate
    slow = _cfg((1.0,), (1.0,), 0.9, R=1, buffers=(1,))
    low = MeanFieldState(np.array([[1.0], [0.5]]), np.zeros((1, 1)))
    with pytest.raises(BoundaryPreconditionError):
        boundary_derivative(low, slow)


def test_idle_plus_busy_mass_is_conserved(rng):
    # with nothing above level 1, arrivals only move mass between the idle
    # and the singly-busy compartments of each pool
    cfg = _cfg((0.5, 0.5), (1.0, 2.0), 1.0, R=3)
    for _ in range(20):
        x1 = rng.uniform(0.05, 0.45, 2)
        idle_mass = np.array([0.5, 0.5]) - x1
        weights = rng.dirichlet(np.ones(3), size=2).T
        s = MeanFieldState(np.vstack([[0.5, 0.5], x1]), weights * idle_mass)
        d_tail, d_idle = fluid_derivative(s, cfg)
        assert np.allclose(d_tail[1] + d_idle.sum(axis=0), 0.0, atol=1e-12)
        # total message creation minus consumption matches the aggregate rates
        mu = np.asarray(cfg.service_rates)
        assert d_idle.sum() == pytest.approx(float(x1 @ mu) - cfg.arrival_rate, abs=1e-12)


def test_integration_from_equilibrium_is_constant(two_pool_cfg):
    eq = solve_equilibrium(two_pool_cfg)
    traj = integrate_fluid(eq.state, 5.0, 1e-3, two_pool_cfg)
    for s in traj.states[:: len(traj.states) // 20]:
        assert state_distance(s, eq.state) < 1e-9


def test_integration_monotone_from_max_state(two_pool_unit_cfg):
    traj = integrate_fluid(max_unit_buffer_state(two_pool_unit_cfg), 5.0, 1e-3, two_pool_unit_cfg)
    idle = np.stack([s.idle for s in traj.states])
    busy = np.stack([s.tail[1] for s in traj.states])
    assert np.min(np.diff(idle, axis=0)) >= -1e-12
    assert np.max(np.diff(busy, axis=0)) <= 1e-12
    for s in traj.states[:: 500]:
        s.check(tol=1e-9)
        assert s.tail[0].sum() == pytest.approx(1.0, abs=1e-12)
    # later states sit below earlier ones in the state order
    from pullsim import mean_field_leq

    thin = traj.states[::250]
    for earlier, later in zip(thin, thin[1:]):
        assert mean_field_leq(later, earlier, tol=1e-12)


def test_integration_against_first_order_oracle(two_pool_unit_cfg):
    # independent route: explicit Euler on the idle-split equation only,
    # busy fractions recovered from the per-pool mass constraint
    cfg = two_pool_unit_cfg
    beta = np.asarray(cfg.pool_fractions)
    mu = np.asarray(cfg.service_rates)
    lam, R = cfg.arrival_rate, cfg.num_routers
    h, T = 1e-4, 2.0
    xi = np.zeros((R, 2))
    busy = beta - xi.sum(axis=0)
    w = mu * busy
    xi = xi + h * (w - w / w.sum() * lam) / R
    for _ in range(int(round(T / h)) - 1):
        busy = beta - xi.sum(axis=0)
        xi = xi + h * ((mu * busy) / R - (lam / R) * xi / xi.sum(axis=1)[:, None])
    oracle = MeanFieldState(np.vstack([beta, beta - xi.sum(axis=0)]), xi)

    traj = integrate_fluid(max_unit_buffer_state(cfg), T, 1e-3, cfg)
    assert state_distance(traj.final, oracle) < 5e-4


def test_mixed_regime_is_refused():
    cfg = _cfg((1.0,), (1.0,), 0.5, R=2)
    s = MeanFieldState(np.array([[1.0], [0.5]]), np.array([[0.0], [0.5]]))
    with pytest.raises(UndefinedFieldError):
        integrate_fluid(s, 1.0, 1e-2, cfg)


def test_dead_start_is_refused():
    # no messages and every server behind a length-2 queue: level 1 is empty,
    # so no pool regenerates messages and neither regime applies
    cfg = _cfg((1.0,), (1.0,), 0.5, R=1, buffers=(2,))
    s = MeanFieldState(np.array([[1.0], [1.0], [1.0]]), np.array([[0.0]]))
    with pytest.raises(UndefinedFieldError):
        integrate_fluid(s, 1.0, 1e-2, cfg)


def test_integration_rejects_bad_grid(two_pool_cfg):
    eq = solve_equilibrium(two_pool_cfg)
    with pytest.raises(ValueError):
        integrate_fluid(eq.state, 1.0, 0.0, two_pool_cfg)
    with pytest.raises(ValueError):
        integrate_fluid(eq.state, -1.0, 1e-2, two_pool_cfg)
