"""Window solver: cost/gradient consistency, GN operator, PCG, MAP."""

import numpy as np
import pytest
import scipy.sparse as sp

from sw4dvar.dynamics import Trajectory
from sw4dvar.errors import DivergenceError, PcgBreakdownError
from sw4dvar.jacobians import build_chain
from sw4dvar.models import LinearModel, SweModel
from sw4dvar.observations import (ObservationSet, generate_observations,
                                  make_operator, observe)
from sw4dvar.var4d import (DiagonalBackground, SolverOptions, WindowProblem,
                           assimilate_window, cost, gauss_newton,
                           gn_hessian_vec, gradient, pcg_solve)

from conftest import bounded_state, small_params


def make_window(d=5, k=5, sigma=1e-2, seed=1, scenario=1, r=2,
                opts=None, mean_shift=0.02):
    p = small_params(d)
    model = SweModel(p)
    rng = np.random.default_rng(seed)
    truth0 = bounded_state(d, rng, scale=0.3)
    h = 10.0
    times = [l * h for l in range(k)]
    traj = model.integrate(truth0, 0.0, max(times[-1], h), 1.0,
                           record_at=times)
    op = make_operator(scenario, d, r=r, sigma=sigma)
    obs = generate_observations(Trajectory(np.array(times), traj.states),
                                op, seed=seed)
    bg = DiagonalBackground(
        truth0 + mean_shift * rng.standard_normal(model.n),
        np.concatenate([np.full(d * d, 100.0), np.full(d * d, 100.0),
                        np.full(d * d, 1.0)]))
    return WindowProblem(model=model, background=bg, obs=obs,
                         options=opts or SolverOptions(), h_obs=h)


def test_gradient_matches_finite_differences(rng):
    prob = make_window()
    x = np.array(prob.background.mean)
    g = gradient(x, prob)
    eps = 1e-6
    for _ in range(5):
        v = rng.standard_normal(len(x))
        fd = (cost(x + eps * v, prob) - cost(x - eps * v, prob)) / (2 * eps)
        assert abs(float(g @ v) - fd) <= 1e-6 * max(abs(fd), 1.0)


def test_gradient_vanishes_at_exact_truth():
    """Zero noise and the mean at truth leave nothing to correct."""
    prob = make_window(sigma=0.0, mean_shift=0.0)
    g = gradient(np.array(prob.background.mean), prob)
    assert np.linalg.norm(g) < 1e-8


def test_gn_hessian_matches_dense_assembly(rng):
    prob = make_window(d=4, k=3, sigma=0.3)
    opts = prob.options.resolve(prob.h_obs, prob.model.n)
    x = np.array(prob.background.mean)
    chain = build_chain(prob.model, x, prob.t0, prob.h_obs, prob.obs.k - 1,
                        opts.l_max, opts.substeps)
    n = prob.model.n
    op = prob.obs.op
    hsel = np.zeros((op.n_obs, n))
    hsel[np.arange(op.n_obs), op.index_list] = 1.0
    winv = 1.0 / op.sigma ** 2
    dense = np.diag(prob.background.precision_diag).astype(np.float64)
    prop = np.eye(n)
    for l in range(prob.obs.k):
        if l > 0:
            prop = chain.factors[l - 1].mat.toarray() @ prop
        dense += winv * prop.T @ hsel.T @ hsel @ prop
    applied = np.column_stack(
        [gn_hessian_vec(chain, prob, e) for e in np.eye(n)])
    assert np.max(np.abs(applied - dense)) < 1e-10
    assert np.allclose(applied, applied.T, rtol=0, atol=1e-12)
    assert np.linalg.eigvalsh(dense).min() > 0


def test_pcg_solves_spd_system(rng):
    n = 40
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    a = q @ np.diag(np.linspace(1.0, 30.0, n)) @ q.T
    b = rng.standard_normal(n)
    x, info = pcg_solve(lambda v: a @ v, b, tol=1e-10, max_iter=200)
    assert info.converged
    assert np.linalg.norm(a @ x - b) / np.linalg.norm(b) < 1e-9
    hist = np.array(info.residual_history)
    assert np.all(np.diff(hist) <= 0)


def test_pcg_zero_rhs_short_circuits():
    x, info = pcg_solve(lambda v: v, np.zeros(7))
    assert np.all(x == 0.0) and info.converged and info.iterations == 0


def test_pcg_budget_exhaustion_reports_unconverged(rng):
    n = 60
    a = np.diag(np.geomspace(1.0, 1e6, n))
    b = rng.standard_normal(n)
    x, info = pcg_solve(lambda v: a @ v, b, tol=1e-12, max_iter=3)
    assert not info.converged
    assert info.iterations == 3
    assert info.rel_residual > 1e-12


def test_pcg_rejects_indefinite_operator(rng):
    a = np.diag(np.array([1.0, -1.0, 2.0]))
    with pytest.raises(PcgBreakdownError, match="curvature"):
        pcg_solve(lambda v: a @ v, np.array([1.0, 1.0, 1.0]))


def linear_map_problem(k=4):
    """Small linear-Gaussian window whose MAP has a dense closed form."""
    d = 4
    n = 3 * d * d
    gen = np.random.default_rng(11)
    a = (0.02 / np.sqrt(n)) * gen.standard_normal((n, n))
    model = LinearModel(sp.csr_matrix(a))
    phi = np.eye(n)
    term = np.eye(n)
    for j in range(1, 5):
        term = term @ a / j
        phi = phi + term

    truth0 = gen.standard_normal(n)
    op = make_operator(2, d, r=2, sigma=0.4)
    times = np.arange(k, dtype=np.float64)
    states = [truth0]
    for _ in range(k - 1):
        states.append(phi @ states[-1])
    obs = generate_observations(Trajectory(times, np.array(states)), op,
                                seed=4)
    xb = truth0 + 0.1 * gen.standard_normal(n)
    prec = np.full(n, 2.5)
    bg = DiagonalBackground(xb, prec)
    opts = SolverOptions(dt=1.0, l_max=4, substeps=1, pcg_tol=1e-12,
                         pcg_max_iter=500)
    prob = WindowProblem(model=model, background=bg, obs=obs, options=opts,
                         h_obs=1.0)

    hsel = np.zeros((op.n_obs, n))
    hsel[np.arange(op.n_obs), op.index_list] = 1.0
    winv = 1.0 / op.sigma ** 2
    lhs = np.diag(prec).astype(np.float64)
    rhs = prec * xb
    prop = np.eye(n)
    for l in range(k):
        if l > 0:
            prop = phi @ prop
        lhs += winv * prop.T @ hsel.T @ hsel @ prop
        rhs += winv * prop.T @ hsel.T @ obs.values[l]
    x_star = np.linalg.solve(lhs, rhs)
    return prob, x_star


def test_linear_gaussian_map_matches_normal_equations():
    prob, x_star = linear_map_problem()
    result = gauss_newton(prob)
    err = np.linalg.norm(result.x_map - x_star) / np.linalg.norm(x_star)
    assert err < 1e-8
    assert result.converged


def test_single_time_window_closed_form(rng):
    """k=1 reduces to a diagonal-plus-selection linear solve."""
    d = 4
    n = 3 * d * d
    p = small_params(d)
    model = SweModel(p)
    op = make_operator(1, d, sigma=0.2)
    y = rng.standard_normal(op.n_obs)
    obs = ObservationSet(times=np.array([0.0]), values=y[None, :], op=op,
                         seed=0)
    xb = rng.standard_normal(n)
    prec = np.full(n, 3.0)
    prob = WindowProblem(model=model, background=DiagonalBackground(xb, prec),
                         obs=obs, options=SolverOptions(pcg_tol=1e-12),
                         h_obs=10.0)
    result = gauss_newton(prob)
    winv = 1.0 / 0.04
    lhs = np.diag(prec).astype(np.float64)
    rhs = prec * xb
    hsel = np.zeros((op.n_obs, n))
    hsel[np.arange(op.n_obs), op.index_list] = 1.0
    lhs += winv * hsel.T @ hsel
    rhs += winv * hsel.T @ y
    x_star = np.linalg.solve(lhs, rhs)
    assert np.linalg.norm(result.x_map - x_star) < 1e-8


def test_gauss_newton_reduces_cost_and_traces(rng):
    prob = make_window(mean_shift=0.05)
    result = gauss_newton(prob)
    assert result.converged
    costs = [row["cost"] for row in result.trace]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(costs, costs[1:]))
    assert cost(result.x_map, prob) <= costs[0]
    for row in result.trace:
        assert set(row) == {"outer_iter", "cost", "grad_norm", "step_norm",
                            "pcg_iters", "pcg_rel_residual"}
    assert result.chain.inverse_factors is not None
    assert result.chain.k == prob.obs.k


def test_pushforward_is_window_end_state():
    prob = make_window(opts=SolverOptions(dt=10.0, substeps=1))
    result, next_mean = assimilate_window(prob.model, prob.background,
                                          prob.obs,
                                          options=prob.options,
                                          h_obs=prob.h_obs)
    assert np.array_equal(next_mean, result.pushforward)
    flow = prob.model.integrate(result.x_map, prob.t0, prob.t_end,
                                10.0).last
    assert np.allclose(result.pushforward, flow, rtol=0, atol=1e-12)


def test_exact_data_recovers_truth():
    prob = make_window(sigma=0.0, mean_shift=0.0)
    result = gauss_newton(prob)
    assert result.iterations == 1
    assert np.linalg.norm(result.x_map - prob.background.mean) < 1e-10


def test_continuation_reaches_same_optimum():
    direct = gauss_newton(make_window(k=6, seed=3))
    contd = gauss_newton(make_window(k=6, seed=3,
                                     opts=SolverOptions(continuation=True)))
    rel = np.linalg.norm(direct.x_map - contd.x_map) \
        / np.linalg.norm(direct.x_map)
    assert rel < 1e-5


class _StuckModel:
    """Flow that reports the same far-off state regardless of the input;
    the solver can never reduce the cost against it."""

    def __init__(self, n):
        self.n = n
        self._lin = sp.csr_matrix((n, n))

    def rhs(self, x):
        return np.zeros(self.n)

    def linear_matrix(self):
        return self._lin

    def quad_apply(self, a, b):
        return np.zeros(self.n)

    def quad_jacobian(self, y):
        return self._lin

    def integrate(self, x0, t0, t1, dt, record_at=None):
        times = np.asarray(record_at if record_at is not None else [t1])
        return Trajectory(times, np.full((len(times), self.n), 50.0))


def test_divergence_counter_aborts_stalled_solves():
    n = 12
    op = make_operator(1, 2, sigma=1.0)
    times = np.array([0.0, 1.0, 2.0])
    obs = ObservationSet(times=times, values=np.zeros((3, op.n_obs)),
                         op=op, seed=0)
    prob = WindowProblem(
        model=_StuckModel(n),
        background=DiagonalBackground(np.zeros(n), np.full(n, 1.0)),
        obs=obs,
        options=SolverOptions(dt=1.0, substeps=1, backtrack_max=0,
                              divergence_limit=3),
        h_obs=1.0)
    with pytest.raises(DivergenceError, match="consecutive"):
        gauss_newton(prob)


class _NegativeBackground:
    def __init__(self, n):
        self.mean = np.zeros(n)

    def precision_apply(self, w):
        return -w


def test_indefinite_hessian_surfaces_pcg_breakdown():
    prob = make_window(d=4, k=3)
    prob.background = _NegativeBackground(prob.model.n)
    with pytest.raises(PcgBreakdownError):
        gauss_newton(prob)


def test_window_problem_validation(rng):
    p = small_params(4)
    model = SweModel(p)
    op = make_operator(1, 4, sigma=0.1)
    vals = np.zeros((3, op.n_obs))
    uneven = ObservationSet(times=np.array([0.0, 1.0, 3.0]), values=vals,
                            op=op, seed=0)
    bg = DiagonalBackground(np.zeros(model.n), np.ones(model.n))
    with pytest.raises(ValueError, match="evenly spaced"):
        WindowProblem(model=model, background=bg, obs=uneven)
    single = ObservationSet(times=np.array([0.0]),
                            values=np.zeros((1, op.n_obs)), op=op, seed=0)
    with pytest.raises(ValueError, match="h_obs"):
        WindowProblem(model=model, background=bg, obs=single)
    short_bg = DiagonalBackground(np.zeros(5), np.ones(5))
    even = ObservationSet(times=np.array([0.0, 1.0]),
                          values=np.zeros((2, op.n_obs)), op=op, seed=0)
    with pytest.raises(ValueError, match="dimension"):
        WindowProblem(model=model, background=short_bg, obs=even)
    with pytest.raises(ValueError, match="disagrees"):
        WindowProblem(model=model, background=bg, obs=even, h_obs=2.0)


def test_solver_options_resolution():
    opts = SolverOptions().resolve(10.0, 300)
    assert opts.dt == 1.0
    assert opts.substeps == 20
    assert np.isclose(opts.delta_min, 1e-6 * np.sqrt(300))
    pinned = SolverOptions(dt=5.0, substeps=3, delta_min=1e-9)
    assert pinned.resolve(10.0, 300) == pinned
