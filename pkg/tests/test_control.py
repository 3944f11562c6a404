import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tumour_seed
from nltumor.control import (
    ControlProblem, OptimizerOptions, gradient_check, h1_time_norm, norm_q, optimize, project_box,
    reduced_gradient, vi_residual, write_controls, write_history_csv,
)
from nltumor.adjoint import AdjointTrajectory
from nltumor.costs import AdaptedSpec, CostSpec, cost_terms, eval_adapted, eval_cost
from nltumor.forward import Box, ControlPair, solve_forward
from nltumor.grid import GridSpec, TimeGrid, read_chf_stack
from nltumor.kernel import build_profile, sample_kernel
from nltumor.physics import ModelParams

G8 = GridSpec(n=8)
T1 = TimeGrid(1.0, 4)


@pytest.fixture(scope="module")
def traj8():
    return solve_forward("local", ModelParams(), None, tumour_seed(G8, 0.2), G8.full(0.5), None, T1, grid=G8)


def problem(mode="local", n=16, nt=10, T=0.02, adapted=None, bounds=Box(), **cost):
    g, tg = GridSpec(n=n), TimeGrid(T, nt)
    spec = CostSpec(g, tg, **cost)
    k = sample_kernel(build_profile(), 0.25, g) if mode == "nonlocal" else None
    return ControlProblem(mode, ModelParams(), g, tg, tumour_seed(g, 0.15), g.full(0.5), spec, bounds, k,
                          adapted)


def random_direction(g, tg, seed=3):
    r = np.random.default_rng(seed)
    X, Y = g.centers()
    # not antisymmetric about the centred seed, so <g, d> does not vanish by symmetry
    f = 1.0 + np.cos(np.pi * X) + 0.5 * np.cos(2 * np.pi * Y)
    amp = 1 + 0.3 * r.standard_normal(tg.nt)
    return ControlPair(amp[:, None, None] * f, -0.5 * amp[:, None, None] * f)


# -- cost --------------------------------------------------------------------------


def test_cost_spec_validation():
    with pytest.raises(ValueError):
        CostSpec(G8, T1)
    with pytest.raises(ValueError):
        CostSpec(G8, T1, alpha_u=-1.0, beta_w=1.0)
    with pytest.raises(ValueError):
        CostSpec(G8, T1, alpha_u=1.0, phi_Q=np.zeros((3, 8, 8)))
    spec = CostSpec(G8, T1, alpha_u=1.0, phi_Q=np.zeros((8, 8)))
    assert spec.phi_Q.shape == (5, 8, 8) and spec.state_independent


def test_cost_examples(traj8):
    assert eval_cost(CostSpec(G8, T1, alpha_u=1.0), traj8, ControlPair.zeros(G8, 4)) == 0.0
    t = cost_terms(CostSpec(G8, T1, alpha_u=2.0), traj8, ControlPair.constant(G8, 4, 1.0, 0.0))
    assert t["control_u"] == pytest.approx(1.0, rel=1e-14)
    exact = CostSpec(G8, T1, alpha_Q=1.0, beta_Q=3.0, phi_Q=traj8.phi, sigma_Q=traj8.sigma)
    assert eval_cost(exact, traj8, ControlPair.zeros(G8, 4)) == 0.0


def test_cost_tracking_matches_trapezoid(traj8):
    spec = CostSpec(G8, T1, alpha_Q=2.0, phi_Q=0.0)
    sq = np.array([G8.norm_l2(f) ** 2 for f in traj8.phi])
    assert eval_cost(spec, traj8, ControlPair.zeros(G8, 4)) == pytest.approx(np.trapezoid(sq, T1.times), rel=1e-12)


def test_adapted_cost(traj8):
    base = CostSpec(G8, T1, beta_w=1.0)
    c = ControlPair.constant(G8, 4, 1.0, 0.0)
    assert eval_adapted(AdaptedSpec(base, c), traj8, c) == eval_cost(base, traj8, c)
    anchor = ControlPair.zeros(G8, 4)
    assert eval_adapted(AdaptedSpec(base, anchor), traj8, c) == pytest.approx(0.5, rel=1e-14)
    r = np.random.default_rng(0)
    other = ControlPair(r.uniform(0, 1, c.u.shape), r.uniform(0, 1, c.u.shape))
    full = CostSpec(G8, T1, alpha_Omega=1.0, alpha_u=0.1)
    assert eval_adapted(AdaptedSpec(full, other), traj8, c) >= eval_cost(full, traj8, c)


# -- gradient, projection, residual ----------------------------------------------------


def zero_adjoint(traj):
    z = np.zeros_like(traj.phi)
    return AdjointTrajectory(traj, z, z, z, z)


def test_reduced_gradient_examples(traj8):
    p0 = ModelParams(h_scale=0.0)
    c = ControlPair.constant(G8, 4, 0.6, 0.3)
    spec = CostSpec(G8, T1, beta_w=1.0)
    g = reduced_gradient(p0, zero_adjoint(traj8), c, spec)
    assert np.all(g.u == 0.0)
    np.testing.assert_allclose(g.w, 0.3, rtol=1e-15)
    ga = reduced_gradient(p0, zero_adjoint(traj8), c, spec, AdaptedSpec(spec, c))
    assert np.array_equal(ga.u, g.u) and np.array_equal(ga.w, g.w)
    with pytest.raises(ValueError):
        reduced_gradient(p0, zero_adjoint(traj8), ControlPair.zeros(G8, 3), spec)


def test_project_box_examples():
    b = Box(0.0, 1.0, 0.0, 0.5)
    c = ControlPair.constant(G8, 2, 0.3, 0.2)
    assert np.array_equal(project_box(c, b).u, c.u)
    assert np.all(project_box(ControlPair.constant(G8, 2, 2.0, 0.2), b).u == 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_project_box_idempotent(seed):
    r = np.random.default_rng(seed)
    c = ControlPair(r.normal(0.5, 1.0, (3, 8, 8)), r.normal(0.5, 1.0, (3, 8, 8)))
    b = Box(0.0, 0.8, 0.1, 0.9)
    once = project_box(c, b)
    twice = project_box(once, b)
    assert np.array_equal(once.u, twice.u) and np.array_equal(once.w, twice.w)
    assert b.contains(once)


def test_vi_residual_examples():
    tg = TimeGrid(1.0, 2)
    c = ControlPair.constant(G8, 2, 0.5, 0.5)
    b = Box()
    assert vi_residual(c, ControlPair.zeros(G8, 2), b, 1.0, G8, tg) == 0.0
    g = ControlPair.constant(G8, 2, 0.1, -0.2)
    expected = 0.5 * norm_q(G8, tg, g) / max(1.0, norm_q(G8, tg, c))
    assert vi_residual(c, g, b, 0.5, G8, tg) == pytest.approx(expected, rel=1e-14)
    pinned = ControlPair.constant(G8, 2, 1.0, 0.0)
    assert vi_residual(pinned, ControlPair.constant(G8, 2, -3.0, 2.0), b, 1.0, G8, tg) == 0.0
    with pytest.raises(ValueError):
        vi_residual(c, g, b, 0.0, G8, tg)


@settings(max_examples=30, deadline=None)
@given(lam=st.floats(0.1, 10.0), seed=st.integers(0, 1000))
def test_vi_residual_scale_consistent(lam, seed):
    r = np.random.default_rng(seed)
    tg = TimeGrid(1.0, 2)
    c = ControlPair(r.uniform(0.4, 0.6, (2, 8, 8)), r.uniform(0.4, 0.6, (2, 8, 8)))
    g = ControlPair(r.uniform(-0.01, 0.01, (2, 8, 8)), r.uniform(-0.01, 0.01, (2, 8, 8)))
    a = vi_residual(c, g, Box(), 1.0, G8, tg)
    b = vi_residual(c, g.scale(lam), Box(), 1.0 / lam, G8, tg)
    assert b == pytest.approx(a, rel=1e-12)


def test_h1_time_norm():
    tg = TimeGrid(1.0, 4)
    u = np.ones((4, 8, 8))
    assert h1_time_norm(G8, tg, u) == pytest.approx(1.0)
    u[2:] = 2.0
    assert h1_time_norm(G8, tg, u) == pytest.approx(np.sqrt(0.5 + 2.0 + 0.25 * 16))


# -- optimiser -----------------------------------------------------------------------


def test_optimize_returns_immediately_at_stationary_point():
    prob = problem(alpha_u=1.0, beta_w=1.0)
    res = optimize(prob, ControlPair.zeros(prob.grid, prob.tgrid.nt))
    assert res.converged and len(res.history) == 1 and res.history[0]["iter"] == 0


def test_optimize_pure_control_problem():
    prob = problem(alpha_u=0.75, beta_w=0.75)
    init = ControlPair.constant(prob.grid, prob.tgrid.nt, 0.5, 0.5)
    res = optimize(prob, init, OptimizerOptions(tol=1e-7))
    assert res.converged
    assert res.costs[-1] <= 1e-6 * res.costs[0]
    assert np.all(np.diff(res.costs) < 0)
    assert np.max(np.abs(res.controls.u)) < 1e-6


def test_optimize_tracking_problem_stays_in_box(tmp_path):
    bounds = Box(0.0, 0.6, 0.1, 0.8)
    prob = problem(alpha_Omega=1.0, alpha_Q=1.0, beta_Q=1.0, alpha_u=0.1, beta_w=0.1,
                   phi_Omega=-1.0, phi_Q=-1.0, sigma_Q=0.2, bounds=bounds)
    iterates = []
    res = optimize(prob, ControlPair.constant(prob.grid, prob.tgrid.nt, 0.5, 0.5),
                   OptimizerOptions(max_iter=60, tol=1e-3), log=iterates.append)
    assert res.converged and res.final_residual <= 1e-3
    assert np.all(np.diff(res.costs) < 0)
    assert bounds.contains(res.controls)
    assert len(iterates) == len(res.history)
    write_history_csv(res.history, tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["iter", "cost", "vi_residual", "step", "grad_norm", "u_h1_norm"]
    write_controls(res.controls, prob.grid, tmp_path / "c")
    g, recs = read_chf_stack(tmp_path / "c" / "control_u.chf")
    assert g == prob.grid and len(recs) == prob.tgrid.nt


def test_adapted_optimum_closer_to_anchor():
    cost = dict(alpha_Omega=1.0, alpha_Q=1.0, beta_Q=1.0, alpha_u=0.1, beta_w=0.1,
                phi_Omega=-1.0, phi_Q=-1.0, sigma_Q=0.2)
    opts = OptimizerOptions(max_iter=80, tol=1e-4)
    loc = problem("local", **cost)
    init = ControlPair.constant(loc.grid, loc.tgrid.nt, 0.5, 0.5)
    anchor = optimize(loc, init, opts).controls
    nl = problem("nonlocal", **cost)
    free = optimize(nl, init, opts).controls
    ad = problem("nonlocal", adapted=AdaptedSpec(nl.spec, anchor), **cost)
    anchored = optimize(ad, anchor, opts).controls
    g, tg = nl.grid, nl.tgrid
    assert norm_q(g, tg, anchored - anchor) <= norm_q(g, tg, free - anchor)


# -- Taylor test -----------------------------------------------------------------------


def test_gradient_check_quadratic():
    prob = problem(alpha_u=1.0)
    base = ControlPair.constant(prob.grid, prob.tgrid.nt, 0.5, 0.5)
    rep = gradient_check(prob, base, random_direction(prob.grid, prob.tgrid))
    assert 1.95 <= rep.slope <= 2.05
    assert rep.first_order_error <= 1e-8


@pytest.mark.parametrize("mode", ["local", "nonlocal"])
def test_gradient_check_full_cost(mode):
    prob = problem(mode, nt=20, alpha_Omega=1.0, alpha_Q=1.0, beta_Q=1.0, alpha_u=1e-3, beta_w=1e-3,
                   phi_Omega=-1.0, phi_Q=-1.0, sigma_Q=0.3)
    base = ControlPair.constant(prob.grid, prob.tgrid.nt, 0.5, 0.5)
    rep = gradient_check(prob, base, random_direction(prob.grid, prob.tgrid))
    assert rep.passes(1.7, 2e-2)
    assert rep.pre_floor.sum() >= 3
