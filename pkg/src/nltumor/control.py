"""Reduced gradients, box projection and a projected-gradient optimiser.

Controls are compared in the space-time L2 product ``<a, b>_Q = dt h^d sum a b``,
the discrete counterpart of L2(0, T; L2(Omega)) for piecewise constant
controls.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adjoint import AdjointTrajectory, solve_adjoint
from .costs import AdaptedSpec, CostSpec, control_norm_sq, eval_adapted, eval_cost
from .forward import Box, ControlPair, StateTrajectory, solve_forward
from .grid import GridSpec, TimeGrid, write_chf_stack
from .physics import ModelParams

HISTORY_COLUMNS = ("iter", "cost", "vi_residual", "step", "grad_norm", "u_h1_norm")


class LineSearchError(RuntimeError):
    """No step satisfied the sufficient-decrease condition."""


def inner_q(grid: GridSpec, tgrid: TimeGrid, a: ControlPair, b: ControlPair) -> float:
    vol = tgrid.dt * grid.cell_volume
    return float(vol * (np.sum(a.u * b.u) + np.sum(a.w * b.w)))


def norm_q(grid: GridSpec, tgrid: TimeGrid, c: ControlPair) -> float:
    return math.sqrt(control_norm_sq(grid, tgrid, c))


def h1_time_norm(grid: GridSpec, tgrid: TimeGrid, u: np.ndarray) -> float:
    """Discrete H1(0, T; L2) norm of a piecewise constant control."""
    dt = tgrid.dt
    l2 = dt * np.sum(u * u) * grid.cell_volume
    du = np.diff(u, axis=0) / dt
    return float(math.sqrt(l2 + dt * np.sum(du * du) * grid.cell_volume))


def reduced_gradient(params: ModelParams, adjoint: AdjointTrajectory, controls: ControlPair,
                     spec: CostSpec, adapted: AdaptedSpec | None = None) -> ControlPair:
    """Riesz representative of the cost derivative in the space-time L2 product.

    ``g_u = alpha_u u - h(phi) p`` and ``g_w = beta_w w + r`` on each interval,
    plus ``u - u_bar`` and ``w - w_bar`` for the adapted cost.
    """
    fwd = adjoint.forward
    if fwd.tgrid != spec.tgrid or fwd.grid != spec.grid:
        raise ValueError("adjoint and cost live on different grids")
    nt = fwd.tgrid.nt
    if controls.u.shape != (nt, *fwd.grid.shape):
        raise ValueError(f"controls have shape {controls.u.shape}")
    g_u = spec.alpha_u * controls.u - params.h(fwd.phi[:nt]) * adjoint.p[:nt]
    g_w = spec.beta_w * controls.w + adjoint.r[:nt]
    if adapted is not None:
        g_u = g_u + (controls.u - adapted.anchor.u)
        g_w = g_w + (controls.w - adapted.anchor.w)
    return ControlPair(g_u, g_w)


def project_box(controls: ControlPair, bounds: Box) -> ControlPair:
    return ControlPair(np.clip(controls.u, bounds.u_min, bounds.u_max),
                       np.clip(controls.w, bounds.w_min, bounds.w_max))


def vi_residual(controls: ControlPair, grad: ControlPair, bounds: Box, step: float,
                grid: GridSpec, tgrid: TimeGrid) -> float:
    """Projected-gradient fixed-point residual, zero exactly at discrete stationary points."""
    if not step > 0:
        raise ValueError("step must be positive")
    moved = project_box(controls - grad.scale(step), bounds)
    return norm_q(grid, tgrid, controls - moved) / max(1.0, norm_q(grid, tgrid, controls))


@dataclass(eq=False)
class ControlProblem:
    """Everything that fixes the reduced cost c -> J(S(c), c)."""

    mode: str
    params: ModelParams
    grid: GridSpec
    tgrid: TimeGrid
    phi0: np.ndarray
    sigma0: np.ndarray
    spec: CostSpec
    bounds: Box = field(default_factory=Box)
    kernel: object = None
    adapted: AdaptedSpec | None = None

    def state(self, c: ControlPair) -> StateTrajectory:
        return solve_forward(self.mode, self.params, self.kernel, self.phi0, self.sigma0, c,
                             self.tgrid, grid=self.grid)

    def cost_of(self, traj: StateTrajectory, c: ControlPair) -> float:
        if self.adapted is not None:
            return eval_adapted(self.adapted, traj, c)
        return eval_cost(self.spec, traj, c)

    def cost(self, c: ControlPair) -> float:
        return self.cost_of(self.state(c), c)

    def gradient(self, c: ControlPair, traj: StateTrajectory | None = None) -> ControlPair:
        if traj is None:
            traj = self.state(c)
        if self.spec.state_independent:
            adj = _zero_adjoint(traj)
        else:
            adj = solve_adjoint(self.mode, self.params, self.kernel, traj, self.spec, c)
        return reduced_gradient(self.params, adj, c, self.spec, self.adapted)


def _zero_adjoint(traj: StateTrajectory) -> AdjointTrajectory:
    z = np.zeros_like(traj.phi)
    return AdjointTrajectory(forward=traj, p=z, q=z, r=z, s=z)


@dataclass(frozen=True)
class OptimizerOptions:
    max_iter: int = 50
    tol: float = 1e-3
    c1: float = 1e-4
    backtrack: float = 0.5
    init_step: float = 1.0
    max_backtracks: int = 40
    residual_step: float = 1.0


@dataclass
class OptimizationResult:
    controls: ControlPair
    history: list[dict]
    converged: bool

    @property
    def final_residual(self) -> float:
        return self.history[-1]["vi_residual"]

    @property
    def costs(self) -> np.ndarray:
        return np.array([row["cost"] for row in self.history])


def optimize(problem: ControlProblem, init: ControlPair, opts: OptimizerOptions = OptimizerOptions(),
             log=None) -> OptimizationResult:
    """Projected gradient descent with Armijo backtracking on the box.

    Each accepted iterate ``c+ = Proj(c - t g)`` satisfies
    ``J(c+) <= J(c) + c1 <g, c+ - c>``; the loop stops once the fixed-point
    residual ``vi_residual`` drops to ``opts.tol``.
    """
    g_, tg = problem.grid, problem.tgrid
    c = project_box(init, problem.bounds)
    traj = problem.state(c)
    J = problem.cost_of(traj, c)
    grad = problem.gradient(c, traj)
    res = vi_residual(c, grad, problem.bounds, opts.residual_step, g_, tg)
    history = [_row(0, J, res, 0.0, grad, c, g_, tg)]
    if log:
        log(history[-1])
    converged = res <= opts.tol
    it = 0
    while not converged and it < opts.max_iter:
        it += 1
        t = opts.init_step
        for _ in range(opts.max_backtracks + 1):
            trial = project_box(c - grad.scale(t), problem.bounds)
            d = trial - c
            slope = inner_q(g_, tg, grad, d)
            trial_traj = problem.state(trial)
            J_trial = problem.cost_of(trial_traj, trial)
            if J_trial <= J + opts.c1 * slope and J_trial < J:
                break
            t *= opts.backtrack
        else:
            raise LineSearchError(
                f"iteration {it}: no sufficient decrease after {opts.max_backtracks} backtracks "
                f"(cost {J:.6e}, residual {res:.3e})"
            )
        c, traj, J = trial, trial_traj, J_trial
        grad = problem.gradient(c, traj)
        res = vi_residual(c, grad, problem.bounds, opts.residual_step, g_, tg)
        history.append(_row(it, J, res, t, grad, c, g_, tg))
        if log:
            log(history[-1])
        converged = res <= opts.tol
    return OptimizationResult(controls=c, history=history, converged=converged)


def _row(it, J, res, step, grad, c, grid, tgrid) -> dict:
    return {"iter": it, "cost": J, "vi_residual": res, "step": step,
            "grad_norm": norm_q(grid, tgrid, grad), "u_h1_norm": h1_time_norm(grid, tgrid, c.u)}


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(HISTORY_COLUMNS)
        for row in history:
            wr.writerow([row["iter"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])


def write_controls(c: ControlPair, grid: GridSpec, directory) -> None:
    """Final controls as two stacked CHF1 files, one record per time interval."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_chf_stack(out / "control_u.chf", grid, c.u)
    write_chf_stack(out / "control_w.chf", grid, c.w)


# -- gradient verification -------------------------------------------------------


@dataclass(frozen=True)
class TaylorReport:
    steps: np.ndarray
    remainders: np.ndarray
    pre_floor: np.ndarray
    slope: float
    pair_slopes: np.ndarray
    directional: float
    finite_difference: float
    first_order_error: float

    def passes(self, min_slope: float = 1.7, max_error: float = 2e-2) -> bool:
        return self.slope >= min_slope and self.first_order_error <= max_error


def gradient_check(problem: ControlProblem, base: ControlPair, direction: ControlPair,
                   sigma0: float = 1.0, levels: int = 6) -> TaylorReport:
    """Taylor remainder test of the adjoint gradient along ``direction``.

    ``R_k = |J(c + s_k d) - J(c) - s_k <g, d>|`` for ``s_k = sigma0 2^-k``.
    Remainders within ``1e3 * machine eps * |J|`` of the evaluation noise are
    excluded before fitting the slope of log R against log s.  The first-order
    error compares ``<g, d>`` with a central difference at the smallest step.
    """
    g_, tg = problem.grid, problem.tgrid
    traj = problem.state(base)
    J0 = problem.cost_of(traj, base)
    grad = problem.gradient(base, traj)
    dirderiv = inner_q(g_, tg, grad, direction)
    steps = sigma0 * 0.5 ** np.arange(levels)
    Jp = np.array([problem.cost(base + direction.scale(s)) for s in steps])
    R = np.abs(Jp - J0 - steps * dirderiv)
    floor = 1e3 * np.finfo(float).eps * max(abs(J0), 1e-300)
    pre = R > floor
    if pre.sum() >= 2:
        ls, lr = np.log(steps[pre]), np.log(R[pre])
        slope = float(np.polyfit(ls, lr, 1)[0])
    else:
        slope = float("nan")
    with np.errstate(divide="ignore", invalid="ignore"):
        pair = np.log2(R[:-1] / R[1:])
    s_min = steps[-1]
    Jm = problem.cost(base - direction.scale(s_min))
    fd = (Jp[-1] - Jm) / (2.0 * s_min)
    err = abs(dirderiv - fd) / max(abs(fd), 1e-300)
    return TaylorReport(steps=steps, remainders=R, pre_floor=pre, slope=slope, pair_slopes=pair,
                        directional=dirderiv, finite_difference=float(fd), first_order_error=float(err))
