"""Time stepping for the local and nonlocal state systems.

One step from ``(phi, sigma)`` at t_n to ``(phi', mu', sigma')`` at t_{n+1}
solves the linear system

    (phi' - phi)/dt = div(m grad mu') + R' - h(phi) u_n
    mu' = tau (phi' - phi)/dt + A phi' + psi'(phi) + S (phi' - phi) - chi sigma
    (sigma' - sigma)/dt = div(n grad(sigma' + chi (1 - phi'))) - R' + w_n
    R' = P(phi) (sigma' + chi (1 - phi') - mu')

with ``A = B_eps`` in the nonlocal system and ``A = -Laplacian`` in the local
one, both implicit.  Splitting B_eps into an implicit ``(J_eps * 1) phi'`` and
an explicit ``J_eps * phi`` would add ``dt (J_eps * 1) ~ dt / eps^2`` to the
viscosity, an error that grows as eps shrinks.  The stabilised potential term
is a convex-concave splitting, and because the reaction is taken with the new
(sigma', phi', mu') against one frozen rate P(phi), the discrete energy

    E = E_int(phi) + int psi(phi) + 1/2 |sigma|^2 + chi int sigma (1 - phi)

obeys an exact dissipation law when u = w = 0, provided ``psi'' <= 2 S`` along
the step (S = 2 covers |phi| <= sqrt(5/3) for the quartic well).  Mass of phi
is conserved exactly when P = 0 and h u = 0, and that of sigma when in addition
w = 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from . import kernel as kern
from .grid import GridMismatchError, GridSpec, TimeGrid, write_chf_stack
from .linsolve import SolverError, StepOperator
from .physics import ModelParams

Mode = Literal["local", "nonlocal"]

DIAGNOSTIC_COLUMNS = (
    "E_total", "E_interface", "int_psi", "half_sigma_sq", "chi_coupling", "mean_phi", "mean_sigma",
)


class StepFailure(RuntimeError):
    """A time step produced non-finite values or its linear solve failed."""

    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


# -- controls ------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Pointwise bounds for (u, w); scalars or arrays broadcastable to the controls."""

    u_min: float | np.ndarray = 0.0
    u_max: float | np.ndarray = 1.0
    w_min: float | np.ndarray = 0.0
    w_max: float | np.ndarray = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.u_min) > np.asarray(self.u_max)):
            raise ValueError("inverted bounds: u_min > u_max somewhere")
        if np.any(np.asarray(self.w_min) > np.asarray(self.w_max)):
            raise ValueError("inverted bounds: w_min > w_max somewhere")
        if np.any(np.asarray(self.u_min) < 0):
            raise ValueError("u_min must be nonnegative")

    def contains(self, c: "ControlPair") -> bool:
        return bool(np.all(c.u >= self.u_min) and np.all(c.u <= self.u_max)
                    and np.all(c.w >= self.w_min) and np.all(c.w <= self.w_max))


@dataclass(frozen=True, eq=False)
class ControlPair:
    """Radiotherapy u and nutrient supply w, one field per time interval.

    Arrays have shape ``(nt, *grid.shape)``; entry n acts on (t_n, t_{n+1}).
    """

    u: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        w = np.asarray(self.w, dtype=float)
        if u.shape != w.shape:
            raise ValueError(f"u has shape {u.shape} but w has shape {w.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(w))):
            raise ValueError("controls contain non-finite values")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "w", w)

    @classmethod
    def zeros(cls, grid: GridSpec, nt: int) -> "ControlPair":
        z = np.zeros((nt, *grid.shape))
        return cls(z, z.copy())

    @classmethod
    def constant(cls, grid: GridSpec, nt: int, u: float, w: float) -> "ControlPair":
        shp = (nt, *grid.shape)
        return cls(np.full(shp, float(u)), np.full(shp, float(w)))

    @property
    def nt(self) -> int:
        return self.u.shape[0]

    def __add__(self, other: "ControlPair") -> "ControlPair":
        return ControlPair(self.u + other.u, self.w + other.w)

    def __sub__(self, other: "ControlPair") -> "ControlPair":
        return ControlPair(self.u - other.u, self.w - other.w)

    def scale(self, a: float) -> "ControlPair":
        return ControlPair(a * self.u, a * self.w)


# -- states --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StateSnapshot:
    t: float
    phi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        for name in ("phi", "mu", "sigma"):
            self.grid.check(getattr(self, name), name)


@dataclass(frozen=True, eq=False)
class StateTrajectory:
    """States at the stored time levels plus per-step diagnostics.

    ``phi``, ``mu``, ``sigma`` have shape ``(len(steps), *grid.shape)``;
    ``steps`` lists the stored step indices (every step unless a stride was
    requested).  Diagnostics cover every step ``0..nt``.
    """

    mode: str
    grid: GridSpec
    tgrid: TimeGrid
    eps: float | None
    steps: np.ndarray
    phi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.tgrid.times[self.steps]

    @property
    def full(self) -> bool:
        return len(self.steps) == self.tgrid.nt + 1

    def snapshot(self, i: int) -> StateSnapshot:
        return StateSnapshot(float(self.times[i]), self.phi[i], self.mu[i], self.sigma[i], self.grid)

    def __len__(self) -> int:
        return len(self.steps)


def initial_mu(mode: Mode, params: ModelParams, grid: GridSpec, phi0, sigma0, kernel=None):
    """Chemical potential of the initial state, ``A phi0 + psi'(phi0) - chi sigma0``."""
    if mode == "nonlocal":
        interface = kern.b_eps(kernel, phi0)
    else:
        interface = -grid.laplacian(phi0)
    return interface + params.potential.psi_prime(phi0) - params.chi * sigma0


def energy_terms(mode: Mode, params: ModelParams, grid: GridSpec, phi, sigma, kernel=None) -> dict:
    if mode == "nonlocal":
        e_int = kern.energy_eps(kernel, phi)
    else:
        e_int = grid.dirichlet_energy(phi)
    vol = grid.cell_volume
    int_psi = float(np.sum(params.potential.psi(phi)) * vol)
    half_sig = 0.5 * grid.inner(sigma, sigma)
    coupling = params.chi * float(np.sum(sigma * (1.0 - phi)) * vol)
    return {
        "E_total": e_int + int_psi + half_sig + coupling,
        "E_interface": e_int,
        "int_psi": int_psi,
        "half_sigma_sq": half_sig,
        "chi_coupling": coupling,
        "mean_phi": grid.mean(phi),
        "mean_sigma": grid.mean(sigma),
    }


def _check_mode(mode, kernel):
    if mode not in ("local", "nonlocal"):
        raise ValueError(f"mode must be 'local' or 'nonlocal', got {mode!r}")
    if (mode == "nonlocal") != (kernel is not None):
        raise ValueError("a kernel is required for the nonlocal system and not allowed for the local one")


def step_residual0(mode: Mode, params: ModelParams, grid: GridSpec, phi, sigma, u_n, w_n, kernel=None):
    """Residual of the step equations at ``phi' = phi, mu' = 0, sigma' = sigma``."""
    P = params.P(phi)
    drive = P * (sigma + params.chi * (1.0 - phi))
    mob_n = params.mobility_n(phi) if callable(params.mobility_n) else params.mobility_n

    def div_n(v):
        if np.ndim(mob_n) == 0:
            return mob_n * grid.laplacian(v)
        return grid.div_coeff_grad(mob_n, v)

    if mode == "nonlocal":
        interface = kern.b_eps(kernel, phi)
    else:
        interface = -grid.laplacian(phi)
    f1 = -drive + params.h(phi) * u_n
    f2 = interface + params.potential.psi_prime(phi) - params.chi * sigma
    f3 = div_n(params.chi * phi - sigma) + drive - w_n
    return np.stack([f1, f2, f3])


def _step(mode, params, grid, kernel, snap: StateSnapshot, u_n, w_n, dt, step_index=0):
    u_n = grid.check(u_n, "u_n")
    w_n = grid.check(w_n, "w_n")
    op = StepOperator.build(grid, params, snap.phi, dt, kernel)
    F0 = step_residual0(mode, params, grid, snap.phi, snap.sigma, u_n, w_n, kernel)
    try:
        x = op.solve(-F0)
    except SolverError as exc:
        raise StepFailure(str(exc), step_index) from exc
    phi = snap.phi + x[0]
    sigma = snap.sigma + x[2]
    mu = x[1]
    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise StepFailure("non-finite state", step_index)
    return StateSnapshot(snap.t + dt, phi, mu, sigma, grid)


def step_nonlocal(params: ModelParams, kernel, snap: StateSnapshot, u_n, w_n, dt: float) -> StateSnapshot:
    """Advance the nonlocal system by one step of size dt."""
    if kernel.grid != snap.grid:
        raise GridMismatchError("snapshot and kernel live on different grids")
    return _step("nonlocal", params, snap.grid, kernel, snap, u_n, w_n, dt)


def step_local(params: ModelParams, snap: StateSnapshot, u_n, w_n, dt: float) -> StateSnapshot:
    """Advance the local system by one step of size dt."""
    return _step("local", params, snap.grid, None, snap, u_n, w_n, dt)


def _resolve_grid(kernel, grid, phi0) -> GridSpec:
    if kernel is not None:
        if grid is not None and grid != kernel.grid:
            raise GridMismatchError("grid argument differs from the kernel's grid")
        return kernel.grid
    if grid is None:
        raise ValueError("the local system needs an explicit grid")
    return grid


def solve_forward(
    mode: Mode,
    params: ModelParams,
    kernel,
    phi0,
    sigma0,
    controls: ControlPair | None,
    tgrid: TimeGrid,
    *,
    grid: GridSpec | None = None,
    stride: int = 1,
) -> StateTrajectory:
    """Integrate from (phi0, sigma0) over ``tgrid`` and record diagnostics at every step.

    States are stored every ``stride`` steps plus the final one; the adjoint
    solver needs ``stride = 1``.
    """
    _check_mode(mode, kernel)
    grid = _resolve_grid(kernel, grid, phi0)
    phi0 = grid.check(phi0, "phi0")
    sigma0 = grid.check(sigma0, "sigma0")
    nt = tgrid.nt
    if controls is None:
        controls = ControlPair.zeros(grid, nt)
    if controls.u.shape != (nt, *grid.shape):
        raise ValueError(f"controls have shape {controls.u.shape}, expected {(nt, *grid.shape)}")
    if stride < 1:
        raise ValueError("stride must be >= 1")

    steps = list(range(0, nt + 1, stride))
    if steps[-1] != nt:
        steps.append(nt)
    store = {s: i for i, s in enumerate(steps)}
    phis = np.empty((len(steps), *grid.shape))
    mus = np.empty_like(phis)
    sigmas = np.empty_like(phis)
    diag = {c: np.empty(nt + 1) for c in DIAGNOSTIC_COLUMNS}

    snap = StateSnapshot(0.0, phi0, initial_mu(mode, params, grid, phi0, sigma0, kernel), sigma0, grid)
    dt = tgrid.dt
    for k in range(nt + 1):
        if k > 0:
            snap = _step(mode, params, grid, kernel, snap, controls.u[k - 1], controls.w[k - 1], dt, k)
            snap = StateSnapshot(float(tgrid.times[k]), snap.phi, snap.mu, snap.sigma, grid)
        for c, v in energy_terms(mode, params, grid, snap.phi, snap.sigma, kernel).items():
            diag[c][k] = v
        if k in store:
            i = store[k]
            phis[i], mus[i], sigmas[i] = snap.phi, snap.mu, snap.sigma

    return StateTrajectory(
        mode=mode, grid=grid, tgrid=tgrid, eps=None if kernel is None else kernel.eps,
        steps=np.asarray(steps), phi=phis, mu=mus, sigma=sigmas, diagnostics=diag,
    )


# -- comparisons and probes ------------------------------------------------------


def _require_full(*trajs):
    for t in trajs:
        if not t.full:
            raise ValueError("trajectory comparison needs states at every step")


def state_distances(a: StateTrajectory, b: StateTrajectory) -> dict:
    """Norms of (a - b): sup_t |phi|_L2, |sigma|_L2(Q) (trapezoid in time), sup_t |sigma|_L2."""
    _require_full(a, b)
    if a.tgrid != b.tgrid or a.grid != b.grid:
        raise ValueError("trajectories live on different grids")
    g = a.grid
    dphi = np.array([g.norm_l2(x) for x in a.phi - b.phi])
    dsig = np.array([g.norm_l2(x) for x in a.sigma - b.sigma])
    wts = a.tgrid.trapezoid_weights()
    return {
        "phi_sup_l2": float(dphi.max()),
        "sigma_l2q": float(np.sqrt(np.sum(wts * dsig**2))),
        "sigma_sup_l2": float(dsig.max()),
    }


@dataclass(frozen=True)
class DependenceReport:
    numerator: float
    denominator: float

    @property
    def ratio(self) -> float:
        if self.denominator == 0.0:
            return 0.0 if self.numerator == 0.0 else float("inf")
        return self.numerator / self.denominator


def continuous_dependence_probe(
    params: ModelParams,
    phi0,
    sigma0,
    controls: ControlPair,
    perturbed: ControlPair,
    tgrid: TimeGrid,
    *,
    grid: GridSpec | None = None,
    mode: Mode = "local",
    kernel=None,
) -> DependenceReport:
    """Ratio of the state difference to the control difference for two runs.

    State side: ``sup_t |dphi|_L2 + |dphi|_L2(H1) + sup_t |dsigma|_L2 + |dsigma|_L2(H1)``.
    Control side: ``|du|_L2(L^{6/5}) + |dw|_L2(L2)``; the L2 norm stands in for
    the dual norm of H1 on the w side (it bounds it from above).
    """
    a = solve_forward(mode, params, kernel, phi0, sigma0, controls, tgrid, grid=grid)
    b = solve_forward(mode, params, kernel, phi0, sigma0, perturbed, tgrid, grid=grid)
    g = a.grid
    wts = tgrid.trapezoid_weights()

    def sup_plus_l2h1(d):
        l2 = np.array([g.norm_l2(x) for x in d])
        h1 = np.array([g.norm_h1(x) for x in d])
        return float(l2.max() + np.sqrt(np.sum(wts * h1**2)))

    num = sup_plus_l2h1(a.phi - b.phi) + sup_plus_l2h1(a.sigma - b.sigma)
    dt = tgrid.dt
    du = perturbed.u - controls.u
    dw = perturbed.w - controls.w
    den = float(np.sqrt(dt * sum(g.norm_lp(x, 1.2) ** 2 for x in du))
                + np.sqrt(dt * sum(g.norm_l2(x) ** 2 for x in dw)))
    return DependenceReport(num, den)


# -- export ----------------------------------------------------------------------


def write_diagnostics_csv(traj: StateTrajectory, path) -> None:
    times = traj.tgrid.times
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("step", "t", *DIAGNOSTIC_COLUMNS))
        for k in range(traj.tgrid.nt + 1):
            wr.writerow((k, repr(float(times[k])), *(repr(float(traj.diagnostics[c][k])) for c in DIAGNOSTIC_COLUMNS)))


def write_snapshots(traj: StateTrajectory, directory, stride: int = 1) -> list[Path]:
    """One CHF1 file per stored step holding the records phi, mu, sigma."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, k in enumerate(traj.steps):
        if k % stride and k != traj.tgrid.nt:
            continue
        p = out / f"state_{int(k):06d}.chf"
        write_chf_stack(p, traj.grid, (traj.phi[i], traj.mu[i], traj.sigma[i]))
        paths.append(p)
    return paths
