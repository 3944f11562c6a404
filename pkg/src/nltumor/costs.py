"""Tracking-type cost functional and its proximal (adapted) variant.

The discrete cost on a trajectory with nt steps is

    alpha_Omega/2 |phi^N - phi_Omega|^2
      + sum_k w_k [alpha_Q/2 |phi^k - phi_Q^k|^2 + beta_Q/2 |sigma^k - sigma_Q^k|^2]
      + sum_n dt [alpha_u/2 |u_n|^2 + beta_w/2 |w_n|^2]

with trapezoid weights w_k over the nt+1 time nodes and the controls held
constant on each interval, so the control terms are integrated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import ControlPair, StateTrajectory
from .grid import GridSpec, TimeGrid


def _as_target(value, grid: GridSpec, nt: int | None, name: str) -> np.ndarray:
    """Broadcast a scalar, field, or space-time array to the expected target shape."""
    shape = grid.shape if nt is None else (nt + 1, *grid.shape)
    arr = np.asarray(0.0 if value is None else value, dtype=float)
    if arr.ndim == 0 or arr.shape == grid.shape:
        arr = np.broadcast_to(arr, shape)
    if arr.shape != shape:
        raise ValueError(f"{name} has shape {arr.shape}, expected {shape} or {grid.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class CostSpec:
    grid: GridSpec
    tgrid: TimeGrid
    alpha_Omega: float = 0.0
    alpha_Q: float = 0.0
    beta_Q: float = 0.0
    alpha_u: float = 0.0
    beta_w: float = 0.0
    phi_Omega: np.ndarray | float | None = None
    phi_Q: np.ndarray | float | None = None
    sigma_Q: np.ndarray | float | None = None

    def __post_init__(self):
        w = self.weights
        if any(v < 0 for v in w.values()):
            raise ValueError(f"cost weights must be nonnegative, got {w}")
        if not any(v > 0 for v in w.values()):
            raise ValueError("at least one cost weight must be positive")
        nt = self.tgrid.nt
        object.__setattr__(self, "phi_Omega", _as_target(self.phi_Omega, self.grid, None, "phi_Omega"))
        object.__setattr__(self, "phi_Q", _as_target(self.phi_Q, self.grid, nt, "phi_Q"))
        object.__setattr__(self, "sigma_Q", _as_target(self.sigma_Q, self.grid, nt, "sigma_Q"))

    @property
    def weights(self) -> dict:
        return {"alpha_Omega": self.alpha_Omega, "alpha_Q": self.alpha_Q, "beta_Q": self.beta_Q,
                "alpha_u": self.alpha_u, "beta_w": self.beta_w}

    @property
    def state_independent(self) -> bool:
        return self.alpha_Omega == 0 and self.alpha_Q == 0 and self.beta_Q == 0


@dataclass(frozen=True, eq=False)
class AdaptedSpec:
    """Cost plus 1/2 |u - u_bar|^2 + 1/2 |w - w_bar|^2 over the space-time cylinder."""

    base: CostSpec
    anchor: ControlPair


def _check(spec: CostSpec, traj: StateTrajectory, controls: ControlPair):
    if traj.grid != spec.grid or traj.tgrid != spec.tgrid:
        raise ValueError("trajectory and cost live on different grids")
    if not traj.full:
        raise ValueError("cost evaluation needs the state at every step")
    if controls.u.shape != (spec.tgrid.nt, *spec.grid.shape):
        raise ValueError(f"controls have shape {controls.u.shape}")


def _sq(grid: GridSpec, arr: np.ndarray) -> np.ndarray:
    """Squared L2 norms over space, one per leading index."""
    return np.sum(arr.reshape(arr.shape[0], -1) ** 2, axis=1) * grid.cell_volume


def control_norm_sq(grid: GridSpec, tgrid: TimeGrid, c: ControlPair) -> float:
    """|u|^2_L2(Q) + |w|^2_L2(Q) for piecewise constant controls."""
    if c.nt == 0:
        return 0.0
    return float(tgrid.dt * (np.sum(_sq(grid, c.u)) + np.sum(_sq(grid, c.w))))


def cost_terms(spec: CostSpec, traj: StateTrajectory, controls: ControlPair) -> dict:
    _check(spec, traj, controls)
    g, tg = spec.grid, spec.tgrid
    wts = tg.trapezoid_weights()
    terms = {"terminal": 0.5 * spec.alpha_Omega * g.norm_l2(traj.phi[-1] - spec.phi_Omega) ** 2}
    terms["track_phi"] = 0.5 * spec.alpha_Q * float(np.sum(wts * _sq(g, traj.phi - spec.phi_Q)))
    terms["track_sigma"] = 0.5 * spec.beta_Q * float(np.sum(wts * _sq(g, traj.sigma - spec.sigma_Q)))
    if tg.nt:
        terms["control_u"] = 0.5 * spec.alpha_u * tg.dt * float(np.sum(_sq(g, controls.u)))
        terms["control_w"] = 0.5 * spec.beta_w * tg.dt * float(np.sum(_sq(g, controls.w)))
    else:
        terms["control_u"] = terms["control_w"] = 0.0
    return terms


def eval_cost(spec: CostSpec, traj: StateTrajectory, controls: ControlPair) -> float:
    return float(sum(cost_terms(spec, traj, controls).values()))


def eval_adapted(spec: AdaptedSpec, traj: StateTrajectory, controls: ControlPair) -> float:
    base = eval_cost(spec.base, traj, controls)
    return base + 0.5 * control_norm_sq(spec.base.grid, spec.base.tgrid, controls - spec.anchor)
