"""Backward sweep for the dual variables (p, q, r) of the state system.

The multipliers of step k (from t_k to t_{k+1}) solve ``G_k^T (p, q, r)_k = b_k``
where ``G_k`` is the block operator of that forward step and ``b_k`` collects
the cost derivative at t_{k+1} and the explicit dependence of step k+1 on the
state it starts from.  Written out, this is a backward Euler discretisation of

    -d/dt (p + tau q) + A q + psi''(phi) q + chi Lap r + chi P (p - r)
        = P'(phi) (sigma + chi (1 - phi) - mu) (p - r) - h'(phi) u p + alpha_Q (phi - phi_Q)
    -q - div(m grad p) + P(phi) (p - r) = 0
    -d/dt r - div(n grad r) - P(phi) (p - r) - chi q = beta_Q (sigma - sigma_Q)

with ``(p + tau q)(T) = alpha_Omega (phi(T) - phi_Omega)`` and ``r(T) = 0``,
where ``A`` is B_eps or -Laplacian.  The middle relation holds exactly at every
level, and because the sweep is the transpose of the forward step the reduced
gradient is exact up to the linear-solver tolerance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import fft
from scipy.sparse.linalg import LinearOperator, cg

from .costs import CostSpec
from .forward import ControlPair, StateTrajectory, _check_mode
from .grid import GridSpec
from .linsolve import SolverError, StepOperator
from .physics import ModelParams

ELLIPTIC_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class AdjointSnapshot:
    t: float
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    s: np.ndarray


@dataclass(frozen=True, eq=False)
class AdjointTrajectory:
    """Dual variables at every time level, indexed like the forward steps.

    Index k < nt holds the multipliers of the step leaving t_k; index nt holds
    the terminal data with (p, q) recovered from s and r.
    """

    forward: StateTrajectory
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    s: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.forward.tgrid.times

    def snapshot(self, k: int) -> AdjointSnapshot:
        return AdjointSnapshot(float(self.times[k]), self.p[k], self.q[k], self.r[k], self.s[k])

    def backward(self):
        """Snapshots from t = T down to t = 0."""
        for k in range(len(self.p) - 1, -1, -1):
            yield self.snapshot(k)


def terminal_conditions(spec: CostSpec, phi_T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    phi_T = spec.grid.check(phi_T, "phi_T")
    return spec.alpha_Omega * (phi_T - spec.phi_Omega), np.zeros_like(phi_T)


def recover_pq(params: ModelParams, grid: GridSpec, phi_bar, s, r) -> tuple[np.ndarray, np.ndarray]:
    """Split s = p + tau q using ``q = -div(m grad p) + P(phi_bar)(p - r)``.

    Solves ``(I - tau div(m grad .) + tau P) p = s + tau P r`` by preconditioned CG.
    """
    if not params.constant_mobilities():
        raise ValueError("the dual system is implemented for constant mobilities only")
    phi_bar, s, r = (grid.check(a, n) for a, n in ((phi_bar, "phi_bar"), (s, "s"), (r, "r")))
    tau, m = params.tau, float(params.mobility_m)
    P = params.P(phi_bar)
    rhs = s + tau * P * r
    if not np.any(rhs):
        p = np.zeros(grid.shape)
    else:
        shape = grid.shape
        diag = 1.0 + tau * m * grid.neumann_eigenvalues() + tau * float(np.mean(P))

        def matvec(v):
            v = v.reshape(shape)
            return (v - tau * m * grid.laplacian(v) + tau * P * v).ravel()

        def precond(v):
            return fft.idctn(fft.dctn(v.reshape(shape), norm="ortho") / diag, norm="ortho").ravel()

        N = grid.size
        A = LinearOperator((N, N), matvec=matvec, dtype=float)
        M = LinearOperator((N, N), matvec=precond, dtype=float)
        sol, _ = cg(A, rhs.ravel(), x0=precond(rhs.ravel()), M=M, rtol=ELLIPTIC_RTOL, atol=0.0, maxiter=500)
        res = np.linalg.norm(matvec(sol) - rhs.ravel()) / np.linalg.norm(rhs)
        if res > 1e-10:
            raise SolverError(f"elliptic split of s stalled at relative residual {res:.3e}", res)
        p = sol.reshape(shape)
    q = (s - p) / tau
    return p, q


def dual2_residual(params: ModelParams, grid: GridSpec, phi_bar, p, q, r) -> np.ndarray:
    """``-q - div(m grad p) + P(phi_bar)(p - r)``; zero for a consistent triple."""
    m = params.mobility_m
    return -q - m * grid.laplacian(p) + params.P(phi_bar) * (p - r)


def _rhs(mode, params, fwd: StateTrajectory, controls: ControlPair, spec: CostSpec,
         nxt: AdjointSnapshot, k: int):
    """Right-hand side of the transposed step k, built from level k+1."""
    nt = fwd.tgrid.nt
    dt = fwd.tgrid.dt
    wrel = fwd.tgrid.trapezoid_weights()[k + 1] / dt
    j = k + 1
    phi, sigma = fwd.phi[j], fwd.sigma[j]
    b_phi = wrel * spec.alpha_Q * (phi - spec.phi_Q[j]) + nxt.s / dt
    b_sig = wrel * spec.beta_Q * (sigma - spec.sigma_Q[j]) + nxt.r / dt
    if j < nt:
        # step j starts from level j: derivatives of its explicit terms
        drive = fwd.sigma[j + 1] + params.chi * (1.0 - fwd.phi[j + 1]) - fwd.mu[j + 1]
        b_phi = b_phi + params.dP(phi) * drive * (nxt.p - nxt.r) \
            - params.dh(phi) * controls.u[j] * nxt.p \
            - params.potential.psi_second(phi) * nxt.q + params.S * nxt.q
        b_sig = b_sig + params.chi * nxt.q
    return np.stack([b_phi, np.zeros_like(b_phi), b_sig])


def step_backward(mode, params: ModelParams, kernel, fwd: StateTrajectory, controls: ControlPair,
                  spec: CostSpec, nxt: AdjointSnapshot, k: int) -> AdjointSnapshot:
    """Dual variables at level k from those at level k+1."""
    g = fwd.grid
    op = StepOperator.build(g, params, fwd.phi[k], fwd.tgrid.dt, kernel)
    b = _rhs(mode, params, fwd, controls, spec, nxt, k)
    lam = op.solve(b, transpose=True)
    p, q, r = lam
    if not np.all(np.isfinite(lam)):
        raise SolverError(f"non-finite dual variables at step {k}")
    return AdjointSnapshot(float(fwd.tgrid.times[k]), p, q, r, p + params.tau * q)


def solve_adjoint(mode, params: ModelParams, kernel, fwd: StateTrajectory, spec: CostSpec,
                  controls: ControlPair | None = None) -> AdjointTrajectory:
    """Full backward sweep along a forward trajectory stored at every step."""
    _check_mode(mode, kernel)
    if not params.constant_mobilities():
        raise ValueError("the dual system is implemented for constant mobilities only")
    if not fwd.full:
        raise ValueError("the adjoint sweep needs the forward state at every step")
    if fwd.mode != mode:
        raise ValueError(f"forward trajectory is {fwd.mode}, adjoint requested {mode}")
    if fwd.grid != spec.grid or fwd.tgrid != spec.tgrid:
        raise ValueError("forward trajectory and cost live on different grids")
    g, nt = fwd.grid, fwd.tgrid.nt
    if controls is None:
        controls = ControlPair.zeros(g, nt)

    P = np.empty((nt + 1, *g.shape))
    Q, R, S = np.empty_like(P), np.empty_like(P), np.empty_like(P)
    s_T, r_T = terminal_conditions(spec, fwd.phi[-1])
    p_T, q_T = recover_pq(params, g, fwd.phi[-1], s_T, r_T)
    P[nt], Q[nt], R[nt], S[nt] = p_T, q_T, r_T, s_T
    snap = AdjointSnapshot(float(fwd.tgrid.times[-1]), p_T, q_T, r_T, s_T)
    for k in range(nt - 1, -1, -1):
        snap = step_backward(mode, params, kernel, fwd, controls, spec, snap, k)
        P[k], Q[k], R[k], S[k] = snap.p, snap.q, snap.r, snap.s
    return AdjointTrajectory(forward=fwd, p=P, q=Q, r=R, s=S)


def dual_distances(grid: GridSpec, tgrid, a, b) -> dict:
    """Distances between two (p, q, r) triples of space-time arrays.

    ``|p_a - p_b|_L2(H1)`` and ``|q_a - q_b|_L2(L2)`` over the step multipliers,
    ``max_t |r_a - r_b|_L2`` over all levels.
    """
    nt = tgrid.nt
    (pa, qa, ra), (pb, qb, rb) = a, b
    dp = pa[:nt] - pb[:nt]
    dq = qa[:nt] - qb[:nt]
    dr = ra - rb
    return {
        "p_l2h1": float(np.sqrt(tgrid.dt * sum(grid.norm_h1(x) ** 2 for x in dp))),
        "q_l2l2": float(np.sqrt(tgrid.dt * sum(grid.norm_l2(x) ** 2 for x in dq))),
        "r_sup_l2": float(max(grid.norm_l2(x) for x in dr)),
    }


def adjoint_distances(a: AdjointTrajectory, b: AdjointTrajectory) -> dict:
    g, tg = a.forward.grid, a.forward.tgrid
    if g != b.forward.grid or tg != b.forward.tgrid:
        raise ValueError("adjoint trajectories live on different grids")
    return dual_distances(g, tg, (a.p, a.q, a.r), (b.p, b.q, b.r))


def write_adjoint_csv(adj: AdjointTrajectory, path) -> None:
    g = adj.forward.grid
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("step", "t", "norm_p", "norm_q", "norm_r", "norm_s"))
        for k in range(len(adj.p)):
            wr.writerow((k, repr(float(adj.times[k])),
                         *(repr(g.norm_l2(v[k])) for v in (adj.p, adj.q, adj.r, adj.s))))
