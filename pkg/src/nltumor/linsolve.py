"""Coupled linear solves for one implicit step of the state system and its transpose.

Each time step asks for increments ``x = (dphi, mu, dsigma)`` solving ``G x = b``
with the 3x3 block operator

    [ 1/dt + chi P        -Dm + P        -P              ]
    [ tau/dt + S + A       -I             0              ]
    [ chi Dn - chi P       -P             1/dt - Dn + P  ]

where ``Dm``, ``Dn`` are the mobility-weighted Neumann Laplacians, ``P`` the
proliferation rate frozen at the old phase, and ``A`` either ``B_eps``
(nonlocal) or ``-Laplacian`` (local).  The adjoint sweep needs ``G^T``.  Both
are solved with restarted GMRES, preconditioned by the same operator with
every coefficient replaced by its mean and ``B_eps`` by its interior Fourier
symbol, which the orthonormal DCT-II turns into independent 3x3 blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft
from scipy.sparse.linalg import LinearOperator, gmres

from . import kernel as kern
from .grid import GridSpec

GMRES_RTOL = 1e-11
ACCEPT_RESIDUAL = 1e-10
RESTART = 50
MAX_RESTARTS = 10  # at most 500 Krylov iterations


class SolverError(RuntimeError):
    """The coupled linear solve did not reach the required residual."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


def _mobility_field(mob, phi: np.ndarray):
    if callable(mob):
        return np.asarray(mob(phi), dtype=float)
    return float(mob)


@dataclass
class StepOperator:
    """Block operator of one step, frozen at the old phase ``phi``."""

    grid: GridSpec
    dt: float
    tau: float
    chi: float
    S: float
    P: np.ndarray
    mob_m: object
    mob_n: object
    kernel: object = None  # None selects the local operator

    @classmethod
    def build(cls, grid, params, phi, dt, kernel=None):
        return cls(
            grid=grid, dt=float(dt), tau=params.tau, chi=params.chi, S=params.S,
            P=params.P(phi),
            mob_m=_mobility_field(params.mobility_m, phi),
            mob_n=_mobility_field(params.mobility_n, phi),
            kernel=kernel,
        )

    # -- pieces ----------------------------------------------------------

    def _div(self, mob, v):
        if np.ndim(mob) == 0:
            return mob * self.grid.laplacian(v)
        return self.grid.div_coeff_grad(mob, v)

    def _A(self, v):
        if self.kernel is None:
            return -self.grid.laplacian(v)
        return kern.b_eps(self.kernel, v)

    @property
    def scales(self) -> tuple[float, float, float]:
        c_bar = 0.0 if self.kernel is None else float(np.mean(self.kernel.conv_one))
        a = self.tau / self.dt + self.S + c_bar
        return self.dt, 1.0 / a, self.dt

    # -- products --------------------------------------------------------

    def apply(self, x: np.ndarray) -> np.ndarray:
        f, m, s = x
        P, chi, dt = self.P, self.chi, self.dt
        r1 = f / dt + chi * P * f - self._div(self.mob_m, m) + P * m - P * s
        r2 = (self.tau / dt + self.S) * f + self._A(f) - m
        r3 = chi * self._div(self.mob_n, f) - chi * P * f - P * m + s / dt - self._div(self.mob_n, s) + P * s
        return np.stack([r1, r2, r3])

    def apply_transpose(self, y: np.ndarray) -> np.ndarray:
        a, b, c = y
        P, chi, dt = self.P, self.chi, self.dt
        t1 = a / dt + chi * P * a + (self.tau / dt + self.S) * b + self._A(b) \
            + chi * self._div(self.mob_n, c) - chi * P * c
        t2 = -self._div(self.mob_m, a) + P * a - b - P * c
        t3 = -P * a + c / dt - self._div(self.mob_n, c) + P * c
        return np.stack([t1, t2, t3])

    # -- preconditioner --------------------------------------------------

    def _mode_inverse(self) -> np.ndarray:
        g = self.grid
        lam = g.neumann_eigenvalues().ravel()
        p = float(np.mean(self.P))
        mm = float(np.mean(self.mob_m))
        mn = float(np.mean(self.mob_n))
        A = lam if self.kernel is None else self.kernel.symbol.ravel()
        dt, chi = self.dt, self.chi
        D = self.scales
        M = np.zeros((lam.size, 3, 3))
        M[:, 0, 0] = 1 / dt + chi * p
        M[:, 0, 1] = mm * lam + p
        M[:, 0, 2] = -p
        M[:, 1, 0] = self.tau / dt + self.S + A
        M[:, 1, 1] = -1.0
        M[:, 2, 0] = -chi * mn * lam - chi * p
        M[:, 2, 1] = -p
        M[:, 2, 2] = 1 / dt + mn * lam + p
        M *= np.asarray(D)[None, :, None]
        return np.linalg.inv(M)

    def solve(self, b: np.ndarray, transpose: bool = False) -> np.ndarray:
        """Solve ``G x = b`` (or ``G^T x = b``) for stacked fields of shape (3, *grid.shape)."""
        return _block_solve(self, np.asarray(b, dtype=float), transpose)


def _block_solve(op: StepOperator, b: np.ndarray, transpose: bool) -> np.ndarray:
    g = op.grid
    shape = g.shape
    N = g.size
    D = np.asarray(op.scales).reshape(3, *([1] * g.d))
    if not np.all(np.isfinite(b)):
        raise SolverError("right-hand side contains non-finite values")
    if not np.any(b):
        return np.zeros_like(b)

    Minv = op._mode_inverse()
    path = "kji,kj->ki" if transpose else "kij,kj->ki"

    def precond(rv):
        r = rv.reshape(3, *shape)
        rh = np.stack([fft.dctn(r[i], norm="ortho").ravel() for i in range(3)], axis=1)
        z = np.einsum(path, Minv, rh)
        return np.concatenate([fft.idctn(z[:, i].reshape(shape), norm="ortho").ravel() for i in range(3)])

    if transpose:
        # G^T x = b  <=>  (D G)^T z = b with x = D z
        def matvec(zv):
            return op.apply_transpose(D * zv.reshape(3, *shape)).ravel()
        rhs = b
    else:
        def matvec(xv):
            return (D * op.apply(xv.reshape(3, *shape))).ravel()
        rhs = D * b

    A = LinearOperator((3 * N, 3 * N), matvec=matvec, dtype=float)
    Mop = LinearOperator((3 * N, 3 * N), matvec=precond, dtype=float)
    rhs_v = rhs.ravel()
    sol, _info = gmres(A, rhs_v, x0=precond(rhs_v), M=Mop, rtol=GMRES_RTOL, atol=0.0,
                       restart=RESTART, maxiter=MAX_RESTARTS)
    res = float(np.linalg.norm(matvec(sol) - rhs_v) / np.linalg.norm(rhs_v))
    if not np.isfinite(res) or res > ACCEPT_RESIDUAL:
        kind = "transposed" if transpose else "forward"
        raise SolverError(f"{kind} step solve stalled at relative residual {res:.3e}", res)
    x = sol.reshape(3, *shape)
    return D * x if transpose else x
