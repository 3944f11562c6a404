"""Convolution kernels J_eps, the truncated convolution, B_eps and E_eps.

The radial profile is the compactly supported bump ``c (1 - r^2)^3`` on
[0, 1], scaled so that ``int_0^inf r^(d+1-alpha) rho(r) dr = 2 / C_dim``.
With that scaling ``B_eps v = (J_eps * 1) v - J_eps * v`` is consistent
with ``-Laplacian v`` as eps -> 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft, integrate, special

from .grid import GridMismatchError, GridSpec

NORMALIZATION_TOL = 1e-10


class KernelResolutionError(ValueError):
    """The interaction range is too short for the grid to resolve."""


def sphere_area(d: int) -> float:
    """Surface measure of the unit sphere S^(d-1)."""
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def c_dim(d: int) -> float:
    """``int_{S^(d-1)} |sigma . e_1|^2``; equals |S^(d-1)| / d."""
    return sphere_area(d) / d


def _radial_moment(power: float, k: int) -> float:
    # int_0^1 r^power (1 - r^2)^k dr
    return 0.5 * special.beta((power + 1.0) / 2.0, k + 1.0)


def _gauss_legendre_01(f, nodes: int = 200) -> float:
    x, w = np.polynomial.legendre.leggauss(nodes)
    r = 0.5 * (x + 1.0)
    return float(0.5 * np.sum(w * f(r)))


@dataclass(frozen=True)
class KernelProfile:
    """Radial bump rho(r) = coeff (1 - r^2)^3, zero for r >= 1."""

    alpha: float
    d: int
    coeff: float
    c_alpha_d: float

    def rho(self, r):
        r = np.asarray(r, dtype=float)
        return np.where(r < 1.0, self.coeff * (1.0 - r * r) ** 3, 0.0)

    def rho_prime(self, r):
        r = np.asarray(r, dtype=float)
        return np.where(r < 1.0, -6.0 * self.coeff * r * (1.0 - r * r) ** 2, 0.0)

    def rho_second(self, r):
        r = np.asarray(r, dtype=float)
        s = 1.0 - r * r
        return np.where(r < 1.0, self.coeff * (-6.0 * s * s + 24.0 * r * r * s), 0.0)

    def normalization_integral(self) -> float:
        """``int_0^1 r^(d+1-alpha) rho(r) dr`` by Gauss-Legendre quadrature."""
        p = self.d + 1 - self.alpha
        return _gauss_legendre_01(lambda r: r**p * self.rho(r))

    def J(self, r, eps: float):
        """Kernel value at distance r > 0 for interaction range eps."""
        r = np.asarray(r, dtype=float)
        rho_eps = self.rho(r / eps) / eps**self.d
        with np.errstate(divide="ignore"):
            sing = np.where(r > 0, r, 1.0) ** self.alpha if self.alpha else 1.0
        return rho_eps / (eps ** (2.0 - self.alpha) * sing)

    def mass(self, eps: float) -> float:
        """``int_{R^d} J_eps(z) dz``, the interior value of J_eps * 1."""
        p = self.d - 1 - self.alpha
        return sphere_area(self.d) * self.coeff * _radial_moment(p, 3) / eps**2


def build_profile(alpha: float = 0.0, d: int = 2) -> KernelProfile:
    if d not in (2, 3):
        raise ValueError(f"dimension must be 2 or 3, got {d}")
    if d == 2 and alpha != 0.0:
        raise ValueError("in 2-D only the nonsingular kernel alpha = 0 is admissible")
    if d == 3 and not 0.0 <= alpha < d - 2:
        raise ValueError(f"alpha must lie in [0, {d - 2}) for d = {d}, got {alpha}")
    target = 2.0 / c_dim(d)
    coeff = target / _radial_moment(d + 1 - alpha, 3)
    c_ad = 6.0 * coeff * _radial_moment(d - alpha, 2)
    prof = KernelProfile(alpha=float(alpha), d=d, coeff=float(coeff), c_alpha_d=float(c_ad))
    got = prof.normalization_integral()
    if abs(got - target) > NORMALIZATION_TOL * target:
        raise ValueError(f"profile normalization failed: {got!r} vs {target!r}")
    return prof


@dataclass(frozen=True, eq=False)
class DiscreteKernel:
    """J_eps sampled on the grid offsets with |z| < eps.

    ``stencil`` already carries the midpoint weight h^d, so the truncated
    convolution is ``sum_y stencil[x - y] v[y]`` over cells y in the domain.
    """

    eps: float
    profile: KernelProfile
    grid: GridSpec
    stencil: np.ndarray
    radius: int
    fft_shape: tuple[int, ...]
    _stencil_hat: np.ndarray = field(repr=False)
    conv_one: np.ndarray = field(default=None, repr=False)
    symbol: np.ndarray = field(default=None, repr=False)

    def convolve(self, v: np.ndarray) -> np.ndarray:
        return convolve(self, v)


def _origin_weight(profile: KernelProfile, eps: float, h: float) -> float:
    # cell average of J over a ball with the cell's volume
    d = profile.d
    R = h * (math.gamma(d / 2 + 1) / math.pi ** (d / 2)) ** (1.0 / d)
    p = d - 1 - profile.alpha
    val, _ = integrate.quad(lambda r: r**p * float(profile.rho(r / eps)), 0.0, min(R, eps))
    total = sphere_area(d) * val / (eps**d * eps ** (2.0 - profile.alpha))
    return total / h**d


def sample_kernel(profile: KernelProfile, eps: float, grid: GridSpec) -> DiscreteKernel:
    if grid.d != profile.d:
        raise ValueError(f"profile is {profile.d}-D but the grid is {grid.d}-D")
    h = grid.h
    if eps < 2.0 * h * (1 - 1e-12):
        raise KernelResolutionError(f"eps = {eps:g} < 2h = {2 * h:g}: kernel not resolved")
    m = int(math.ceil(eps / h))
    offs = np.arange(-m, m + 1) * h
    axes = np.meshgrid(*([offs] * grid.d), indexing="ij")
    r = np.sqrt(sum(a * a for a in axes))
    vals = np.where(r < eps, profile.J(np.where(r > 0, r, 1.0), eps), 0.0)
    centre = (m,) * grid.d
    if profile.alpha > 0:
        vals[centre] = _origin_weight(profile, eps, h)
    else:
        vals[centre] = float(profile.rho(0.0)) / eps ** (grid.d + 2)
    # enforce exact z -> -z symmetry against rounding in r
    for ax in range(grid.d):
        vals = 0.5 * (vals + np.flip(vals, axis=ax))
    stencil = vals * grid.cell_volume

    fft_shape = tuple(fft.next_fast_len(grid.n + 2 * m, real=True) for _ in range(grid.d))
    st_hat = fft.rfftn(stencil, s=fft_shape)
    k = DiscreteKernel(
        eps=float(eps), profile=profile, grid=grid, stencil=stencil, radius=m,
        fft_shape=fft_shape, _stencil_hat=st_hat,
    )
    object.__setattr__(k, "conv_one", convolve(k, np.ones(grid.shape)))
    object.__setattr__(k, "symbol", interior_symbol(k))
    return k


def convolve(k: DiscreteKernel, v: np.ndarray) -> np.ndarray:
    """``(J_eps * v)(x) = h^d sum_{y in Omega} J_eps(x - y) v(y)``.

    Zero padding to at least n + 2m per axis realises integration over the
    domain only (no periodic wraparound).
    """
    v = np.asarray(v, dtype=float)
    if v.shape != k.grid.shape:
        raise GridMismatchError(f"field has shape {v.shape}, kernel grid is {k.grid.shape}")
    full = fft.irfftn(fft.rfftn(v, s=k.fft_shape) * k._stencil_hat, s=k.fft_shape)
    m, n = k.radius, k.grid.n
    return np.ascontiguousarray(full[(slice(m, m + n),) * k.grid.d])


def b_eps(k: DiscreteKernel, v: np.ndarray) -> np.ndarray:
    """Nonlocal operator ``(J_eps * 1) v - J_eps * v``."""
    v = np.asarray(v, dtype=float)
    if v.shape != k.grid.shape:
        raise GridMismatchError(f"field has shape {v.shape}, kernel grid is {k.grid.shape}")
    # B annihilates constants; shifting by one sample makes that exact in floating point
    w = v - v.flat[0]
    return k.conv_one * w - convolve(k, w)


def energy_eps(k: DiscreteKernel, v: np.ndarray) -> float:
    """Nonlocal interaction energy ``E_eps(v) = 1/2 <B_eps v, v>``."""
    v = np.asarray(v, dtype=float)
    w = v - v.flat[0]
    e = 0.5 * k.grid.inner(b_eps(k, w), w)
    return max(e, 0.0)  # positive semidefinite form; clip roundoff below zero


def interior_symbol(k: DiscreteKernel) -> np.ndarray:
    """Eigenvalues of B_eps on the Neumann cosine modes, ignoring boundary truncation.

    Mode ``cos(pi k . x / L)`` is mapped to itself with factor
    ``sum_z J(z) h^d (1 - cos(pi k . z / L))`` away from the boundary.
    """
    g = k.grid
    m = k.radius
    offs = np.arange(-m, m + 1)
    C = np.cos(np.pi * np.outer(np.arange(g.n), offs) / g.n)
    hat = k.stencil
    for ax in range(g.d):
        hat = np.moveaxis(np.tensordot(C, hat, axes=([1], [ax])), 0, ax)
    return float(np.sum(k.stencil)) - hat


def interior_mask(grid: GridSpec, eps: float) -> np.ndarray:
    """Cells whose eps-ball lies inside the domain."""
    mask = np.ones(grid.shape, dtype=bool)
    x = grid.centers(axis=0)
    inside = (x >= eps) & (x <= grid.L - eps)
    for ax in range(grid.d):
        shp = [1] * grid.d
        shp[ax] = grid.n
        mask &= inside.reshape(shp)
    return mask
