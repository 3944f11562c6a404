"""Uniform cell-centred grids on (0, L)^d with homogeneous Neumann operators.

Fields are plain ``numpy`` arrays of shape ``(n,) * d``; the grid object
carries the geometry and the discrete operators acting on them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHF_MAGIC = b"CHF1"


class GridMismatchError(ValueError):
    """A field does not live on the grid it is used with."""


@dataclass(frozen=True)
class GridSpec:
    n: int
    L: float = 1.0
    d: int = 2

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 4:
            raise ValueError(f"need an integer n >= 4 cells per axis, got {self.n}")
        if not self.L > 0:
            raise ValueError(f"side length must be positive, got {self.L}")
        if self.d not in (2, 3):
            raise ValueError(f"only d = 2 or 3 is supported, got {self.d}")

    @property
    def h(self) -> float:
        return self.L / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    @property
    def volume(self) -> float:
        return self.L**self.d

    def centers(self, axis: int | None = None):
        """Cell-centre coordinates ``(i + 1/2) h``.

        With ``axis=None`` returns the full ``meshgrid`` (ij indexing).
        """
        x = (np.arange(self.n) + 0.5) * self.h
        if axis is not None:
            return x
        return np.meshgrid(*([x] * self.d), indexing="ij")

    def check(self, v: np.ndarray, name: str = "field") -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != self.shape:
            raise GridMismatchError(f"{name} has shape {v.shape}, grid expects {self.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{name} contains non-finite values")
        return v

    def full(self, value: float) -> np.ndarray:
        return np.full(self.shape, float(value))

    # -- differential operators ------------------------------------------

    def laplacian(self, v: np.ndarray) -> np.ndarray:
        """(2d+1)-point Laplacian with reflecting ghost cells (zero normal flux)."""
        v = self._shape_only(v)
        out = np.zeros_like(v)
        for ax in range(self.d):
            diff = np.diff(v, axis=ax)
            flux = np.zeros_like(v)
            hi = [slice(None)] * self.d
            lo = [slice(None)] * self.d
            hi[ax] = slice(0, -1)
            lo[ax] = slice(1, None)
            flux[tuple(hi)] += diff
            flux[tuple(lo)] -= diff
            out += flux
        return out / self.h**2

    def div_coeff_grad(self, c: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Conservative ``div(c grad v)`` with arithmetic-mean face coefficients."""
        c = self._shape_only(c)
        v = self._shape_only(v)
        if np.any(c <= 0):
            raise ValueError("coefficient field must be strictly positive")
        out = np.zeros_like(v)
        for ax in range(self.d):
            lo = [slice(None)] * self.d
            hi = [slice(None)] * self.d
            lo[ax] = slice(0, -1)
            hi[ax] = slice(1, None)
            lo, hi = tuple(lo), tuple(hi)
            face = 0.5 * (c[lo] + c[hi]) * (v[hi] - v[lo])
            out[lo] += face
            out[hi] -= face
        return out / self.h**2

    def face_gradients(self, v: np.ndarray) -> list[np.ndarray]:
        """Difference quotients on interior faces, one array per axis."""
        v = self._shape_only(v)
        return [np.diff(v, axis=ax) / self.h for ax in range(self.d)]

    # -- inner products and norms ----------------------------------------

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        u = self._shape_only(u)
        v = self._shape_only(v)
        return float(np.sum(u * v) * self.cell_volume)

    def norm_l2(self, v: np.ndarray) -> float:
        return float(np.sqrt(self.inner(v, v)))

    def seminorm_h1(self, v: np.ndarray) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.face_gradients(v)) * self.cell_volume))

    def norm_h1(self, v: np.ndarray) -> float:
        return float(np.hypot(self.norm_l2(v), self.seminorm_h1(v)))

    def norm_lp(self, v: np.ndarray, p: float) -> float:
        v = self._shape_only(v)
        return float((np.sum(np.abs(v) ** p) * self.cell_volume) ** (1.0 / p))

    def mean(self, v: np.ndarray) -> float:
        return float(np.mean(self._shape_only(v)))

    def dirichlet_energy(self, v: np.ndarray) -> float:
        """Discrete ``1/2 int |grad v|^2``, equal to ``1/2 <-lap v, v>``."""
        return 0.5 * self.seminorm_h1(v) ** 2

    def neumann_eigenvalues(self) -> np.ndarray:
        """Eigenvalues of ``-laplacian`` in the orthonormal DCT-II basis."""
        k = np.arange(self.n)
        lam1 = (2.0 - 2.0 * np.cos(np.pi * k / self.n)) / self.h**2
        lam = np.zeros(self.shape)
        for ax in range(self.d):
            shp = [1] * self.d
            shp[ax] = self.n
            lam = lam + lam1.reshape(shp)
        return lam

    def _shape_only(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != self.shape:
            raise GridMismatchError(f"field has shape {v.shape}, grid expects {self.shape}")
        return v


@dataclass(frozen=True)
class TimeGrid:
    T: float
    nt: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"final time must be positive, got {self.T}")
        if int(self.nt) != self.nt or self.nt < 0:
            raise ValueError(f"number of steps must be a nonnegative integer, got {self.nt}")

    @property
    def dt(self) -> float:
        return self.T / self.nt if self.nt else self.T

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nt + 1) if self.nt else np.zeros(1)

    def trapezoid_weights(self) -> np.ndarray:
        """Quadrature weights over the nt+1 time nodes."""
        if self.nt == 0:
            return np.zeros(1)
        w = np.full(self.nt + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w


# -- CHF1 snapshot files -----------------------------------------------------


def _pack_chf(grid: GridSpec, values: np.ndarray) -> bytes:
    values = grid.check(values)
    head = CHF_MAGIC + struct.pack("<I", grid.d) + struct.pack(f"<{grid.d}I", *grid.shape)
    head += struct.pack("<d", grid.L)
    return head + np.ascontiguousarray(values, dtype="<f8").tobytes(order="C")


def write_chf(path, grid: GridSpec, values: np.ndarray) -> None:
    """Write one field as a CHF1 record."""
    Path(path).write_bytes(_pack_chf(grid, values))


def write_chf_stack(path, grid: GridSpec, stack) -> None:
    """Write a sequence of fields as concatenated CHF1 records."""
    with open(path, "wb") as fh:
        for values in stack:
            fh.write(_pack_chf(grid, values))


def read_chf_stack(path) -> tuple[GridSpec, list[np.ndarray]]:
    data = Path(path).read_bytes()
    pos = 0
    grid = None
    fields = []
    while pos < len(data):
        if data[pos:pos + 4] != CHF_MAGIC:
            raise ValueError(f"{path}: bad magic at byte {pos}")
        pos += 4
        (d,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{d}I", data, pos)
        pos += 4 * d
        (L,) = struct.unpack_from("<d", data, pos)
        pos += 8
        if len(set(shape)) != 1:
            raise ValueError(f"{path}: non-square grids are not supported ({shape})")
        g = GridSpec(n=shape[0], L=L, d=d)
        if grid is not None and g != grid:
            raise ValueError(f"{path}: records live on different grids")
        grid = g
        count = int(np.prod(shape))
        vals = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        fields.append(vals.astype(float))
    if grid is None:
        raise ValueError(f"{path}: empty file")
    return grid, fields


def read_chf(path) -> tuple[GridSpec, np.ndarray]:
    grid, fields = read_chf_stack(path)
    if len(fields) != 1:
        raise ValueError(f"{path}: expected one record, found {len(fields)}")
    return grid, fields[0]
