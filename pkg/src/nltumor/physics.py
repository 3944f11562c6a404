"""Constitutive functions and checks of the standing model assumptions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

PROLIF_BLEND = 0.1


@dataclass(frozen=True)
class QuarticPotential:
    """Double well psi(s) = (1 - s^2)^2 / 4.

    ``c_psi`` and ``C_psi`` are the coercivity and semiconvexity constants:
    psi'(r) r >= c_psi r^2 - 1/c_psi and psi''(r) >= -C_psi.
    """

    kind: str = "quartic"
    c_psi: float = 1.0
    C_psi: float = 1.0

    def psi(self, r):
        return 0.25 * (1.0 - r * r) ** 2

    def psi_prime(self, r):
        return r * r * r - r

    def psi_second(self, r):
        return 3.0 * r * r - 1.0

    def min_psi_second(self) -> float:
        return -1.0


def psi(r):
    return QuarticPotential().psi(np.asarray(r, dtype=float))


def psi_prime(r):
    return QuarticPotential().psi_prime(np.asarray(r, dtype=float))


def psi_second(r):
    return QuarticPotential().psi_second(np.asarray(r, dtype=float))


@dataclass(frozen=True)
class ProliferationParams:
    P0: float = 0.5
    P1: float = 1.5
    blend: float = PROLIF_BLEND


def _hermite(s, x0, x1, y0, y1, m0, m1):
    w = x1 - x0
    t = (s - x0) / w
    t2, t3 = t * t, t * t * t
    return ((2 * t3 - 3 * t2 + 1) * y0 + (t3 - 2 * t2 + t) * w * m0
            + (-2 * t3 + 3 * t2) * y1 + (t3 - t2) * w * m1)


def _hermite_prime(s, x0, x1, y0, y1, m0, m1):
    w = x1 - x0
    t = (s - x0) / w
    t2 = t * t
    return ((6 * t2 - 6 * t) * y0 / w + (3 * t2 - 4 * t + 1) * m0
            + (-6 * t2 + 6 * t) * y1 / w + (3 * t2 - 2 * t) * m1)


def _prolif_pieces(P: ProliferationParams):
    k = 0.5 * (P.P1 - P.P0)
    d = P.blend
    lin = lambda s: P.P0 + k * (s + 1.0)  # noqa: E731
    left = (-1.0 - d, -1.0 + d, P.P0, lin(-1.0 + d), 0.0, k)
    right = (1.0 - d, 1.0 + d, lin(1.0 - d), P.P1, k, 0.0)
    return k, lin, left, right


def prolif(P: ProliferationParams, s):
    """C1 version of the piecewise-linear proliferation rate.

    Equal to P0 for s <= -1 - blend, P1 for s >= 1 + blend, linear in
    between, with cubic Hermite blends across the two kinks.
    """
    s = np.asarray(s, dtype=float)
    k, lin, left, right = _prolif_pieces(P)
    out = np.where(s <= -1.0, P.P0, np.where(s >= 1.0, P.P1, lin(s)))
    in_l = np.abs(s + 1.0) < P.blend
    in_r = np.abs(s - 1.0) < P.blend
    out = np.where(in_l, _hermite(s, *left), out)
    out = np.where(in_r, _hermite(s, *right), out)
    return out


def prolif_prime(P: ProliferationParams, s):
    s = np.asarray(s, dtype=float)
    k, lin, left, right = _prolif_pieces(P)
    out = np.where((s > -1.0) & (s < 1.0), k, 0.0)
    out = np.where(np.abs(s + 1.0) < P.blend, _hermite_prime(s, *left), out)
    out = np.where(np.abs(s - 1.0) < P.blend, _hermite_prime(s, *right), out)
    return out


def interp_h(s, h_scale: float = 1.0):
    """Smoothstep of (s + 1)/2, constant outside [-1, 1]."""
    t = np.clip((np.asarray(s, dtype=float) + 1.0) * 0.5, 0.0, 1.0)
    return h_scale * t * t * (3.0 - 2.0 * t)


def interp_h_prime(s, h_scale: float = 1.0):
    t = np.clip((np.asarray(s, dtype=float) + 1.0) * 0.5, 0.0, 1.0)
    return h_scale * 3.0 * t * (1.0 - t)


Mobility = float | Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ModelParams:
    tau: float = 1.0
    chi: float = 0.25
    prolif: ProliferationParams = field(default_factory=ProliferationParams)
    h_scale: float = 1.0
    S: float = 2.0
    mobility_m: Mobility = 1.0
    mobility_n: Mobility = 1.0
    mobility_bounds: tuple[float, float] = (1e-3, 1e3)
    potential: QuarticPotential = field(default_factory=QuarticPotential)

    def P(self, s):
        return prolif(self.prolif, s)

    def dP(self, s):
        return prolif_prime(self.prolif, s)

    def h(self, s):
        return interp_h(s, self.h_scale)

    def dh(self, s):
        return interp_h_prime(s, self.h_scale)

    def constant_mobilities(self) -> bool:
        return not callable(self.mobility_m) and not callable(self.mobility_n)


def reaction(params: ModelParams, phi, sigma, mu):
    """R = P(phi) (sigma + chi (1 - phi) - mu), pointwise."""
    phi, sigma, mu = (np.asarray(a, dtype=float) for a in (phi, sigma, mu))
    if not phi.shape == sigma.shape == mu.shape:
        raise ValueError(f"shape mismatch: {phi.shape}, {sigma.shape}, {mu.shape}")
    return params.P(phi) * (sigma + params.chi * (1.0 - phi) - mu)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    margin: float
    detail: str


@dataclass(frozen=True)
class AssumptionReport:
    checks: tuple[Check, ...]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def format(self) -> str:
        lines = []
        for c in self.checks:
            tag = "pass" if c.passed else "FAIL"
            lines.append(f"{c.name:4s} {tag}  margin={c.margin:+.6g}  {c.detail}")
        return "\n".join(lines)


def _mobility_range(mob: Mobility) -> tuple[float, float]:
    if callable(mob):
        s = np.linspace(-10.0, 10.0, 4001)
        v = np.asarray(mob(s), dtype=float)
        return float(v.min()), float(v.max())
    return float(mob), float(mob)


def validate_assumptions(params: ModelParams, kernel=None) -> AssumptionReport:
    """Report which standing assumptions hold for this parameter set.

    Checks A2 (potential constants, by dense sampling), A3 (viscosity and
    chemotaxis range), A4 (mobility bounds), B4 (positive proliferation floor)
    and, when a kernel is given, the discrete form of B2:
    ``min_x (J_eps * 1)(x) + min_r psi''(r) > chi^2``.
    """
    pot = params.potential
    checks = []

    r = np.linspace(-10.0, 10.0, 20001)
    coerc = np.min(pot.psi_prime(r) * r - (pot.c_psi * r * r - 1.0 / pot.c_psi))
    semi = np.min(pot.psi_second(r) + pot.C_psi)
    a2 = min(coerc, semi)
    checks.append(Check("A2", bool(a2 >= 0 and pot.c_psi > 0), float(a2),
                        f"c_psi={pot.c_psi:g}, C_psi={pot.C_psi:g}"))

    bound = math.sqrt(pot.c_psi)
    a3_ok = params.tau > 0 and 0.0 <= params.chi < bound
    a3_margin = min(bound - params.chi, params.chi, params.tau)
    checks.append(Check("A3", a3_ok, float(a3_margin),
                        f"need tau > 0 and 0 <= chi < sqrt(c_psi) = {bound:g}; "
                        f"tau={params.tau:g}, chi={params.chi:g}"))

    lo, hi = params.mobility_bounds
    mins, maxs = zip(_mobility_range(params.mobility_m), _mobility_range(params.mobility_n))
    a4_margin = min(min(mins) - lo, hi - max(maxs))
    checks.append(Check("A4", bool(lo > 0 and a4_margin >= 0), float(a4_margin),
                        f"mobilities in [{min(mins):g}, {max(maxs):g}] within [{lo:g}, {hi:g}]"))

    p_min = min(params.prolif.P0, params.prolif.P1)
    checks.append(Check("B4", bool(p_min > 0), float(p_min),
                        f"min P = min(P0, P1) = {p_min:g} must be > 0"))

    if kernel is not None:
        b2 = float(np.min(kernel.conv_one)) + pot.min_psi_second() - params.chi**2
        checks.append(Check("B2", bool(b2 > 0), b2,
                            f"min(J*1) + min psi'' - chi^2 with eps={kernel.eps:g}"))
    return AssumptionReport(tuple(checks))
