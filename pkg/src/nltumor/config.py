"""Plain-text run configuration: ``section.key = value`` lines, ``#`` comments.

Every key has a default; unknown keys are rejected.  Field-valued entries use
shape specifiers:

    constant:V
    gaussian-bump:CX,CY,WIDTH,LOW,HIGH      LOW + (HIGH - LOW) exp(-|x - c|^2 / (2 WIDTH^2))
    two-bump:CX1,CY1,CX2,CY2,WIDTH,LOW,HIGH  the same with two centres (maximum of the bumps)
    file:PATH                                a single-record CHF1 file

Interaction ranges may be written as numbers or as fractions of the side
length, e.g. ``kernel.eps = L/4, L/8, L/16``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import GridSpec, TimeGrid, read_chf

DEFAULTS: dict[str, str] = {
    "grid.n": "64",
    "grid.L": "1.0",
    "time.T": "0.05",
    "time.nt": "500",
    "model.tau": "1.0",
    "model.chi": "0.25",
    "model.P0": "0.5",
    "model.P1": "1.5",
    "model.h_scale": "1.0",
    "model.S": "2.0",
    "model.mobility_m": "1.0",
    "model.mobility_n": "1.0",
    "potential.kind": "quartic",
    "kernel.alpha": "0.0",
    "kernel.eps": "L/8",
    "init.phi0": "gaussian-bump:0.5,0.5,0.1,-1,1",
    "init.sigma0": "constant:0.5",
    "cost.alpha_Omega": "1.0",
    "cost.alpha_Q": "0.0",
    "cost.beta_Q": "0.0",
    "cost.alpha_u": "1.0",
    "cost.beta_w": "1.0",
    "cost.phi_Omega": "constant:-1",
    "cost.phi_Q": "constant:-1",
    "cost.sigma_Q": "constant:0.5",
    "controls.u_min": "0.0",
    "controls.u_max": "1.0",
    "controls.w_min": "0.0",
    "controls.w_max": "1.0",
    "controls.u_init": "0.0",
    "controls.w_init": "0.0",
    "controls.h1_bound": "1e6",
    "optimizer.max_iter": "50",
    "optimizer.tol": "1e-3",
    "optimizer.c1": "1e-4",
    "optimizer.backtrack": "0.5",
    "optimizer.init_step": "1.0",
    "optimizer.max_backtracks": "40",
    "gradcheck.modes": "local, nonlocal",
    "gradcheck.sigma0": "1.0",
    "gradcheck.levels": "6",
    "gradcheck.min_slope": "1.7",
    "gradcheck.max_error": "2e-2",
    "run.mode": "nonlocal",
    "run.seed": "0",
    "output.dir": "out",
    "output.snapshots": "0",
}


class ConfigError(ValueError):
    """The configuration file is malformed or has invalid values."""


def parse_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


@dataclass(frozen=True)
class RunConfig:
    values: dict

    @classmethod
    def from_text(cls, text: str, base_dir: Path | None = None) -> "RunConfig":
        merged = dict(DEFAULTS)
        for key, value in parse_text(text).items():
            kind, sep, rest = value.partition(":")
            if sep and kind.strip() == "file" and base_dir is not None:
                path = Path(rest.strip())
                value = f"file:{path if path.is_absolute() else (base_dir / path).resolve()}"
            merged[key] = value
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.from_text(path.read_text(), base_dir=path.parent)

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls.from_text("")

    def with_overrides(self, **kv) -> "RunConfig":
        merged = dict(self.values)
        for k, v in kv.items():
            key = k.replace("__", ".")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            merged[key] = str(v)
        cfg = RunConfig(merged)
        cfg.validate()
        return cfg

    # -- typed access -----------------------------------------------------

    def str(self, key: str) -> str:
        return self.values[key]

    def float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} = {self.values[key]!r} is not a number") from None

    def int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} = {self.values[key]!r} is not an integer") from None

    def validate(self) -> None:
        for key in DEFAULTS:
            if key.split(".")[1] in ("n", "nt", "max_iter", "max_backtracks", "levels", "seed", "snapshots"):
                self.int(key)
        if self.str("potential.kind") != "quartic":
            raise ConfigError(f"potential.kind must be 'quartic', got {self.str('potential.kind')!r}")
        if self.str("run.mode") not in ("local", "nonlocal"):
            raise ConfigError(f"run.mode must be 'local' or 'nonlocal', got {self.str('run.mode')!r}")
        for m in self.gradcheck_modes():
            if m not in ("local", "nonlocal"):
                raise ConfigError(f"gradcheck.modes contains {m!r}")
        self.eps_list()
        try:
            self.grid()
            self.tgrid()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # -- domain objects ---------------------------------------------------

    def grid(self) -> GridSpec:
        return GridSpec(n=self.int("grid.n"), L=self.float("grid.L"), d=2)

    def tgrid(self) -> TimeGrid:
        return TimeGrid(T=self.float("time.T"), nt=self.int("time.nt"))

    def eps_list(self) -> list[float]:
        L = self.float("grid.L")
        out = []
        for item in self.str("kernel.eps").split(","):
            item = item.strip().replace(" ", "")
            m = re.fullmatch(r"L/([0-9.]+)", item)
            try:
                out.append(L / float(m.group(1)) if m else float(item))
            except ValueError:
                raise ConfigError(f"kernel.eps entry {item!r} is neither a number nor L/k") from None
        if not out or any(e <= 0 for e in out):
            raise ConfigError("kernel.eps needs positive entries")
        return out

    def gradcheck_modes(self) -> list[str]:
        return [m.strip() for m in self.str("gradcheck.modes").split(",") if m.strip()]

    def params(self):
        from .physics import ModelParams, ProliferationParams

        return ModelParams(
            tau=self.float("model.tau"), chi=self.float("model.chi"),
            prolif=ProliferationParams(self.float("model.P0"), self.float("model.P1")),
            h_scale=self.float("model.h_scale"), S=self.float("model.S"),
            mobility_m=self.float("model.mobility_m"), mobility_n=self.float("model.mobility_n"),
        )

    def field(self, key: str) -> np.ndarray:
        return build_shape(self.str(key), self.grid(), name=key)

    def cost_spec(self):
        from .costs import CostSpec

        return CostSpec(
            self.grid(), self.tgrid(),
            alpha_Omega=self.float("cost.alpha_Omega"), alpha_Q=self.float("cost.alpha_Q"),
            beta_Q=self.float("cost.beta_Q"), alpha_u=self.float("cost.alpha_u"),
            beta_w=self.float("cost.beta_w"),
            phi_Omega=self.field("cost.phi_Omega"), phi_Q=self.field("cost.phi_Q"),
            sigma_Q=self.field("cost.sigma_Q"),
        )

    def bounds(self):
        from .forward import Box

        return Box(self.float("controls.u_min"), self.float("controls.u_max"),
                   self.float("controls.w_min"), self.float("controls.w_max"))

    def init_controls(self):
        from .forward import ControlPair

        return ControlPair.constant(self.grid(), self.tgrid().nt,
                                    self.float("controls.u_init"), self.float("controls.w_init"))

    def optimizer_options(self):
        from .control import OptimizerOptions

        return OptimizerOptions(
            max_iter=self.int("optimizer.max_iter"), tol=self.float("optimizer.tol"),
            c1=self.float("optimizer.c1"), backtrack=self.float("optimizer.backtrack"),
            init_step=self.float("optimizer.init_step"),
            max_backtracks=self.int("optimizer.max_backtracks"),
        )

    def resolved_text(self) -> str:
        lines = [f"{k} = {self.values[k]}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"


def build_shape(spec: str, grid: GridSpec, name: str = "field") -> np.ndarray:
    kind, _, args = spec.partition(":")
    kind = kind.strip()
    if kind == "file":
        path = Path(args.strip())
        g, values = read_chf(path)
        if g != grid:
            raise ConfigError(f"{name}: {path} is on grid {g}, run uses {grid}")
        return values
    try:
        nums = [float(a) for a in args.split(",")] if args.strip() else []
    except ValueError:
        raise ConfigError(f"{name}: bad numbers in {spec!r}") from None
    X, Y = grid.centers()
    if kind == "constant" and len(nums) == 1:
        return grid.full(nums[0])
    if kind == "gaussian-bump" and len(nums) == 5:
        cx, cy, w, lo, hi = nums
        return lo + (hi - lo) * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * w * w))
    if kind == "two-bump" and len(nums) == 7:
        x1, y1, x2, y2, w, lo, hi = nums
        b1 = np.exp(-((X - x1) ** 2 + (Y - y1) ** 2) / (2 * w * w))
        b2 = np.exp(-((X - x2) ** 2 + (Y - y2) ** 2) / (2 * w * w))
        return lo + (hi - lo) * np.maximum(b1, b2)
    raise ConfigError(f"{name}: unrecognised shape {spec!r}")
