"""Command-line driver for single runs, eps-sweeps, gradient checks and optimisation.

Exit codes: 0 success, 1 invalid configuration or failed model assumptions,
2 numerical failure, 3 a checked property did not hold.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .adjoint import dual_distances, solve_adjoint
from .config import ConfigError, RunConfig
from .control import (
    ControlProblem, LineSearchError, gradient_check, norm_q, optimize, write_controls, write_history_csv,
)
from .costs import AdaptedSpec, CostSpec
from .forward import (
    ControlPair, StateTrajectory, StepFailure, solve_forward, state_distances, write_diagnostics_csv,
    write_snapshots,
)
from .kernel import KernelResolutionError, build_profile, sample_kernel
from .linsolve import SolverError
from .physics import validate_assumptions

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_ASSERT = 0, 1, 2, 3


class Invalid(Exception):
    pass


class CheckFailed(Exception):
    pass


# -- shared setup ------------------------------------------------------------------


def _kernel(cfg: RunConfig, eps: float):
    return sample_kernel(build_profile(cfg.float("kernel.alpha"), 2), eps, cfg.grid())


def _validate(cfg: RunConfig, eps_values) -> None:
    params = cfg.params()
    reports = [("", validate_assumptions(params))]
    for eps in eps_values:
        try:
            k = _kernel(cfg, eps)
        except (KernelResolutionError, ValueError) as exc:
            raise Invalid(str(exc)) from None
        reports.append((f" (eps={eps:g})", validate_assumptions(params, k)))
    failed, seen = [], set()
    for tag, rep in reports:
        for c in rep.failures():
            if (c.name, c.detail) not in seen:
                seen.add((c.name, c.detail))
                failed.append(f"{c.name}{tag}: {c.detail}")
    if failed:
        raise Invalid("assumption check failed: " + "; ".join(failed))


def _sweep_eps(cfg: RunConfig, min_cells: int = 8) -> list[float]:
    eps = cfg.eps_list()
    h = cfg.grid().h
    for e in eps:
        if e < min_cells * h * (1 - 1e-12):
            raise Invalid(f"eps = {e:g} is below {min_cells}h = {min_cells * h:g}; "
                          f"this sweep needs eps >= {min_cells}h")
    if any(a < b for a, b in zip(eps, eps[1:])):
        raise Invalid(f"eps list must be descending, got {eps}")
    return eps


def _initial(cfg: RunConfig):
    return cfg.field("init.phi0"), cfg.field("init.sigma0")


def _forward(cfg: RunConfig, mode: str, eps: float | None, controls=None, stride: int = 1) -> StateTrajectory:
    phi0, sigma0 = _initial(cfg)
    k = _kernel(cfg, eps) if mode == "nonlocal" else None
    return solve_forward(mode, cfg.params(), k, phi0, sigma0, controls, cfg.tgrid(), grid=cfg.grid(), stride=stride)


def _problem(cfg: RunConfig, mode: str, eps: float | None, spec: CostSpec | None = None,
             adapted: AdaptedSpec | None = None) -> ControlProblem:
    phi0, sigma0 = _initial(cfg)
    return ControlProblem(
        mode=mode, params=cfg.params(), grid=cfg.grid(), tgrid=cfg.tgrid(), phi0=phi0, sigma0=sigma0,
        spec=spec or cfg.cost_spec(), bounds=cfg.bounds(),
        kernel=_kernel(cfg, eps) if mode == "nonlocal" else None, adapted=adapted,
    )


def _pool_map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))  # results come back in submission order


def _write_table(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _print_table(header, rows) -> None:
    print("  ".join(f"{h:>14s}" for h in header))
    for row in rows:
        print("  ".join(f"{v:14.6e}" if isinstance(v, float) else f"{v!s:>14s}" for v in row))


def _check_strict_decrease(name: str, eps, values) -> None:
    for (e1, v1), (e2, v2) in zip(zip(eps, values), zip(eps[1:], values[1:])):
        if e1 == e2:
            continue  # repeated entries are a determinism probe
        if not v2 < v1:
            raise CheckFailed(f"{name} not strictly decreasing: eps={e1:g} -> {v1:.6e}, eps={e2:g} -> {v2:.6e}")


# -- subcommands -------------------------------------------------------------------


def cmd_validate(cfg: RunConfig, args) -> int:
    params = cfg.params()
    print("parameters:")
    print(validate_assumptions(params).format())
    ok = validate_assumptions(params).ok
    for eps in cfg.eps_list():
        try:
            rep = validate_assumptions(params, _kernel(cfg, eps))
        except (KernelResolutionError, ValueError) as exc:
            print(f"eps={eps:g}: {exc}")
            ok = False
            continue
        print(f"eps={eps:g}:")
        print(rep.format())
        ok = ok and rep.ok
    return EXIT_OK if ok else EXIT_INVALID


def cmd_forward(cfg: RunConfig, args) -> int:
    mode = cfg.str("run.mode")
    eps = cfg.eps_list()[0] if mode == "nonlocal" else None
    _validate(cfg, [eps] if eps else [])
    stride = args.snapshots if args.snapshots is not None else cfg.int("output.snapshots")
    traj = _forward(cfg, mode, eps, cfg.init_controls(), stride=stride if stride > 0 else 1)
    out = args.out
    write_diagnostics_csv(traj, out / "diagnostics.csv")
    if stride > 0:
        write_snapshots(traj, out / "snapshots", stride)
    d = traj.diagnostics
    dE = np.diff(d["E_total"])
    print(f"mode={mode}" + (f" eps={eps:g}" if eps else "") + f" steps={cfg.tgrid().nt}")
    print(f"mean(phi): {d['mean_phi'][0]:.12g} -> {d['mean_phi'][-1]:.12g}")
    print(f"mean(sigma): {d['mean_sigma'][0]:.12g} -> {d['mean_sigma'][-1]:.12g}")
    print(f"E_total: {d['E_total'][0]:.12g} -> {d['E_total'][-1]:.12g}"
          + (f", largest one-step change {dE.max():+.3e}" if dE.size else ""))
    return EXIT_OK


def _sweep_forward_worker(item):
    values, mode, eps = item
    cfg = RunConfig(values)
    traj = _forward(cfg, mode, eps)
    return traj


def cmd_eps_sweep(cfg: RunConfig, args) -> int:
    eps = _sweep_eps(cfg)
    _validate(cfg, eps)
    items = [(cfg.values, "local", None)] + [(cfg.values, "nonlocal", e) for e in eps]
    trajs = _pool_map(_sweep_forward_worker, items, args.jobs)
    ref = trajs[0]
    header = ("eps", "phi_sup_l2", "sigma_l2q", "sigma_sup_l2")
    rows = []
    for e, tr in zip(eps, trajs[1:]):
        d = state_distances(tr, ref)
        rows.append((e, d["phi_sup_l2"], d["sigma_l2q"], d["sigma_sup_l2"]))
    _write_table(args.out / "eps_sweep.csv", header, rows)
    _print_table(header, rows)
    _check_strict_decrease("sup_t |phi_eps - phi|_L2", eps, [r[1] for r in rows])
    _check_strict_decrease("|sigma_eps - sigma|_L2(Q)", eps, [r[2] for r in rows])
    return EXIT_OK


def _sweep_adjoint_worker(item):
    values, mode, eps = item
    cfg = RunConfig(values)
    controls = cfg.init_controls()
    traj = _forward(cfg, mode, eps, controls)
    k = _kernel(cfg, eps) if mode == "nonlocal" else None
    adj = solve_adjoint(mode, cfg.params(), k, traj, cfg.cost_spec(), controls)
    return adj.p, adj.q, adj.r


def cmd_adjoint_sweep(cfg: RunConfig, args) -> int:
    eps = _sweep_eps(cfg)
    _validate(cfg, eps)
    cfg.cost_spec()
    items = [(cfg.values, "local", None)] + [(cfg.values, "nonlocal", e) for e in eps]
    duals = _pool_map(_sweep_adjoint_worker, items, args.jobs)
    ref = duals[0]
    header = ("eps", "p_l2h1", "q_l2l2", "r_sup_l2")
    rows = []
    for e, a in zip(eps, duals[1:]):
        d = dual_distances(cfg.grid(), cfg.tgrid(), a, ref)
        rows.append((e, d["p_l2h1"], d["q_l2l2"], d["r_sup_l2"]))
    _write_table(args.out / "adjoint_sweep.csv", header, rows)
    _print_table(header, rows)
    for i, name in enumerate(("|p_eps - p|_L2(H1)", "|q_eps - q|_L2(Q)", "max_t |r_eps - r|_L2"), 1):
        _check_strict_decrease(name, eps, [r[i] for r in rows])
    return EXIT_OK


def smooth_direction(cfg: RunConfig, seed: int) -> ControlPair:
    """Random perturbation built from low cosine modes in space and time."""
    rng = np.random.default_rng(seed)
    g, tg = cfg.grid(), cfg.tgrid()
    X, Y = g.centers()
    L = g.L
    t = (np.arange(tg.nt) + 0.5) / max(tg.nt, 1)

    def one():
        f = sum(rng.standard_normal() * np.cos(np.pi * a * X / L) * np.cos(np.pi * b * Y / L)
                for a in range(3) for b in range(3))
        amp = 1.0 + rng.standard_normal() * np.cos(np.pi * t)
        return amp[:, None, None] * f[None]

    return ControlPair(one(), one())


def cmd_grad_check(cfg: RunConfig, args) -> int:
    modes = cfg.gradcheck_modes()
    eps = cfg.eps_list()[0]
    _validate(cfg, [eps] if "nonlocal" in modes else [])
    base = cfg.init_controls()
    direction = smooth_direction(cfg, args.seed)
    sigma0 = cfg.float("gradcheck.sigma0")
    levels = cfg.int("gradcheck.levels")
    min_slope = cfg.float("gradcheck.min_slope")
    max_err = cfg.float("gradcheck.max_error")

    quad_spec = CostSpec(cfg.grid(), cfg.tgrid(), alpha_u=max(cfg.float("cost.alpha_u"), 1.0))
    cases = [("quadratic", modes[0], quad_spec, 1.95, 1e-8)]
    cases += [(f"full-{m}", m, cfg.cost_spec(), min_slope, max_err) for m in modes]

    detail, summary, failures = [], [], []
    for name, mode, spec, slope_min, err_max in cases:
        prob = _problem(cfg, mode, eps if mode == "nonlocal" else None, spec)
        rep = gradient_check(prob, base, direction, sigma0=sigma0, levels=levels)
        ok = rep.slope >= slope_min and rep.first_order_error <= err_max
        if name == "quadratic":
            ok = ok and rep.slope <= 2.05
        for k, (s, R, pre) in enumerate(zip(rep.steps, rep.remainders, rep.pre_floor)):
            detail.append((name, k, float(s), float(R), int(pre)))
        summary.append((name, mode, rep.slope, rep.first_order_error, "pass" if ok else "FAIL"))
        print(f"{name:16s} slope={rep.slope:.4f}  first-order error={rep.first_order_error:.3e}  "
              f"{'pass' if ok else 'FAIL'}")
        if not ok:
            failures.append(name)
    _write_table(args.out / "grad_check.csv", ("case", "k", "step", "remainder", "pre_floor"), detail)
    _write_table(args.out / "grad_check_summary.csv",
                 ("case", "mode", "slope", "first_order_error", "status"), summary)
    if failures:
        raise CheckFailed("gradient check failed for " + ", ".join(failures))
    return EXIT_OK


def _run_optimize(cfg: RunConfig, mode: str, eps, adapted=None, quiet=False, init=None):
    prob = _problem(cfg, mode, eps, adapted=adapted)
    log = None if quiet else (lambda r: print(
        f"iter {r['iter']:4d}  cost {r['cost']:.10e}  residual {r['vi_residual']:.3e}  step {r['step']:.3g}"))
    start = cfg.init_controls() if init is None else init
    return optimize(prob, start, cfg.optimizer_options(), log=log)


def _check_history(res, tol) -> None:
    costs = res.costs
    if np.any(np.diff(costs) >= 0):
        raise CheckFailed("cost history is not strictly decreasing")
    if res.final_residual > tol:
        raise CheckFailed(f"final vi_residual {res.final_residual:.3e} > tol {tol:g}")


def cmd_optimize(cfg: RunConfig, args) -> int:
    mode = cfg.str("run.mode")
    eps = cfg.eps_list()[0] if mode == "nonlocal" else None
    _validate(cfg, [eps] if eps else [])
    res = _run_optimize(cfg, mode, eps)
    write_history_csv(res.history, args.out / "history.csv")
    write_controls(res.controls, cfg.grid(), args.out / "controls")
    h1 = res.history[-1]["u_h1_norm"]
    M = cfg.float("controls.h1_bound")
    print(f"iterations={len(res.history) - 1}  final residual={res.final_residual:.3e}  "
          f"|u|_H1(0,T;L2)={h1:.4g} (bound {M:g}{', exceeded' if h1 > M else ''})")
    _check_history(res, cfg.float("optimizer.tol"))
    return EXIT_OK


def _adapted_worker(item):
    values, eps, u_bar, w_bar = item
    cfg = RunConfig(values)
    anchor = ControlPair(u_bar, w_bar)
    # start from the anchor: the proximal term is then zero and only the eps effect moves the controls
    res = _run_optimize(cfg, "nonlocal", eps, AdaptedSpec(cfg.cost_spec(), anchor), quiet=True, init=anchor)
    return res


def cmd_control_convergence(cfg: RunConfig, args) -> int:
    if not args.full:
        raise Invalid("control-convergence is an expensive experiment; pass --full to run it")
    eps = _sweep_eps(cfg, min_cells=2)
    _validate(cfg, eps)
    local = _run_optimize(cfg, "local", None, quiet=True)
    write_history_csv(local.history, args.out / "history_local.csv")
    _check_history(local, cfg.float("optimizer.tol"))
    ub = local.controls
    items = [(cfg.values, e, ub.u, ub.w) for e in eps]
    results = _pool_map(_adapted_worker, items, args.jobs)
    g, tg = cfg.grid(), cfg.tgrid()
    header = ("eps", "u_dist", "w_dist", "iterations", "final_residual")
    rows = []
    for e, res in zip(eps, results):
        _check_history(res, cfg.float("optimizer.tol"))
        du = ControlPair(res.controls.u - ub.u, np.zeros_like(ub.w))
        dw = ControlPair(np.zeros_like(ub.u), res.controls.w - ub.w)
        rows.append((e, norm_q(g, tg, du), norm_q(g, tg, dw), len(res.history) - 1, res.final_residual))
    _write_table(args.out / "control_convergence.csv", header, rows)
    _print_table(header, rows)
    for i, name in ((1, "|u_eps - u_bar|_L2(Q)"), (2, "|w_eps - w_bar|_L2(Q)")):
        vals = [r[i] for r in rows]
        for (e1, v1), (e2, v2) in zip(zip(eps, vals), zip(eps[1:], vals[1:])):
            if v2 > v1:
                raise CheckFailed(f"{name} increased: eps={e1:g} -> {v1:.6e}, eps={e2:g} -> {v2:.6e}")
    return EXIT_OK


COMMANDS = {
    "forward": cmd_forward,
    "eps-sweep": cmd_eps_sweep,
    "adjoint-sweep": cmd_adjoint_sweep,
    "grad-check": cmd_grad_check,
    "optimize": cmd_optimize,
    "control-convergence": cmd_control_convergence,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nltumor", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", type=Path, help="key = value configuration file (defaults if omitted)")
    ap.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    ap.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes for sweeps")
    ap.add_argument("--seed", type=int, help="RNG seed (overrides run.seed)")
    ap.add_argument("--snapshots", type=int, help="CHF1 snapshot stride for forward runs (0 = none)")
    ap.add_argument("--full", action="store_true", help="enable the expensive gated experiments")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig.defaults()
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = cfg.with_overrides(**{"run__seed": args.seed})
        args.seed = cfg.int("run.seed")
        args.out = args.out or Path(cfg.str("output.dir"))
        args.jobs = max(1, args.jobs)
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "config.resolved").write_text(cfg.resolved_text())
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, Invalid) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SolverError, StepFailure, LineSearchError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT


if __name__ == "__main__":
    sys.exit(main())
