import csv

import numpy as np
import pytest

from nltumor import cli
from nltumor.config import ConfigError, RunConfig, build_shape, parse_text
from nltumor.grid import GridSpec, write_chf
from nltumor.linsolve import SolverError

SMALL = """
grid.n = 32
time.T = 0.005
time.nt = 10
kernel.eps = L/4
"""


def write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_text_rules():
    vals = parse_text("# comment\n\ngrid.n = 16   # trailing\nmodel.chi=0.1\n")
    assert vals == {"grid.n": "16", "model.chi": "0.1"}
    with pytest.raises(ConfigError, match="unknown key"):
        parse_text("grid.m = 3")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_text("grid.n = 3\ngrid.n = 4")
    with pytest.raises(ConfigError, match="expected"):
        parse_text("grid.n 3")


def test_typed_values_and_validation():
    cfg = RunConfig.from_text("grid.n = 40\nkernel.eps = L/4, 0.1, L/16\n")
    assert cfg.grid() == GridSpec(n=40)
    assert cfg.eps_list() == [0.25, 0.1, 0.0625]
    assert cfg.params().chi == 0.25
    with pytest.raises(ConfigError):
        RunConfig.from_text("grid.n = many")
    with pytest.raises(ConfigError):
        RunConfig.from_text("grid.n = 2")
    with pytest.raises(ConfigError):
        RunConfig.from_text("run.mode = both")
    with pytest.raises(ConfigError):
        RunConfig.from_text("kernel.eps = L/x")
    with pytest.raises(ConfigError):
        RunConfig.from_text("potential.kind = logarithmic")
    over = cfg.with_overrides(model__chi=0.5)
    assert over.params().chi == 0.5 and cfg.params().chi == 0.25
    with pytest.raises(ConfigError):
        cfg.with_overrides(model__nope=1)


def test_shapes(tmp_path):
    g = GridSpec(n=16)
    assert np.all(build_shape("constant:0.3", g) == 0.3)
    bump = build_shape("gaussian-bump:0.5,0.5,0.1,-1,1", g)
    assert bump.max() <= 1 and bump.min() >= -1 and bump[8, 8] > 0.5
    two = build_shape("two-bump:0.25,0.25,0.75,0.75,0.1,-1,1", g)
    assert two[4, 4] > 0 and two[12, 12] > 0 and two[4, 12] < -0.9
    with pytest.raises(ConfigError):
        build_shape("square:1", g)
    with pytest.raises(ConfigError):
        build_shape("constant:1,2", g)
    v = np.arange(256.0).reshape(16, 16)
    write_chf(tmp_path / "phi.chf", g, v)
    cfg = RunConfig.load(write_cfg(tmp_path, "grid.n = 16\ninit.phi0 = file:phi.chf\n"))
    assert np.array_equal(cfg.field("init.phi0"), v)
    with pytest.raises(ConfigError):
        RunConfig.load(write_cfg(tmp_path, "grid.n = 8\ninit.phi0 = file:phi.chf\n", "b.cfg")).field("init.phi0")


def test_cost_and_controls_from_config():
    cfg = RunConfig.from_text(SMALL + "cost.alpha_Q = 2\ncontrols.u_init = 0.25\ncontrols.u_max = 0.5\n")
    spec = cfg.cost_spec()
    assert spec.alpha_Q == 2 and spec.phi_Q.shape == (11, 32, 32)
    c = cfg.init_controls()
    assert c.u.shape == (10, 32, 32) and np.all(c.u == 0.25)
    assert cfg.bounds().u_max == 0.5
    assert cfg.optimizer_options().c1 == 1e-4


def test_forward_zero_steps(tmp_path):
    cfg = write_cfg(tmp_path, SMALL.replace("time.nt = 10", "time.nt = 0"))
    assert cli.main(["forward", "--config", str(cfg), "--out", str(tmp_path / "o"), "--snapshots", "1"]) == 0
    assert [p.name for p in (tmp_path / "o" / "snapshots").iterdir()] == ["state_000000.chf"]
    rows = list(csv.reader(open(tmp_path / "o" / "diagnostics.csv")))
    assert len(rows) == 2
    assert (tmp_path / "o" / "config.resolved").read_text().startswith("controls.h1_bound")


def test_forward_rejects_large_chemotaxis(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL + "model.chi = 1.5\n")
    assert cli.main(["forward", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "A3" in capsys.readouterr().err


def test_validate_command(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL)
    assert cli.main(["validate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert "B2" in capsys.readouterr().out
    bad = write_cfg(tmp_path, SMALL + "model.P0 = 0\n", "bad.cfg")
    assert cli.main(["validate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_bad_config_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, "grid.nn = 3\n")
    assert cli.main(["forward", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_eps_sweep_single_and_repeated_entries(tmp_path):
    one = write_cfg(tmp_path, SMALL.replace("L/4", "L/2"), "one.cfg")
    assert cli.main(["eps-sweep", "--config", str(one), "--out", str(tmp_path / "a"), "--jobs", "1"]) == 0
    rows = list(csv.reader(open(tmp_path / "a" / "eps_sweep.csv")))
    assert rows[0] == ["eps", "phi_sup_l2", "sigma_l2q", "sigma_sup_l2"] and len(rows) == 2
    rep = write_cfg(tmp_path, SMALL.replace("L/4", "L/2, L/2"), "rep.cfg")
    assert cli.main(["eps-sweep", "--config", str(rep), "--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    rows = list(csv.reader(open(tmp_path / "b" / "eps_sweep.csv")))
    assert len(rows) == 3 and rows[1] == rows[2]


def test_sweep_requires_resolved_descending_eps(tmp_path):
    small = write_cfg(tmp_path, SMALL.replace("L/4", "L/8"), "s.cfg")
    assert cli.main(["eps-sweep", "--config", str(small), "--out", str(tmp_path / "o")]) == 1
    asc = write_cfg(tmp_path, SMALL.replace("L/4", "L/4, L/2"), "asc.cfg")
    assert cli.main(["adjoint-sweep", "--config", str(asc), "--out", str(tmp_path / "o")]) == 1


def test_sweep_assertion_exit_code(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, SMALL.replace("L/4", "L/2, L/4"))
    calls = iter([0.1, 0.2])
    monkeypatch.setattr(cli, "state_distances",
                        lambda a, b: dict(phi_sup_l2=next(calls), sigma_l2q=0.0, sigma_sup_l2=0.0))
    assert cli.main(["eps-sweep", "--config", str(cfg), "--out", str(tmp_path / "o"), "--jobs", "1"]) == 3


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise SolverError("no convergence", 1.0)

    monkeypatch.setattr(cli, "_forward", boom)
    cfg = write_cfg(tmp_path, SMALL)
    assert cli.main(["forward", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_control_convergence_needs_flag(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL)
    assert cli.main(["control-convergence", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "--full" in capsys.readouterr().err


def test_adjoint_sweep_small(tmp_path):
    cfg = write_cfg(tmp_path, SMALL.replace("L/4", "L/2, L/2") + "cost.alpha_Q = 1\ncontrols.u_init = 0.5\n")
    assert cli.main(["adjoint-sweep", "--config", str(cfg), "--out", str(tmp_path / "o"), "--jobs", "1"]) == 0
    rows = list(csv.reader(open(tmp_path / "o" / "adjoint_sweep.csv")))
    assert rows[0] == ["eps", "p_l2h1", "q_l2l2", "r_sup_l2"]
    assert rows[1] == rows[2]


def test_outputs_byte_identical(tmp_path):
    text = SMALL + "cost.alpha_Q = 1\ncost.alpha_u = 0.1\ncost.beta_w = 0.1\ncontrols.u_init = 0.5\n" \
        "optimizer.max_iter = 3\noptimizer.tol = 1e-12\nrun.mode = local\n"
    cfg = write_cfg(tmp_path, text)
    for name in ("a", "b"):
        cli.main(["forward", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", "5"])
        cli.main(["optimize", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", "5"])
    for f in ("diagnostics.csv", "history.csv", "config.resolved"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_optimize_reports_unmet_tolerance(tmp_path):
    text = SMALL + "cost.alpha_Q = 1\ncontrols.u_init = 0.5\noptimizer.max_iter = 1\noptimizer.tol = 1e-12\n"
    cfg = write_cfg(tmp_path, text)
    assert cli.main(["optimize", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert (tmp_path / "o" / "history.csv").exists()


def test_grad_check_command(tmp_path):
    text = SMALL + "cost.alpha_Q = 1\ncost.alpha_u = 1e-3\ncost.beta_w = 1e-3\ncontrols.u_init = 0.5\n" \
        "controls.w_init = 0.5\ngradcheck.modes = local\n"
    cfg = write_cfg(tmp_path, text)
    assert cli.main(["grad-check", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = list(csv.reader(open(tmp_path / "o" / "grad_check_summary.csv")))
    assert [r[0] for r in rows[1:]] == ["quadratic", "full-local"]
    assert all(r[-1] == "pass" for r in rows[1:])


def test_seed_must_be_u64(tmp_path):
    assert cli.main(["validate", "--out", str(tmp_path / "o"), "--seed", "-1"]) == 1
