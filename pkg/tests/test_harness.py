import csv
import math

import numpy as np
import pytest

from hierspec.harness import (
    AGG_COLUMNS,
    RUN_COLUMNS,
    ConfigError,
    _float_list,
    _int_list,
    aggregate,
    alpha_threshold,
    emit_figures,
    load_config,
    parse_config_text,
    read_runs,
    run_one,
    run_sweep,
    steepest_drop,
    transition_midpoint,
)

from conftest import ROOT

TINY = """
# two dimensions, two alphas, two seeds
d_list = 10, 12
eps = 0.5
alpha_grid = 2.0 2.5
seeds = 0:1
n_test = 500
save_spectra = false
"""


def tiny(tmp_path, **kw):
    return parse_config_text(TINY, out=str(tmp_path / "sweep"), **kw)


def strip_wall(rows):
    return [{k: v for k, v in r.items() if k != "wall_s"} for r in rows]


# -- config --------------------------------------------------------------------


def test_parse_config_and_ranges():
    cfg = parse_config_text(TINY)
    assert cfg.d_list == (10, 12) and cfg.seeds == (0, 1)
    assert cfg.alpha_grid == (2.0, 2.5) and cfg.save_spectra is False
    assert _int_list("0:9") == list(range(10))
    assert _int_list("2:10:4, 11") == [2, 6, 10, 11]
    assert _float_list("2.0:3.0:0.25") == [2.0, 2.25, 2.5, 2.75, 3.0]


def test_transition_grid_has_fifty_runs():
    cfg = load_config(ROOT / "configs" / "transition.cfg")
    assert cfg.d_list == (60, 80) and len(cfg.alpha_grid) == 5
    assert len(cfg.runs()) == 2 * 5 * 5


@pytest.mark.parametrize("text", [
    "alpha_grid =",
    "seeds =",
    "alpha_grid = 0.5",
    "d_list = 2\nalpha_grid = 1.5",
    "colour = red",
    "eps = 1.5",
    "link = sigmoid",
    "no equals sign",
    "seeds = 1:5:0",
    "workers = many",
])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_config_hash_ignores_grid_and_output():
    a = parse_config_text("alpha_grid = 2.0\nseeds = 0\nout = x")
    b = parse_config_text("alpha_grid = 2.0 2.5\nseeds = 0 1 2\nout = y")
    c = parse_config_text("alpha_grid = 2.0\nlink = tanh")
    assert a.config_hash == b.config_hash != c.config_hash


def test_alpha_threshold_k3():
    # B(30, 3) = 4960 is just above 30^2.5 = 4929.5, so the threshold sits near 3.0
    assert alpha_threshold(30, 3, 0.5) == pytest.approx(math.log(30 * 31 * 32 / 6) / math.log(30) + 0.5, rel=1e-15)
    assert alpha_threshold(30, 3, 0.5) == pytest.approx(3.0018, abs=1e-4)
    assert alpha_threshold(60, 2, 0.5) == pytest.approx(math.log(1830) / math.log(60) + 0.5)


def test_transition_locators():
    a = [2.0, 2.25, 2.5, 2.75, 3.0]
    v = [1.0, 0.95, 0.9, 0.3, 0.2]
    assert steepest_drop(a, v) == pytest.approx(2.625)
    assert transition_midpoint(a, v) == pytest.approx(2.5 + 0.25 * 0.4 / 0.6)
    assert math.isnan(transition_midpoint(a, [1.0] * 5))


# -- runs and sweeps -----------------------------------------------------------


def test_run_one_row_schema(tmp_path):
    row = run_one(tiny(tmp_path), 10, 2.5, 0)
    assert set(row) == set(RUN_COLUMNS)
    assert row["n"] == round(10**2.5) and row["status"] in ("ok", "no_structure")
    assert 0.0 <= row["mse_norm"]


def test_sweep_resumes_and_is_idempotent(tmp_path):
    cfg = tiny(tmp_path)
    part = tiny(tmp_path, seeds=(0,))
    first = run_sweep(part)
    assert len(first) == 4
    seen = []
    rows = run_sweep(cfg, progress=seen.append)
    assert len(rows) == 8 and len(seen) == 4  # only the missing half ran
    assert all(r["seed"] == 1 for r in seen)
    again = []
    run_sweep(cfg, progress=again.append)
    assert again == []
    assert len(read_runs(tmp_path / "sweep" / "runs.csv")) == 8


def test_csv_schema(tmp_path):
    run_sweep(tiny(tmp_path, d_list=(10,), seeds=(0,)))
    with open(tmp_path / "sweep" / "runs.csv") as fh:
        header = next(csv.reader(fh))
    assert tuple(header) == RUN_COLUMNS == (
        "config_hash", "d", "alpha", "n", "eps", "link", "seed", "k_hat", "d1_hat",
        "n_spikes", "mse_norm", "overlap_A", "overlap_h", "wall_s", "status")
    with open(tmp_path / "sweep" / "aggregate.csv") as fh:
        assert tuple(next(csv.reader(fh))) == AGG_COLUMNS


def test_sweep_is_deterministic(tmp_path):
    a = run_sweep(tiny(tmp_path / "a", d_list=(10,)))
    b = run_sweep(tiny(tmp_path / "b", d_list=(10,)))
    assert strip_wall(a) == strip_wall(b)
    ra = (tmp_path / "a" / "sweep" / "runs.csv").read_text().splitlines()
    rb = (tmp_path / "b" / "sweep" / "runs.csv").read_text().splitlines()
    wall = RUN_COLUMNS.index("wall_s")
    cut = lambda lines: [",".join(v for i, v in enumerate(l.split(",")) if i != wall) for l in lines]
    assert cut(ra) == cut(rb)


def test_aggregate_matches_recomputation(tmp_path):
    rows = run_sweep(tiny(tmp_path, d_list=(10,), alpha_grid=(2.5,), seeds=(0, 1, 2)))
    (agg,) = aggregate(rows)
    mse = np.array([r["mse_norm"] for r in rows])
    assert agg["runs"] == 3
    assert abs(agg["mse_std"] - np.sqrt(np.mean((mse - mse.mean()) ** 2))) <= 1e-12
    assert abs(agg["mse_median"] - np.median(mse)) <= 1e-12
    qa = np.array([r["overlap_A"] for r in rows])
    assert abs(agg["overlap_A_std"] - qa.std()) <= 1e-12


def test_failed_runs_are_recorded(tmp_path):
    cfg = tiny(tmp_path, d_list=(10,), alpha_grid=(2.5,), seeds=(0,), budget_bytes=1000)
    (row,) = run_sweep(cfg)
    assert row["status"] == "budget" and row["mse_norm"] is None
    assert aggregate([row]) == []


# -- figures -------------------------------------------------------------------


def _agg(d, alphas, mse):
    return [dict(d=d, alpha=a, mse_median=m, mse_std=0.1, overlap_A_mean=1 - m, overlap_h_mean=1 - m)
            for a, m in zip(alphas, mse)]


def test_figures_single_curve(tmp_path):
    spectrum_csv = tmp_path / "s.csv"
    eig = np.concatenate([np.linspace(-1, 1, 200), [3.0, 4.0, -3.5]])
    with open(spectrum_csv, "w") as fh:
        fh.write("index,eigenvalue\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(eig)))
    (tmp_path / "s.edge").write_text("1.5 0.0 2\n")
    paths = emit_figures(_agg(20, [2.0, 2.5, 3.0], [1.0, 0.5, 0.1]), tmp_path / "fig", spectrum=spectrum_csv)
    assert [p.name for p in paths] == ["mse.svg", "overlap.svg", "spectrum.svg"]
    for p in paths:
        assert p.read_text().lstrip().startswith("<?xml") and "<svg" in p.read_text()
    assert "3 eigenvalues beyond the bulk edge" in (tmp_path / "fig" / "spectrum.svg").read_text()
    dat = np.loadtxt(tmp_path / "fig" / "mse_d20.dat")
    assert dat.shape == (3, 3)
    assert np.loadtxt(tmp_path / "fig" / "spectrum.dat").size == eig.size


def test_figures_k3_threshold_lines(tmp_path):
    emit_figures(_agg(30, [3.0, 3.5], [1.0, 0.1]), tmp_path, k=3, eps=0.5)
    svg = (tmp_path / "mse.svg").read_text()
    assert svg.count("stroke-dasharray") >= 1


def test_figures_empty_tables_warn(tmp_path, caplog):
    paths = emit_figures([], tmp_path)
    assert len(paths) == 3
    assert "no data" in (tmp_path / "mse.svg").read_text()
    assert any("no rows" in r.message for r in caplog.records)


def test_figures_are_reproducible(tmp_path):
    rows = _agg(20, [2.0, 3.0], [1.0, 0.1])
    emit_figures(rows, tmp_path / "a")
    emit_figures(rows, tmp_path / "b")
    assert (tmp_path / "a" / "mse.svg").read_bytes() == (tmp_path / "b" / "mse.svg").read_bytes()
