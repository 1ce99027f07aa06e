import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from prefcoal import __version__
from prefcoal.cli import config_hash, main, parse_args, resolved_config
from prefcoal.genealogy import read_newick
from prefcoal.metrics import EvalGrid, env, mrw, rank_models, read_stats, rw, sre
from prefcoal.simulate import read_times
from prefcoal.summary import TableSummary

HEADER = f"# prefcoal {__version__} config="


def _read(path):
    head, rows, cols = [], [], None
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            head.append(line)
        elif cols is None:
            cols = line.split(",")
        else:
            rows.append([float(x) if x else np.nan for x in line.split(",")])
    return head, {c: np.array(v) for c, v in zip(cols, zip(*rows))}


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(Path(d).rglob("*"))
            if p.is_file() and not p.name.endswith("_runtime.json")}


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--scenario", "CE-PP", "--n", "100", "--replicates", "2",
                 "--seed", "7", "--out", str(d), "--threads", "1"]) == 0
    return d


def test_simulate_outputs(sim):
    names = sorted(p.name for p in sim.iterdir())
    assert names == [f"CE-PP_n100_rep00{r}{s}" for r in (0, 1)
                     for s in (".nwk", "_times.csv", "_truth.csv")]
    for r in (0, 1):
        g = read_newick(sim / f"CE-PP_n100_rep00{r}.nwk")
        h = read_times(sim / f"CE-PP_n100_rep00{r}_times.csv")
        assert g.n == h.n == 100
        np.testing.assert_allclose(np.sort(g.coalescent_times), np.sort(h.coalescent_times),
                                   rtol=0, atol=1e-9 * g.root_time)
        head, t = _read(sim / f"CE-PP_n100_rep00{r}_truth.csv")
        assert head[0].startswith(HEADER)
        assert f"replicate={r}" in head[1]
        assert len(t["time"]) == 100
        assert t["time"][-1] == pytest.approx(0.8 * g.root_time)
        np.testing.assert_allclose(t["beta"], 180.0)
    assert (sim / "CE-PP_n100_rep000.nwk").read_text().startswith("[" + HEADER[2:])


def test_simulate_reproducible(sim, tmp_path):
    assert main(["simulate", "--scenario", "CE-PP", "--n", "100", "--replicates", "2",
                 "--seed", "7", "--out", str(tmp_path), "--threads", "2"]) == 0
    assert _files(tmp_path) == _files(sim)


def test_simulate_seed_changes_output(sim, tmp_path):
    main(["simulate", "--scenario", "CE-PP", "--n", "100", "--seed", "8", "--out", str(tmp_path)])
    assert (tmp_path / "CE-PP_n100_rep000.nwk").read_bytes() != (sim / "CE-PP_n100_rep000.nwk").read_bytes()


def test_simulate_b_up_constant(tmp_path):
    assert main(["simulate", "--scenario", "B-UP", "--n", "500", "--seed", "1", "--out", str(tmp_path)]) == 0
    head, _ = _read(tmp_path / "B-UP_n500_rep000_truth.csv")
    assert "c=250.0" in head[1]


def test_simulate_errors(tmp_path, monkeypatch, capsys):
    assert main(["simulate", "--scenario", "XX-YY", "--seed", "1", "--out", str(tmp_path)]) == 2
    assert "usage" in capsys.readouterr().err
    assert main(["simulate", "--scenario", "CE-PP", "--n", "200"]) == 2
    monkeypatch.setenv("CI", "1")
    assert main(["simulate", "--scenario", "CE-PP", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--scenario", "CE-PP", "--seed", "3", "--out", str(tmp_path)]) == 0


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nn = 300\nreplicates=3\nscenario=B-U\n")
    a = parse_args(["simulate", "--config", str(cfg)])
    assert (a.n, a.replicates, a.scenario, a.K) == (300, 3, "B-U", 100)
    b = parse_args(["simulate", "--config", str(cfg), "--n", "500"])
    assert (b.n, b.replicates) == (500, 3)
    cfg.write_text("bogus=1\n")
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.cfg")]) == 1


def test_hash_ignores_output_location():
    a = resolved_config(parse_args(["simulate", "--scenario", "B-U", "--seed", "1", "--out", "x"]))
    b = resolved_config(parse_args(["simulate", "--scenario", "B-U", "--seed", "1", "--out", "y",
                                    "--threads", "3"]))
    c = resolved_config(parse_args(["simulate", "--scenario", "B-U", "--seed", "2"]))
    assert config_hash(a) == config_hash(b) != config_hash(c)


@pytest.fixture(scope="module")
def laplace_fit(sim, tmp_path_factory):
    d = tmp_path_factory.mktemp("fit")
    src = sim / "CE-PP_n100_rep000_times.csv"
    t0 = time.perf_counter()
    rc = main(["infer", str(src), "--model", "nopref", "--engine", "laplace", "--M", "20",
               "--out", str(d)])
    return rc, time.perf_counter() - t0, d


def test_infer_laplace(laplace_fit):
    rc, elapsed, d = laplace_fit
    assert rc == 0
    assert elapsed < 5.0
    stem = d / "CE-PP_n100_rep000_nopref-gmrf1_laplace"
    head, s = _read(f"{stem}_summary.csv")
    assert head[0].startswith(HEADER) and head[1] == "# model=nopref-gmrf1 engine=laplace"
    assert list(s) == ["time", "ne_median", "ne_q025", "ne_q975",
                       "beta_median", "beta_q025", "beta_q975"]
    assert np.all(np.isnan(s["beta_median"]))
    assert np.all(s["ne_q025"] <= s["ne_median"]) and np.all(s["ne_median"] <= s["ne_q975"])
    diag = json.loads(Path(f"{stem}_diagnostics.json").read_text())
    assert diag["config"]["model"] == "nopref" and diag["config"]["M"] == 20
    assert abs(sum(diag["hyper_weights"]) - 1) < 1e-12
    assert json.loads(Path(f"{stem}_runtime.json").read_text())["seconds"] > 0


def test_infer_reproducible(sim, laplace_fit, tmp_path):
    _, _, d = laplace_fit
    main(["infer", str(sim / "CE-PP_n100_rep000_times.csv"), "--model", "nopref",
          "--engine", "laplace", "--M", "20", "--out", str(tmp_path)])
    assert _files(tmp_path) == _files(d)


def test_infer_hmc_reproducible(sim, tmp_path):
    args = ["infer", str(sim / "CE-PP_n100_rep001.nwk"), "--model", "adapref", "--M", "10",
            "--chains", "2", "--iterations", "200", "--burn-in", "100", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    diag = json.loads((tmp_path / "a" / "CE-PP_n100_rep001_adapref-gmrf1-gmrf1_hmc_diagnostics.json").read_text())
    assert {"rhat", "ess", "divergences", "waic", "max_rhat"} <= set(diag)
    assert diag["draws"] == 100
    _, s = _read(tmp_path / "a" / "CE-PP_n100_rep001_adapref-gmrf1-gmrf1_hmc_summary.csv")
    assert np.any(np.isfinite(s["beta_median"]))


def test_infer_errors(sim, tmp_path, capsys):
    src = str(sim / "CE-PP_n100_rep000_times.csv")
    assert main(["infer", str(tmp_path / "nope.nwk"), "--engine", "laplace"]) == 1
    assert "not found" in capsys.readouterr().err
    # prior/engine mismatch is caught before reading anything
    assert main(["infer", str(tmp_path / "nope.nwk"), "--engine", "laplace",
                 "--theta-prior", "hsmrf1"]) == 2
    assert main(["infer", src, "--theta-prior", "gmrf3"]) == 2
    assert main(["infer", src, "--burn-in", "5000"]) == 2
    bad = tmp_path / "bad.nwk"
    bad.write_text("((a:1,b:1);\n")
    assert main(["infer", str(bad), "--engine", "laplace"]) == 1


def _truth_as_summary(truth, path):
    head, t = _read(truth)
    lines = ["# model=oracle engine=none",
             "time,ne_median,ne_q025,ne_q975,beta_median,beta_q025,beta_q975"]
    for v, ne in zip(t["time"], t["ne"]):
        v, ne = repr(float(v)), repr(float(ne))
        lines.append(f"{v},{ne},{ne},{ne},,,")
    Path(path).write_text("\n".join(lines) + "\n")


def test_metrics_truth_is_perfect(sim, tmp_path):
    truth = sim / "CE-PP_n100_rep000_truth.csv"
    summ = tmp_path / "oracle_summary.csv"
    _truth_as_summary(truth, summ)
    assert main(["metrics", "--summary", str(summ), "--truth", str(truth), "--out", str(tmp_path)]) == 0
    rows = read_stats(tmp_path / "CE-PP_n100_rep000_stats.csv")
    assert len(rows) == 1
    r = rows[0]
    assert (r["scenario"], r["replicate"], r["model"], r["quantity"]) == ("CE-PP", "0", "oracle-none", "ne")
    assert r["sre"] == 0.0 and r["mrw"] == 0.0 and r["env"] == 1.0 and r["rw"] == 0.0


@pytest.fixture(scope="module")
def stats_dir(sim, laplace_fit, tmp_path_factory):
    _, _, fits = laplace_fit
    out = tmp_path_factory.mktemp("stats")
    truth = sim / "CE-PP_n100_rep000_truth.csv"
    summ = fits / "CE-PP_n100_rep000_nopref-gmrf1_laplace_summary.csv"
    oracle = out / "oracle_summary.csv"
    _truth_as_summary(truth, oracle)
    assert main(["metrics", "--summary", str(summ), "--summary", str(oracle), "--truth", str(truth),
                 "--out", str(out)]) == 0
    return out, summ, truth


def test_metrics_match_library(stats_dir):
    out, summ, truth = stats_dir
    _, s = _read(summ)
    _, t = _read(truth)
    table = TableSummary(s["time"], s["ne_median"], s["ne_q025"], s["ne_q975"],
                         s["beta_median"], s["beta_q025"], s["beta_q975"])
    g = EvalGrid(t["time"])
    row = [r for r in read_stats(out / "CE-PP_n100_rep000_stats.csv")
           if r["model"] == "nopref-gmrf1-laplace"][0]
    assert row["sre"] == sre(table, t["ne"], g)
    assert row["mrw"] == mrw(table, t["ne"], g)
    assert row["env"] == env(table, t["ne"], g)
    assert row["rw"] == rw(table, g)
    assert 0.0 <= row["env"] <= 1.0


def test_metrics_reproducible_and_errors(stats_dir, tmp_path):
    out, summ, truth = stats_dir
    oracle = out / "oracle_summary.csv"
    main(["metrics", "--summary", str(summ), "--summary", str(oracle), "--truth", str(truth),
          "--out", str(tmp_path)])
    name = "CE-PP_n100_rep000_stats.csv"
    assert (tmp_path / name).read_bytes() == (out / name).read_bytes()
    assert main(["metrics", "--summary", str(summ)]) == 2
    assert main(["metrics", "--summary", str(tmp_path / "x.csv"), "--truth", str(truth)]) == 1
    junk = tmp_path / "junk_summary.csv"
    junk.write_text("time,ne_median\nabc,1\n")
    assert main(["metrics", "--summary", str(junk), "--truth", str(truth)]) == 1


def test_compare(stats_dir, tmp_path):
    out, _, _ = stats_dir
    assert main(["compare", str(out), "--out", str(tmp_path)]) == 0
    rows = read_stats(tmp_path / "ranking_ne.csv")
    expect = rank_models(read_stats(out / "CE-PP_n100_rep000_stats.csv"))
    assert [(r["statistic"], r["model"], int(r["top2_count"])) for r in rows] == \
        [(e["statistic"], e["model"], e["top2_count"]) for e in expect]
    first = (tmp_path / "ranking_ne.csv").read_bytes()
    main(["compare", str(out), "--out", str(tmp_path)])
    assert (tmp_path / "ranking_ne.csv").read_bytes() == first
    assert main(["compare", str(tmp_path / "empty")]) == 1


def test_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "prefcoal", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and __version__ in r.stdout
    r = subprocess.run([sys.executable, "-m", "prefcoal", "infer"], capture_output=True, text=True,
                       cwd=tmp_path)
    assert r.returncode == 2
