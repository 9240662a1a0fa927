import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from cmflow.cli import main

SMALL_BENCH = ["--max-steps", "40", "--eval-every", "20", "--batch", "300", "--eval-batch", "20000",
               "--mesh", "40", "--lr", "3e-3"]


def gaussian_belief(path, alpha=-1.645, beta=1.645):
    from scipy.stats import norm
    a, b = float(norm.cdf(alpha)), float(norm.cdf(beta))
    path.write_text(json.dumps({"alpha": alpha, "beta": beta,
                                "left": {"family": "gaussian", "params": {"mu": 0.0, "sigma": 1.0}, "mass": a},
                                "right": {"family": "gaussian", "params": {"mu": 0.0, "sigma": 1.0}, "mass": 1 - b}}))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# --- benchmark ---------------------------------------------------------------

def test_benchmark_report_and_determinism(tmp_path):
    out = tmp_path / "bench"
    argv = ["benchmark", "--copula", "clayton", "--theta", "2", "--seed", "7", "--out", str(out)] + SMALL_BENCH
    code = main(argv)
    assert code in (0, 1)
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    report = json.loads(first["report.json"])
    for key in ("jsd", "T", "M", "nll", "config", "history", "artifacts"):
        assert key in report
    assert report["config"]["seed"] == 7 and report["config"]["copula"] == "clayton"
    assert set(report["artifacts"]) <= set(first)
    for name in ("history.csv", "density_grid.csv", "jsd_map.csv", "jsd_map.svg", "model.json"):
        assert name in first
    assert main(argv) == code
    second = {p.name: p.read_bytes() for p in out.iterdir()}
    assert first == second


def test_benchmark_exit_one_when_thresholds_missed(tmp_path):
    argv = ["benchmark", "--copula", "clayton", "--theta", "2", "--out", str(tmp_path)] + SMALL_BENCH
    assert main(argv) == 1  # 40 steps cannot reach JSD <= 1e-3
    assert json.loads((tmp_path / "report.json").read_text())["thresholds_met"] is False


def test_benchmark_constrained_note(tmp_path):
    argv = ["benchmark", "--copula", "gumbel", "--theta", "5", "--constrained", "--out", str(tmp_path)] + SMALL_BENCH
    main(argv)
    report = json.loads((tmp_path / "report.json").read_text())
    assert "note" in report and report["config"]["constrained"] is True
    floor = math.sqrt(2 / math.pi) * math.sqrt(0.96 / (0.04 * 20_000))
    assert report["T"][1] <= 2.5 * floor


@pytest.mark.parametrize("bad", [["--theta", "0.5", "--copula", "gumbel"], ["--mesh", "1"], ["--batch", "0"],
                                 ["--jsd-threshold", "-1"]])
def test_benchmark_invalid_config(tmp_path, bad):
    assert main(["benchmark", "--out", str(tmp_path)] + bad) == 2


# --- tail-verify -------------------------------------------------------------

def test_tail_verify_passes_and_is_deterministic(tmp_path):
    argv = ["tail-verify", "--prior", "gaussian", "--d0", "2", "--n-nets", "2", "--n", "20000",
            "--p", "1,2", "--out", str(tmp_path)]
    assert main(argv) == 0
    first = (tmp_path / "tail_report.json").read_bytes()
    report = json.loads(first)
    assert report["violations"] == 0
    assert any(entry["meta"]["d0"] == 1 for entry in report["lemma"])
    assert (tmp_path / "survival_d2.csv").exists()
    assert main(argv) == 0
    assert (tmp_path / "tail_report.json").read_bytes() == first


def test_tail_verify_cauchy_moment_premise(tmp_path):
    argv = ["tail-verify", "--prior", "cauchy", "--d0", "2", "--n-nets", "1", "--n", "20000", "--p", "2",
            "--out", str(tmp_path)]
    assert main(argv) == 0
    report = json.loads((tmp_path / "tail_report.json").read_text())
    assert all(m["premise_violated"] for m in report["moments"])


def test_tail_verify_usage_errors(tmp_path):
    assert main(["tail-verify", "--n", "10", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        main(["tail-verify", "--d0", "two"])


# --- train-marginal ----------------------------------------------------------

@pytest.fixture(scope="module")
def normal_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "normal.csv"
    np.savetxt(path, np.random.default_rng(3).standard_normal(20_000))
    return path


def test_train_marginal_matches_entropy(tmp_path, normal_csv):
    belief = gaussian_belief(tmp_path / "belief.json")
    out = tmp_path / "m"
    argv = ["train-marginal", "--data", str(normal_csv), "--belief", str(belief), "--epochs", "20",
            "--batch", "250", "--out", str(out)]
    assert main(argv) == 0
    report = json.loads((out / "marginal_report.json").read_text())
    assert report["nll"] == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=0.02)
    assert (out / "model.json").exists()
    assert len(read_csv(out / "loss.csv")) == 21


def test_train_marginal_degenerate_belief(tmp_path, normal_csv):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"alpha": -1.0, "beta": 1.0,
                               "left": {"family": "exponential", "params": {"rate": 1.0}, "mass": 0.5},
                               "right": {"family": "exponential", "params": {"rate": 1.0}, "mass": 0.5}}))
    assert main(["train-marginal", "--data", str(normal_csv), "--belief", str(bad), "--out", str(tmp_path)]) == 2


def test_train_marginal_missing_files(tmp_path, normal_csv):
    belief = gaussian_belief(tmp_path / "belief.json")
    assert main(["train-marginal", "--data", str(tmp_path / "nope.csv"), "--belief", str(belief),
                 "--out", str(tmp_path)]) == 2
    assert main(["train-marginal", "--data", str(normal_csv), "--belief", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path)]) == 2


# --- sample ------------------------------------------------------------------

@pytest.fixture(scope="module")
def copula_model(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    main(["benchmark", "--copula", "frank", "--theta", "5", "--out", str(out)] + SMALL_BENCH)
    return out / "model.json"


def test_sample_zero_rows(tmp_path, copula_model):
    out = tmp_path / "s.csv"
    assert main(["sample", "--model", str(copula_model), "--n", "0", "--out", str(out)]) == 0
    assert read_csv(out) == [["c1", "c2"]]


def test_sample_deterministic_and_in_range(tmp_path, copula_model):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        assert main(["sample", "--model", str(copula_model), "--n", "500", "--seed", "4", "--out", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = np.array(read_csv(a)[1:], dtype=float)
    assert rows.shape == (500, 2) and np.all((rows >= 0) & (rows <= 1))


def test_sample_from_marginal_model(tmp_path, normal_csv):
    belief = gaussian_belief(tmp_path / "belief.json")
    main(["train-marginal", "--data", str(normal_csv), "--belief", str(belief), "--epochs", "1",
          "--out", str(tmp_path / "m")])
    out = tmp_path / "x.csv"
    assert main(["sample", "--model", str(tmp_path / "m" / "model.json"), "--n", "10", "--out", str(out)]) == 0
    assert read_csv(out)[0] == ["x"] and len(read_csv(out)) == 11


def test_sample_bad_model(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"kind": "spaceship"}')
    assert main(["sample", "--model", str(bad), "--out", str(tmp_path / "s.csv")]) == 2
    assert main(["sample", "--model", str(tmp_path / "missing.json"), "--out", str(tmp_path / "s.csv")]) == 2


# --- train-cm ----------------------------------------------------------------

def test_train_cm_and_sample(tmp_path):
    data = tmp_path / "pairs.csv"
    np.savetxt(data, np.random.default_rng(0).standard_normal((2000, 2)), delimiter=",")
    belief = gaussian_belief(tmp_path / "belief.json")
    out = tmp_path / "cm"
    assert main(["train-cm", "--data", str(data), "--belief", str(belief), "--belief2", str(belief),
                 "--epochs", "1", "--batch", "200", "--max-steps", "20", "--out", str(out)]) == 0
    samples = tmp_path / "xs.csv"
    assert main(["sample", "--model", str(out / "model.json"), "--n", "50", "--out", str(samples)]) == 0
    assert read_csv(samples)[0] == ["x1", "x2"]


# --- render ------------------------------------------------------------------

def test_render_small_grid(tmp_path):
    src = tmp_path / "g.csv"
    src.write_text("x,y,value\n0.25,0.25,1\n0.75,0.25,2\n0.25,0.75,3\n0.75,0.75,4\n")
    assert main(["render", "--input", str(src), "--out", str(tmp_path / "g.svg")]) == 0
    svg = (tmp_path / "g.svg").read_text()
    assert svg.startswith("<svg") and svg.count('class="cell"') == 4
    import xml.etree.ElementTree as ET
    ET.fromstring(svg)


def test_render_constant_grid(tmp_path):
    src = tmp_path / "c.csv"
    src.write_text("x,y,value\n0.25,0.25,7\n0.75,0.25,7\n0.25,0.75,7\n0.75,0.75,7\n")
    main(["render", "--input", str(src), "--out", str(tmp_path / "c.svg")])
    svg = (tmp_path / "c.svg").read_text()
    fills = {line.split('fill="')[1][:7] for line in svg.splitlines() if 'class="cell"' in line}
    assert len(fills) == 1
    assert svg.count('class="legend"') == 1 and ">7<" in svg


def test_render_survival_curve_log_axis(tmp_path):
    src = tmp_path / "s.csv"
    x = np.linspace(0, 4, 20)
    rows = "\n".join(f"{v},{math.exp(-v)},{0.5 * math.exp(-v)}" for v in x)
    src.write_text("x,model,target\n" + rows + "\n")
    assert main(["render", "--input", str(src), "--out", str(tmp_path / "s.svg"), "--style", "curve"]) == 0
    svg = (tmp_path / "s.svg").read_text()
    assert 'data-yscale="log10"' in svg and "1e-2" in svg and svg.count("<polyline") == 2


def test_render_bad_input(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("x,y,value\n")
    assert main(["render", "--input", str(empty), "--out", str(tmp_path / "e.svg")]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cmflow", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "benchmark" in res.stdout
