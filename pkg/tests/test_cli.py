import csv
import json
import subprocess
import sys

import pytest

from bsc.cli import DEFAULT_SEED, main
from bsc.config import write_config
from bsc.nuts import read_trace
from bsc.panel import write_csv
from bsc.simulate import simulate_panel

from conftest import SMALL_HYPER, small_factor_prior

FAST = ["--chains", "2", "--tune", "80", "--draws", "60", "--max-treedepth", "6"]


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    d = tmp_path_factory.mktemp("in")
    panel, _ = simulate_panel(SMALL_HYPER, small_factor_prior(12), 6, 9, 0, seed=8, sigma=0.5)
    write_csv(panel, d / "panel.csv")
    write_config(SMALL_HYPER, d / "small.toml")
    (d / "deflator.csv").write_text(
        "year,deflator\n" + "".join(f"{y},{1 + 0.01 * i}\n" for i, y in enumerate(panel.years)))
    return d, panel


def _base(inputs, out, *extra):
    d, panel = inputs
    return ["--data", str(d / "panel.csv"), "--treated", panel.societies[0],
            "--start", str(panel.years[9]), "--out", str(out), *extra]


def _content(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}


class TestUsage:
    def test_missing_data_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["fit", "--treated", "a", "--start", "2000", "--config", "germany"])
        assert e.value.code == 1
        assert "usage" in capsys.readouterr().err

    @pytest.mark.parametrize("flag,value", [("--draws", "0"), ("--chains", "-1"),
                                            ("--draws", "many"), ("--tune", "-5")])
    def test_bad_counts(self, inputs, tmp_path, flag, value):
        with pytest.raises(SystemExit) as e:
            main(["fit", *_base(inputs, tmp_path), "--config", "germany", flag, value])
        assert e.value.code == 1

    def test_bad_ci_level(self, inputs, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["fit", *_base(inputs, tmp_path), "--config", "germany", "--ci-level", "1.5"])
        assert e.value.code == 1

    @pytest.mark.parametrize("text", ["8..3", "0..2", "a,b"])
    def test_bad_factor_range(self, inputs, tmp_path, text):
        with pytest.raises(SystemExit) as e:
            main(["waic", *_base(inputs, tmp_path), "--config", "germany", "--factors", text])
        assert e.value.code == 1

    def test_bad_methods(self, inputs, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["placebo", *_base(inputs, tmp_path), "--config", "germany",
                  "--methods", "bsc,ols"])
        assert e.value.code == 1


class TestDataErrors:
    def test_missing_file(self, tmp_path):
        code = main(["scm", "--data", str(tmp_path / "none.csv"), "--treated", "a",
                     "--start", "2000", "--out", str(tmp_path / "o")])
        assert code == 2
        assert json.loads((tmp_path / "o" / "manifest.json").read_text())["exit_code"] == 2

    def test_unknown_treated(self, inputs, tmp_path):
        d, panel = inputs
        code = main(["scm", "--data", str(d / "panel.csv"), "--treated", "nobody",
                     "--start", str(panel.years[5]), "--out", str(tmp_path)])
        assert code == 2

    def test_bad_config(self, inputs, tmp_path):
        (tmp_path / "bad.toml").write_text("nonsense = 1\n")
        code = main(["fit", *_base(inputs, tmp_path / "o"), "--config",
                     str(tmp_path / "bad.toml"), *FAST])
        assert code == 2

    def test_deflator_needs_base_year(self, inputs, tmp_path):
        d, _ = inputs
        code = main(["scm", *_base(inputs, tmp_path), "--deflator", str(d / "deflator.csv")])
        assert code == 2


class TestCommands:
    def test_fit_artifacts_and_determinism(self, inputs, tmp_path):
        d, panel = inputs
        args = ["fit", *_base(inputs, tmp_path / "a"), "--config", str(d / "small.toml"), *FAST]
        code = main(args)
        assert code in (0, 3)
        out = tmp_path / "a"
        summary = json.loads((out / "summary.json").read_text())
        assert [r["year"] for r in summary["years"]] == list(panel.post_years)
        tr = read_trace(out / "trace.bin")
        assert tr.draws.shape[:2] == (2, 60)
        man = json.loads((out / "manifest.json").read_text())
        assert man["outputs"] == ["summary.json", "trace.bin"] and man["seed"] == DEFAULT_SEED
        assert man["exit_code"] == code and len(man["inputs"]) == 2
        args_b = ["fit", *_base(inputs, tmp_path / "b"), "--config", str(d / "small.toml"),
                  *FAST]
        assert main(args_b) == code
        assert _content(tmp_path / "a") == _content(tmp_path / "b")

    def test_fit_exit_code_three_on_flagged_diagnostics(self, inputs, tmp_path):
        d, _ = inputs
        # no warmup, eight draws and depth-1 trees leave the chains far from mixed
        code = main(["fit", *_base(inputs, tmp_path), "--config", str(d / "small.toml"),
                     "--tune", "0", "--draws", "8", "--max-treedepth", "1"])
        assert code == 3
        assert (tmp_path / "summary.json").exists()

    def test_seed_changes_output(self, inputs, tmp_path):
        d, _ = inputs
        for name, seed in (("a", "1"), ("b", "2")):
            main(["fit", *_base(inputs, tmp_path / name), "--config", str(d / "small.toml"),
                  *FAST, "--seed", seed])
        assert _content(tmp_path / "a") != _content(tmp_path / "b")

    def test_factors_override(self, inputs, tmp_path):
        d, _ = inputs
        main(["fit", *_base(inputs, tmp_path), "--config", str(d / "small.toml"), *FAST,
              "--factors", "1"])
        assert json.loads((tmp_path / "summary.json").read_text())["hyper"]["n_factors"] == 1

    def test_scm(self, inputs, tmp_path):
        assert main(["scm", *_base(inputs, tmp_path)]) == 0
        with (tmp_path / "scm_weights.csv").open() as fh:
            weights = [float(r["weight"]) for r in csv.DictReader(fh)]
        assert sum(weights) == pytest.approx(1.0) and min(weights) >= 0
        summary = json.loads((tmp_path / "scm_summary.json").read_text())
        assert 0 < summary["rank"] <= 1
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["outputs"] == ["scm_placebo_effects.csv", "scm_summary.json",
                                  "scm_weights.csv"]
        before = _content(tmp_path)
        main(["scm", *_base(inputs, tmp_path)])
        assert _content(tmp_path) == before

    def test_scm_with_deflator(self, inputs, tmp_path):
        d, panel = inputs
        code = main(["scm", *_base(inputs, tmp_path), "--deflator", str(d / "deflator.csv"),
                     "--base-year", str(panel.years[0])])
        assert code == 0

    def test_placebo(self, inputs, tmp_path):
        d, _ = inputs
        code = main(["placebo", *_base(inputs, tmp_path), "--config", str(d / "small.toml"),
                     *FAST, "--methods", "bsc,scm"])
        assert code in (0, 3)
        header = (tmp_path / "placebo_report.csv").read_text().splitlines()[0].split(",")
        assert "bsc_abs_pct_error" in header and "scm_abs_pct_error" in header
        acc = (tmp_path / "accuracy_by_year.csv").read_text().splitlines()[0]
        assert acc == "year,bsc_mape,bsc_n,scm_mape,scm_n"
        assert (tmp_path / "coverage_by_year.csv").exists()

    def test_placebo_scm_only(self, inputs, tmp_path):
        d, _ = inputs
        assert main(["placebo", *_base(inputs, tmp_path), "--config", str(d / "small.toml"),
                     "--methods", "scm"]) == 0
        header = (tmp_path / "placebo_report.csv").read_text().splitlines()[0]
        assert "ci95" not in header and not (tmp_path / "coverage_by_year.csv").exists()

    def test_waic(self, inputs, tmp_path):
        d, _ = inputs
        code = main(["waic", *_base(inputs, tmp_path), "--config", str(d / "small.toml"),
                     *FAST, "--factors", "1..2"])
        assert code in (0, 3)
        with (tmp_path / "waic_scan.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert [r["n_factors"] for r in rows] == ["1", "2"]
        assert all(r["status"] == "ok" for r in rows)


def test_console_entry_point(inputs, tmp_path):
    d, panel = inputs
    res = subprocess.run([sys.executable, "-m", "bsc.cli", "scm", *_base(inputs, tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "bsc.cli", "--version"], capture_output=True,
                         text=True)
    assert res.stdout.startswith("bsc ")
