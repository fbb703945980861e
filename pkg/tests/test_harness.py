import csv
import math

import numpy as np
import pytest

from bsc.config import HyperParams
from bsc.harness import (PlaceboReport, accuracy_comparison, coverage_by_year, fit_bsc,
                         run_placebo_study, sub_seed, waic_scan, write_records)
from bsc.nuts import SamplerSettings
from bsc.panel import from_matrix
from bsc.simulate import simulate_panel

from conftest import SMALL_HYPER, small_factor_prior, trend_panel_matrix

TINY = SamplerSettings(chains=2, tune=100, draws=100, seed=3, max_treedepth=6)


@pytest.fixture(scope="module")
def panel():
    p, _ = simulate_panel(SMALL_HYPER, small_factor_prior(12), 6, 9, 0, seed=4, sigma=0.5)
    return p


@pytest.fixture(scope="module")
def report(panel):
    return run_placebo_study(panel, SMALL_HYPER, TINY, config_tag="test")


def test_sub_seed_stable_and_distinct():
    assert sub_seed(1, 2) == sub_seed(1, 2)
    assert len({sub_seed(1, i) for i in range(50)}) == 50


def test_fit_bsc(panel):
    res = fit_bsc(panel, SMALL_HYPER, TINY)
    assert res.trace.draws.shape == (2, 100, res.ctx.dim)
    assert res.counterfactual.mean.shape == (3,)
    assert math.isfinite(res.waic.waic) and math.isfinite(res.max_rhat)


class TestPlacebo:
    def test_rows_and_columns(self, panel, report):
        assert len(report.rows) == (panel.J - 1) * 3
        assert {r["society"] for r in report.rows} == set(panel.societies[1:])
        assert report.failures == {}
        cols = report.columns()
        for c in ("bsc_prediction", "scm_abs_pct_error", "bsc_ci99_hi", "in_ci95",
                  "zero_density", "seed", "reuse_prior", "config"):
            assert c in cols

    def test_observed_matches_panel(self, panel, report):
        for r in report.rows:
            j = panel.societies.index(r["society"])
            t = panel.years.index(r["year"])
            assert r["observed"] == panel.outcomes[t, j]

    def test_interval_flags_consistent(self, report):
        for r in report.rows:
            assert r["bsc_ci99_lo"] <= r["bsc_ci95_lo"] <= r["bsc_ci95_hi"] <= r["bsc_ci99_hi"]
            assert r["in_ci95"] == int(r["bsc_ci95_lo"] <= r["observed"] <= r["bsc_ci95_hi"])
            assert r["in_ci95"] <= r["in_ci99"]
            assert not (r["zero_density"] and r["in_ci99"])

    def test_accuracy_oracle(self, report):
        acc = accuracy_comparison(report)
        for rec in acc:
            rs = [r for r in report.rows if r["year"] == rec["year"]]
            for m in ("bsc", "scm"):
                expect = np.mean([abs(r[f"{m}_prediction"] - r["observed"]) / abs(r["observed"])
                                  * 100 for r in rs])
                assert rec[f"{m}_mape"] == pytest.approx(expect)

    def test_coverage_oracle(self, report):
        for rec in coverage_by_year(report):
            rs = [r for r in report.rows if r["year"] == rec["year"]]
            assert rec["coverage95"] == pytest.approx(np.mean([r["in_ci95"] for r in rs]))

    def test_deterministic(self, panel, report):
        again = run_placebo_study(panel, SMALL_HYPER, TINY, config_tag="test")
        assert again.rows == report.rows

    def test_worker_count_does_not_matter(self, panel):
        a = run_placebo_study(panel, SMALL_HYPER, TINY, methods=("bsc",), workers=1)
        b = run_placebo_study(panel, SMALL_HYPER, TINY, methods=("bsc",), workers=2)
        assert a.rows == b.rows

    def test_scm_only_has_no_ci_columns(self, panel, tmp_path):
        rep = run_placebo_study(panel, SMALL_HYPER, TINY, methods=["scm"])
        cols = rep.columns()
        assert not any(c.startswith(("bsc", "in_ci")) or c == "zero_density" for c in cols)
        rep.write_csv(tmp_path / "r.csv")
        header = (tmp_path / "r.csv").read_text().splitlines()[0]
        assert "ci95" not in header
        with pytest.raises(ValueError):
            coverage_by_year(rep)

    def test_reuse_prior_flag(self, panel):
        rep = run_placebo_study(panel, SMALL_HYPER, TINY, methods=("bsc",), reuse_prior=True)
        assert all(r["reuse_prior"] == 1 for r in rep.rows)

    def test_invalid_inputs(self, panel):
        with pytest.raises(ValueError):
            run_placebo_study(panel, SMALL_HYPER, TINY, methods=["ols"])
        with pytest.raises(ValueError):
            run_placebo_study(from_matrix(np.ones((5, 2)), 0, 3), SMALL_HYPER, TINY)

    def test_failures_recorded(self, panel):
        # one factor too many for the four-society placebo panels
        rep = run_placebo_study(panel, SMALL_HYPER.replace(n_factors=4), TINY,
                                methods=("bsc",))
        assert len(rep.failures) == panel.J - 1 and rep.rows == []


def _hand_report():
    obs = {("a", 1): 10.0, ("a", 2): 20.0, ("b", 1): 4.0, ("b", 2): 5.0}
    pred = {("a", 1): 11.0, ("a", 2): 15.0, ("b", 1): 5.0, ("b", 2): 5.0}
    rows = [dict(society=s, year=y, observed=o, bsc_prediction=pred[s, y],
                 scm_prediction=o * 1.1) for (s, y), o in obs.items()]
    return PlaceboReport(("bsc", "scm"), rows)


def test_accuracy_hand_built_report():
    acc = accuracy_comparison(_hand_report())
    # year 1: |11-10|/10 = 10%, |5-4|/4 = 25%; year 2: 25%, 0%
    assert [r["year"] for r in acc] == [1, 2]
    assert acc[0]["bsc_mape"] == pytest.approx(17.5) and acc[1]["bsc_mape"] == pytest.approx(12.5)
    assert acc[0]["scm_mape"] == pytest.approx(10.0) and acc[1]["scm_mape"] == pytest.approx(10.0)


def test_accuracy_symmetric_and_perfect_cases():
    rep = _hand_report()
    for r in rep.rows:
        r["scm_prediction"] = r["bsc_prediction"]
    acc = accuracy_comparison(rep)
    assert all(r["bsc_mape"] == r["scm_mape"] for r in acc)
    for r in rep.rows:
        r["bsc_prediction"] = r["observed"]
    assert all(r["bsc_mape"] == 0.0 for r in accuracy_comparison(rep))


@pytest.mark.slow
def test_interval_coverage_on_model_data():
    hits = []
    for seed in range(4):
        p, _ = simulate_panel(SMALL_HYPER, small_factor_prior(15), 10, 10, 0, seed=seed,
                              sigma=1.0)
        rep = run_placebo_study(p, SMALL_HYPER,
                                SamplerSettings(chains=2, tune=300, draws=300, seed=seed),
                                methods=("bsc",))
        hits += [r["in_ci95"] for r in rep.rows]
    assert len(hits) == 4 * 9 * 5
    assert 0.88 <= np.mean(hits) <= 0.99


def test_accuracy_skips_zero_observed():
    rows = [dict(society="a", year=1, observed=0.0, scm_prediction=1.0,
                 scm_abs_pct_error=math.nan),
            dict(society="b", year=1, observed=2.0, scm_prediction=1.0,
                 scm_abs_pct_error=50.0)]
    acc = accuracy_comparison(PlaceboReport(("scm",), rows))
    assert acc == [{"year": 1, "scm_mape": 50.0, "scm_n": 1}]


class TestWaicScan:
    def test_singleton(self, panel):
        scan = waic_scan(panel, SMALL_HYPER, TINY, [2])
        assert len(scan.records) == 1 and scan.records[0]["status"] == "ok"
        res = fit_bsc(panel, SMALL_HYPER.replace(n_factors=2), TINY)
        assert scan.waic_values()[2] == res.waic.waic

    def test_failure_does_not_stop_scan(self, panel, tmp_path):
        scan = waic_scan(panel, SMALL_HYPER, TINY, [9, 1])
        status = {r["n_factors"]: r["status"] for r in scan.records}
        assert status == {1: "ok", 9: "failed"}
        scan.write_csv(tmp_path / "w.csv")
        rows = list(csv.DictReader((tmp_path / "w.csv").open()))
        assert [r["n_factors"] for r in rows] == ["1", "9"] and rows[1]["waic"] == ""


@pytest.mark.slow
def test_waic_gain_levels_off_at_true_rank():
    """Two-factor data: adding the second factor helps far more than a third."""
    hyper = HyperParams(gamma_sigma=1.0, delta_mu=0.0, delta_sd=10.0, k_mu=50.0, k_sd=20.0,
                        gamma_kappa=10.0, alpha_mu=0.0, alpha_sd=20.0, b_mu=0.0, b_sd=1.0,
                        gamma_beta=1.0, n_factors=1)
    panel = from_matrix(trend_panel_matrix(T=20, J=10, seed=0), 0, 15)
    settings = SamplerSettings(chains=2, tune=300, draws=300, seed=0)
    w = waic_scan(panel, hyper, settings, [1, 2, 3]).waic_values()
    assert w[1] - w[2] >= 5 * (w[2] - w[3])


def test_write_records(tmp_path):
    write_records(tmp_path / "r.csv", [{"a": 1, "b": 0.5}, {"a": 2, "b": math.nan}])
    assert (tmp_path / "r.csv").read_text() == "a,b\n1,0.5\n2,\n"
