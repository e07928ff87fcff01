import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lteranging import evaluation, ranging
from report_fixture import BASELINE_ROW, PROPOSED_ROW, errors_with


def test_perfect_predictions():
    r = evaluation.compute_metrics([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert (r.rmse_m, r.std_m, r.max_abs_error_m) == (0.0, 0.0, 0.0)
    assert r.cdf_fraction[-1] == 1.0


def test_two_error_example():
    r = evaluation.compute_metrics([3.0, -4.0], [0.0, 0.0])
    assert r.rmse_m == pytest.approx(3.5355339, abs=1e-7)
    assert r.std_m == pytest.approx(3.5)
    assert r.mean_error_m == pytest.approx(-0.5)
    assert r.max_abs_error_m == 4.0
    assert r.abs_std_m == pytest.approx(0.5)
    assert list(r.cdf_error_m) == [3.0, 4.0] and list(r.cdf_fraction) == [0.5, 1.0]


def test_metric_input_errors():
    with pytest.raises(ValueError):
        evaluation.compute_metrics([], [])
    with pytest.raises(ValueError):
        evaluation.compute_metrics([1.0], [1.0, 2.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=60))
def test_metric_invariants(values):
    x = np.array(values)
    zero = evaluation.compute_metrics(x, x)
    assert zero.rmse_m == 0 and zero.max_abs_error_m == 0
    r = evaluation.compute_metrics(x, np.zeros_like(x))
    assert r.rmse_m ** 2 == pytest.approx(np.mean(x ** 2), rel=1e-9, abs=1e-9)
    assert r.max_abs_error_m >= abs(r.mean_error_m) - 1e-9
    assert np.all(np.diff(r.cdf_fraction) > 0) and r.cdf_fraction[-1] == 1.0


@pytest.mark.parametrize("row", [BASELINE_ROW, PROPOSED_ROW])
def test_fixture_reproduces_rows(row):
    r = evaluation.report_from_errors(errors_with(*row))
    assert (round(r.rmse_m, 2), round(r.std_m, 2), round(r.max_abs_error_m, 2)) == row
    assert r.rmse_m == pytest.approx(row[0], abs=1e-9)
    assert r.std_m == pytest.approx(row[1], abs=1e-9)


def test_table_rendering_and_reduction():
    a = evaluation.report_from_errors(errors_with(*BASELINE_ROW), "baseline", "d")
    b = evaluation.report_from_errors(errors_with(*PROPOSED_ROW), "proposed", "d")
    text = evaluation.render_table([a, b], claimed_reduction=0.688)
    lines = text.splitlines()
    assert lines[0].split() == ["Performance", "measure", "[m]", "baseline", "proposed"]
    assert lines[2].split()[-2:] == ["13.11", "9.02"]
    assert lines[3].split()[-2:] == ["9.17", "5.40"]
    assert lines[4].split()[-2:] == ["55.68", "27.40"]
    assert "31.2%" in lines[5]
    assert "68.8%" in lines[6] and "inconsistent" in lines[6]
    assert evaluation.compare_models(a, b).improvement() == pytest.approx(0.3120, abs=1e-4)
    # a matching quote adds no footnote
    assert "inconsistent" not in evaluation.render_table([a, b], claimed_reduction=0.312)


def test_compare_identical_and_mismatched():
    a = evaluation.report_from_errors([1.0, -2.0], "x", "d1")
    assert evaluation.compare_models(a, a).improvement() == 0.0
    b = evaluation.report_from_errors([1.0, -2.0], "y", "d2")
    with pytest.raises(ValueError):
        evaluation.compare_models(a, b)


def test_artifacts(tmp_path):
    rng = np.random.default_rng(0)
    truths = rng.uniform(300, 360, 1000)
    reports = [evaluation.compute_metrics(truths + rng.normal(0, s, 1000), truths, m, "d")
               for m, s in (("baseline", 8.0), ("proposed", 5.0))]
    records = {"baseline": ranging.TrainRecord([3.0, 2.0], [3.5, 2.5])}
    paths = evaluation.emit_artifacts(reports, tmp_path, records, {"note": 1})
    names = sorted(p.name for p in paths)
    assert names == ["cdf_baseline.csv", "cdf_proposed.csv", "comparison.csv",
                     "errors_baseline.csv", "errors_proposed.csv", "loss_baseline.csv",
                     "metrics.json", "table.txt"]
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["note"] == 1
    for r, summary in zip(reports, metrics["models"]):
        errs = evaluation.read_errors(tmp_path / f"errors_{r.model_id}.csv")
        assert len(errs) == 1000
        assert np.sqrt(np.mean(errs ** 2)) == summary["rmse_m"]
        xs, frac = evaluation.read_cdf(tmp_path / f"cdf_{r.model_id}.csv")
        assert np.all(np.diff(frac) >= 0) and frac[-1] == 1.0 and np.all(np.diff(xs) > 0)
    loss = (tmp_path / "loss_baseline.csv").read_text().splitlines()
    assert loss[0] == "epoch,train,val" and len(loss) == 3
    rows = (tmp_path / "comparison.csv").read_text().splitlines()
    assert rows[0] == "metric,baseline,proposed,improvement"


def test_single_report_has_no_comparison(tmp_path):
    r = evaluation.report_from_errors([1.0, 2.0], "solo", "d")
    names = {p.name for p in evaluation.emit_artifacts([r], tmp_path)}
    assert "comparison.csv" not in names and "cdf_solo.csv" in names
