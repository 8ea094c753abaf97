import json
import math

import numpy as np
import pandas as pd
import pytest

import cli
import reports
from config import PROFILES, RunConfig, parse_value
from core import ConfigError, SimulationError
from experiments import ExperimentReport, TrialRecord

SMALL_RUN = """\
profile = "desk"
seed = 3
trials = 6

[params]
grid = 21
calibration_trials = 20
"""


def make_records():
    records = []
    for i, (difference, statistic) in enumerate([(0.0, 0.1), (0.0, 0.5), (0.05, 2.0), (0.05, 0.2)]):
        records.append(TrialRecord(i, i, difference == 0.0, statistic, 0.3, condition={"difference": difference}))
    records.append(TrialRecord(4, 4, True, None, 0.3, error="boom"))
    return records


def test_summarize_counts():
    curve = reports.summarize(make_records(), ["difference"])
    assert int(curve["n"].sum()) == 5
    same = curve[curve["difference"] == 0.0].iloc[0]
    assert same["n"] == 2 and same["n_associated"] == 1 and same["accuracy"] == 0.5
    far = curve[curve["difference"] == 0.05].iloc[0]
    assert far["association_rate"] == 0.5
    failed = curve[curve["difference"].isna()].iloc[0]
    assert failed["n"] == 1 and failed["n_correct"] == 0


def test_summarize_bins():
    curve = reports.summarize(make_records(), ["difference"], {"difference": (0.0, 0.01, 0.1)})
    assert set(curve["difference"].dropna()) == {0.0, 0.01}


def test_summarize_empty():
    curve = reports.summarize([], ["difference"])
    assert curve.empty
    assert "association_rate" in curve.columns


def test_wilson_interval():
    low, high = reports.wilson_interval(5, 10)
    assert 0.0 < low < 0.5 < high < 1.0
    low, high = reports.wilson_interval(10, 10)
    assert high == pytest.approx(1.0) and low < 1.0
    assert all(math.isnan(v) for v in reports.wilson_interval(0, 0))


def make_report():
    records = make_records()
    return ExperimentReport(
        "rigid", 7, {"seed": 7, "value": float("nan")}, {"value": 0.3}, records,
        {"by_difference": reports.summarize(records, ["difference"])},
        summary={"accuracy": 0.6},
        plot={"curve": "by_difference", "x": "difference", "y": "association_rate"},
    )


def test_report_json_has_no_nan():
    data = json.loads(reports.report_to_json(make_report()))
    assert data["config"]["value"] is None
    assert data["n_trials"] == 5
    assert data["records"][4]["error"] == "boom"


def test_write_report(tmp_path):
    paths = reports.write_report(make_report(), tmp_path / "out")
    assert {p.name for p in paths.values()} == {"rigid_7.json", "rigid_7.csv", "rigid_7.svg"}
    frame = pd.read_csv(paths["csv"])
    assert list(frame.columns[:2]) == ["curve", "difference"]
    svg = paths["svg"].read_text()
    assert svg.startswith("<svg") and "generated" not in svg
    stamped = reports.write_report(make_report(), tmp_path / "stamped", timestamp=True)
    assert "generated" in stamped["svg"].read_text()


def test_write_report_with_heatmap(tmp_path):
    report = make_report()
    report.heatmap = np.arange(12.0).reshape(3, 4)
    paths = reports.write_report(report, tmp_path)
    assert paths["contingency"].name == "rigid_7_contingency.svg"


def test_curve_counts_must_match_records():
    records = make_records()
    with pytest.raises(SimulationError):
        ExperimentReport("rigid", 0, {}, {}, records, {"bad": reports.summarize(records[:2], ["difference"])})


def test_paper_profile_constants():
    paper = PROFILES["paper"]
    assert paper["grid"] == 201
    assert paper["photo_tol"] == 0.005 and paper["dedup_tol"] == 0.01
    assert paper["atlas_step"] == 0.02 and paper["atlas_extent"] == 1.8
    assert paper["calibration_trials"] == 1000 and paper["calibration_quantile"] == 0.9
    assert paper["rigid_trials"] == 1000 and paper["medium_trials"] == 10000
    assert paper["relpos_segments"] == [2, 3, 4] and paper["relpos_destination"] == [0.6, 0.6]


def test_parse_value():
    assert parse_value("0.5") == 0.5
    assert parse_value("21") == 21
    assert parse_value("[2, 3]") == [2, 3]
    assert parse_value("true") is True
    assert parse_value("circle") == "circle"


def test_run_config(tmp_path):
    config = RunConfig.from_profile("desk", experiment="rigid")
    assert config.validate() == []
    assert config.n_trials() == PROFILES["desk"]["rigid_trials"]
    with pytest.raises(ConfigError):
        config.update(no_such_key=1)
    path = tmp_path / "run.toml"
    path.write_text(SMALL_RUN)
    config.load_toml(path)
    assert config.seed == 3 and config.n_trials() == 6 and config.params["grid"] == 21
    assert "threads" not in config.snapshot()
    path.write_text("seed = [")
    with pytest.raises(ConfigError):
        config.load_toml(path)


def test_validate_reports_each_field():
    config = RunConfig.from_profile("desk")
    config.update(photo_tol=-0.1, calibration_trials=5)
    errors = config.validate()
    assert any(e.startswith("photo_tol") for e in errors)
    assert any(e.startswith("calibration_trials") for e in errors)


@pytest.mark.parametrize("value", ["abc", 2.5, True, None])
def test_validate_rejects_non_integer_trials(value):
    config = RunConfig.from_profile("desk")
    config.update(calibration_trials=value)
    errors = config.validate()
    assert errors == [f"calibration_trials: must be a positive integer, got {value!r}"]


def test_notes_flag_perturbation_below_half_step():
    config = RunConfig.from_profile("desk")
    assert config.notes() == []
    config.update(calibration_perturbation=0.005)
    assert config.validate() == []
    assert config.notes()[0].startswith("calibration_perturbation")


def test_cli_validate(capsys):
    assert cli.main(["validate", "rigid", "-q"]) == 0
    out = capsys.readouterr().out
    assert '"experiment": "rigid"' in out
    assert cli.main(["validate", "-q", "--set", "grid=21"]) == 0
    assert "grid" in capsys.readouterr().out


@pytest.mark.parametrize("override", ["photo_tol=-0.1", "atlas_step=0.07", "no_such_key=1", "grid",
                                      "calibration_trials=abc", "rigid_trials=0"])
def test_cli_rejects_bad_config(override):
    assert cli.main(["validate", "-q", "--set", override]) == 2


def test_cli_unknown_experiment():
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "bogus"])
    assert exc.value.code == 2


def test_cli_run_demo1d(tmp_path, capsys):
    out = tmp_path / "results"
    assert cli.main(["run", "demo1d", "-q", "--trials", "2", "--seed", "4", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["demo1d_4.csv", "demo1d_4.json", "demo1d_4.svg"]
    assert "agreement_rate" in capsys.readouterr().out


def test_cli_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["run", "demo1d", "-q", "--trials", "1", "--out", str(blocker)]) == 1


def test_cli_calibrate(tmp_path):
    config = tmp_path / "run.toml"
    config.write_text(SMALL_RUN)
    assert cli.main(["calibrate", "atlas", "-q", "--config", str(config), "--out", str(tmp_path)]) == 0
    threshold = json.loads((tmp_path / "atlas_3_threshold.json").read_text())
    assert threshold["n_trials"] == 20 and threshold["value"] >= 0


def test_cli_results_do_not_depend_on_threads(tmp_path):
    config = tmp_path / "run.toml"
    config.write_text(SMALL_RUN)
    for threads in ("1", "2"):
        args = ["run", "rigid", "-q", "--config", str(config), "--threads", threads,
                "--out", str(tmp_path / threads)]
        assert cli.main(args) == 0
    for name in ("rigid_3.json", "rigid_3.csv", "rigid_3.svg"):
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "2" / name).read_bytes()
