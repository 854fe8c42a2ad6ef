import csv
import json
import math

import pytest

from exceedmc.expcli import (
    COLUMNS,
    ConfigError,
    ResultRow,
    blowup_condition,
    emit_report,
    format_display,
    main,
    parse_report,
    resolve_config,
    run_experiment,
)
from exceedmc.exp_family import lattice_model

ESTIMATE_CFG = {
    "model": {"type": "iid-gaussian", "mean": [-0.5]},
    "experiment": {"kind": "estimate", "id": "demo", "method": "single-tilt",
                   "event": {"type": "tail", "n": 20, "g": "identity", "b": 0.5},
                   "mixture": {"mu": 0.5}},
    "runs": 2000,
    "seed": 7,
}


@pytest.mark.parametrize("est, se, text", [
    (0.0319, 0.0005, "3.19(0.05)×10⁻²"),
    (0.0095, 0.00097, "1.0(0.1)×10⁻²"),
    (1.82e-6, 0.03e-6, "1.82(0.03)×10⁻⁶"),
    (0.5, 0.01, "5.0(0.1)×10⁻¹"),
])
def test_display_format(est, se, text):
    assert format_display(est, se) == text


def _row(**kw):
    base = dict(experiment_id="x", method="direct", n_or_c=10, estimate=0.1, std_error=0.01, runs=100,
                seconds=0.5, second_moment_ratio=10.0, truncations=0, seed=1, display="1.0(0.1)×10⁻¹")
    base.update(kw)
    return ResultRow(**base)


def test_csv_single_row_is_two_lines():
    text = emit_report([_row()], "csv")
    lines = text.splitlines()
    assert len(lines) == 2 and lines[0].split(",") == COLUMNS


def test_round_trips():
    rows = [_row(), _row(method="mixture", estimate=1 / 3, seconds=math.pi)]
    assert parse_report(emit_report(rows, "json", config={"seed": 1}), "json") == rows
    assert parse_report(emit_report(rows, "csv"), "csv") == rows


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="runz"):
        resolve_config({"experiment": {"kind": "table1"}, "runz": 5})
    with pytest.raises(ConfigError):
        resolve_config({"experiment": {"kind": "table1", "bogus": 1}})


def test_config_kind_mismatch_and_defaults():
    with pytest.raises(ConfigError):
        resolve_config({"experiment": {"kind": "table2"}}, "table1")
    cfg = resolve_config({}, "table1")
    assert cfg["runs"] == 10_000 and cfg["experiment"]["n_values"] == [10, 20, 40, 60, 80, 100]


def test_invalid_model_reported_before_simulation():
    bad = {"model": {"type": "iid-lattice", "support": [0, 1], "probs": [0.5, 0.6]},
           "experiment": {"kind": "counterexample"}}
    with pytest.raises(ConfigError):
        resolve_config(bad)


def test_estimate_run():
    rows = run_experiment(ESTIMATE_CFG)
    assert len(rows) == 1
    # P(S_20 >= 10) for N(-0.5, 1) steps
    from scipy.stats import norm

    exact = norm.sf(20 / math.sqrt(20))
    assert abs(rows[0].estimate - exact) <= 4 * rows[0].std_error


def test_cli_estimate_outputs_and_sidecar(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(ESTIMATE_CFG))
    out = tmp_path / "out.csv"
    dump = tmp_path / "mix.csv"
    assert main(["estimate", "--config", str(cfg_path), "--out", str(out), "--dump-mixture", str(dump)]) == 0
    rows = list(csv.DictReader(out.read_text().splitlines()))
    assert len(rows) == 1
    echoed = json.loads((tmp_path / "out.csv.config.json").read_text())
    assert echoed["seed"] == 7 and echoed["runs"] == 2000
    assert dump.exists() and len(dump.read_text().splitlines()) == 2

    assert main(["estimate", "--config", str(cfg_path), "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["config"]["experiment"]["id"] == "demo" and len(doc["rows"]) == 1


def test_cli_reruns_identical_except_seconds(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(ESTIMATE_CFG))

    def run(workers):
        main(["estimate", "--config", str(cfg_path), "--workers", str(workers)])
        recs = list(csv.DictReader(capsys.readouterr().out.splitlines()))
        for r in recs:
            r.pop("seconds")
        return recs

    assert run(1) == run(1) == run(3)


def test_cli_config_errors_exit_2(tmp_path, capsys):
    assert main(["estimate"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"runs": -3}')
    assert main(["table1", "--config", str(bad)]) == 2
    assert "runs" in capsys.readouterr().err


def test_cli_verify_passes(capsys):
    assert main(["verify"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert rows and all(r["display"] == "pass" for r in rows)


def test_blowup_condition():
    assert blowup_condition(lattice_model([-2, 0, 1], [0.3, 0.05, 0.65]), 0.5)["holds"]
    assert not blowup_condition(lattice_model([-1, 0, 1], [0.25, 0.5, 0.25]), 0.5)["holds"]


def test_counterexample_flags_unmet_condition():
    cfg = {"model": {"type": "iid-lattice", "support": [-1, 0, 1], "probs": [0.25, 0.5, 0.25]},
           "experiment": {"kind": "counterexample", "level": 0.5, "ladder": [10]}, "runs": 500}
    rows = run_experiment(cfg)
    assert rows and all(r.method.endswith("(blowup condition unmet)") for r in rows)
