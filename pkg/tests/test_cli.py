import json
import shutil

import numpy as np
import pytest

from orpdkit import fixtures
from orpdkit.cli import main
from orpdkit.datagen import read_table


@pytest.fixture()
def workdir(tmp_path):
    grid_path = tmp_path / "grid.json"
    shutil.copy(fixtures.fixture_path("small14"), grid_path)
    nominal_path = tmp_path / "nominal.csv"
    shutil.copy(fixtures.fixture_path("small14").parent / "small14_nominal.csv", nominal_path)
    return tmp_path


def _config(workdir, **extra):
    cfg = {
        "paths": {
            "grid": str(workdir / "grid.json"),
            "nominal": str(workdir / "nominal.csv"),
            "inputs": str(workdir / "out" / "inputs.csv"),
            "dataset": str(workdir / "out" / "dataset.csv"),
            "outdir": str(workdir / "out"),
        },
        "seeds": {"synth": 7, "split": 3, "init": 1, "train": 2, "hyper": 5},
        "synth": {"count": 6, "spread": 0.3},
        "split": {"scheme": "random", "fractions": [0.5, 0.25, 0.25]},
        "training": {
            "family": "fcnn",
            "max_epochs": 4,
            "batch_size": 4,
            "fcnn": {"hidden": [8]},
            "gnn": {"hidden": [6], "taps": 2},
        },
        "eval": {"rho": 0.018},
    }
    for key, value in extra.items():
        cfg[key] = value
    path = workdir / "config.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path


def test_grid_validate_ok(workdir, capsys):
    cfg = _config(workdir)
    assert main(["--config", str(cfg), "--print", "grid", "validate"]) == 0
    assert (workdir / "out" / "grid_validation.txt").read_text().strip() == "valid"
    assert capsys.readouterr().out.strip() == "valid"


def test_grid_validate_failure_exit_code(workdir):
    doc = json.loads((workdir / "grid.json").read_text())
    doc["volt_gens"][1]["is_slack"] = True
    (workdir / "grid.json").write_text(json.dumps(doc))
    cfg = _config(workdir)
    assert main(["--config", str(cfg), "grid", "validate"]) == 3


def test_missing_config_is_config_error():
    assert main(["grid", "validate"]) == 2
    assert main(["--config", "/nonexistent.json", "grid", "validate"]) == 2


def test_synth_bounds_and_row_count(workdir):
    cfg = _config(workdir)
    assert main(["--config", str(cfg), "data", "synth", "--count", "50"]) == 0
    table = read_table(workdir / "out" / "inputs.csv")
    assert len(table.timestamps) == 50
    nominal = read_table(workdir / "nominal.csv")
    base = nominal.values[0]
    lo = np.minimum(base * 0.7, base * 1.3)
    hi = np.maximum(base * 0.7, base * 1.3)
    assert np.all(table.values >= lo - 1e-15)
    assert np.all(table.values <= hi + 1e-15)


def test_pf_run_writes_solution(workdir):
    cfg = _config(workdir)
    assert main(["--config", str(cfg), "data", "synth"]) == 0
    assert main(["--config", str(cfg), "pf", "run"]) == 0
    payload = json.loads((workdir / "out" / "pf_solution.json").read_text())
    assert payload["iterations"] <= 30
    assert payload["residual_norm"] <= 1e-8


def test_full_chain_and_reproducibility(workdir):
    cfg = _config(workdir)
    chain = [
        ["data", "synth"],
        ["data", "label"],
        ["data", "split"],
        ["train", "--family", "fcnn"],
        ["eval", "--checkpoint", str(workdir / "out" / "model_fcnn.json")],
        ["eval", "--checkpoint", "oracle"],
    ]
    for command in chain:
        assert main(["--config", str(cfg)] + command) == 0, command

    report_cfg = _config(
        workdir,
        report={
            "sections": [
                {
                    "name": "Synthetic Data",
                    "rows": [
                        {"name": "Optimal", "oracle": True},
                        {"name": "FCNN", "metrics": str(workdir / "out" / "metrics_fcnn.json")},
                    ],
                }
            ]
        },
    )
    assert main(["--config", str(report_cfg), "report"]) == 0
    text = (workdir / "out" / "report.txt").read_text()
    assert "Optimal" in text and "FCNN" in text

    assert (
        main(
            ["--config", str(cfg), "plot", "--metrics", str(workdir / "out" / "metrics_fcnn.json"),
             "--elements", "vgen_0_vset", "comp_7_q"]
        )
        == 0
    )
    assert (workdir / "out" / "plots" / "compare_vgen_0_vset.svg").exists()

    # Identical seeds reproduce the primary artifacts byte for byte.
    first = {
        name: (workdir / "out" / name).read_bytes()
        for name in ["inputs.csv", "dataset.csv", "model_fcnn.json", "metrics_fcnn.json", "report.txt"]
    }
    for command in chain:
        assert main(["--config", str(cfg)] + command) == 0
    assert main(["--config", str(report_cfg), "report"]) == 0
    for name, blob in first.items():
        assert (workdir / "out" / name).read_bytes() == blob, name


def test_data_stats_outputs(workdir):
    cfg = _config(workdir)
    assert main(["--config", str(cfg), "data", "synth"]) == 0
    assert main(["--config", str(cfg), "data", "stats"]) == 0
    assert (workdir / "out" / "hist_load_3_p.csv").exists()
    assert (workdir / "out" / "season_hour_load_3_p.csv").exists()


def test_data_ingest(workdir):
    import datetime

    from orpdkit.datagen import TimeSeriesTable, write_table

    stamps = [
        (datetime.datetime(2021, 1, 1) + datetime.timedelta(hours=k)).isoformat() for k in range(6)
    ]
    gen = TimeSeriesTable(stamps, ["stat_2_p", "vgen_1_p"], np.full((6, 2), 30.0), {"p": "MW"})
    load = TimeSeriesTable(stamps, ["load_3_p", "load_3_q"], np.full((6, 2), 20.0), {"p": "MW", "q": "MVar"})
    write_table(gen, workdir / "gen.csv")
    write_table(load, workdir / "load.csv")
    cfg_path = _config(workdir)
    cfg = json.loads(cfg_path.read_text())
    cfg["paths"]["generation"] = str(workdir / "gen.csv")
    cfg["paths"]["loads"] = str(workdir / "load.csv")
    cfg_path.write_text(json.dumps(cfg))
    assert main(["--config", str(cfg_path), "data", "ingest"]) == 0
    table = read_table(workdir / "out" / "ingested.csv")
    assert len(table.timestamps) == 6
    assert table.values[0][table.columns.index("stat_2_p")] == pytest.approx(0.3)


def test_hyper_budget_one(workdir):
    cfg = _config(workdir, hyper={"space": {"lr": [0.001, 0.003]}, "budget": 1})
    assert main(["--config", str(cfg), "data", "synth"]) == 0
    assert main(["--config", str(cfg), "data", "label"]) == 0
    assert main(["--config", str(cfg), "data", "split"]) == 0
    assert main(["--config", str(cfg), "hyper", "--budget", "1"]) == 0
    payload = json.loads((workdir / "out" / "hyper_trials.json").read_text())
    assert len(payload["trials"]) == 1
    assert payload["best"] == payload["trials"][0]["params"]


def test_orpd_solve_single_row(workdir):
    cfg = _config(workdir)
    assert main(["--config", str(cfg), "data", "synth"]) == 0
    assert main(["--config", str(cfg), "orpd", "solve", "--row", "1"]) == 0
    payload = json.loads((workdir / "out" / "orpd_solution.json").read_text())
    assert payload["feasible_at"] == 0.0
    assert len(payload["u"]) == 5
