import json
from pathlib import Path
from typing import List

from typer.testing import CliRunner

from charmonium.dam import datagen, models, vilsurrogate
from charmonium.dam.cli import app

runner = CliRunner()

SMALL_CONFIG = """\
seeds = [0, 1]
rho = 0.1
[dataset]
classes = 3
dim = 4
n_source = 90
n_target = 90
[dataset.shift]
rotation_angle = 0.4
[source]
epochs = 5
batch_size = 32
hidden = 8
[surrogate]
feature_dim = 16
context_length = 4
[dfs]
epochs = 2
[adl]
epochs = 1
batch_size = 32
top_n = 4
"""


def write_config(tmp_path: Path) -> Path:
    path = tmp_path / "small.toml"
    # output_dir is a top-level key, so it has to precede the first table.
    path.write_text(f'output_dir = "{(tmp_path / "runs").as_posix()}"\n' + SMALL_CONFIG)
    return path


def invoke(args: List[str]) -> str:
    result = runner.invoke(app, ["--quiet", *args])
    assert result.exit_code == 0, result.output
    return result.output


def test_pipeline_commands(tmp_path: Path) -> None:
    config = str(write_config(tmp_path))
    data = tmp_path / "data"
    invoke(["gen-data", str(data), "--seed", "3", "--config", config])
    assert sorted(path.name for path in data.iterdir()) == ["foundation.csv", "source.csv", "target.csv"]
    assert datagen.load_dataset(data / "target.csv").size == 90

    model = tmp_path / "source_model.txt"
    invoke(["train-source", str(data / "source.csv"), str(model), "--config", config])
    assert models.load_model(model).hidden == 8

    queries = tmp_path / "queries.json"
    invoke(["query", str(model), str(data / "target.csv"), str(queries), "--strategy", "entropy", "--config", config])
    queried = json.loads(queries.read_text())
    assert queried["strategy"] == "entropy"
    assert queried["budget"] == 9
    assert len(queried["indices"]) == len(queried["labels"]) == 9

    adapted = tmp_path / "adapted"
    args = [str(model), str(data / "target.csv"), str(data / "foundation.csv"), str(queries), str(adapted)]
    output = invoke(["adapt", *args, "--config", config])
    assert "target accuracy" in output
    assert models.load_model(adapted / "target_model.txt").classes == 3
    assert vilsurrogate.load_prompt_bank(adapted / "prompt_bank.txt").context_length == 4
    assert len(json.loads((adapted / "metrics.json").read_text())) == 1


def test_run_and_report(tmp_path: Path) -> None:
    config = str(write_config(tmp_path))
    output = invoke(["run", "--variant", "baseline_frozen_prompts", "--config", config])
    assert "ordering: baseline_frozen_prompts" in output
    records = tmp_path / "runs" / "records"
    assert len(list(records.glob("*.json"))) == 2

    output = invoke(["report", str(records), str(tmp_path / "again")])
    assert (tmp_path / "again" / "summary.csv").exists()
    assert "2 runs complete" in output


def test_bad_config_exits_with_error(tmp_path: Path) -> None:
    result = runner.invoke(app, ["--quiet", "gen-data", str(tmp_path), "--set", "dataset.classes=1"])
    assert result.exit_code == 2
    assert "error:" in result.output


def test_unknown_override_key(tmp_path: Path) -> None:
    result = runner.invoke(app, ["--quiet", "run", "--set", "adl.not_a_field=1"])
    assert result.exit_code == 2
    assert "not_a_field" in result.output


def test_ablate_and_sweep(tmp_path: Path) -> None:
    config = str(write_config(tmp_path))
    output = invoke(["ablate", "--variant", "no_LC", "--variant", "full", "--config", config])
    assert "4 runs complete" in output
    output = invoke(["sweep", "--rho", "0.05", "--rho", "0.1", "--variant", "full", "--config", config])
    assert "4 runs complete" in output
    names = sorted(path.name for path in (tmp_path / "runs" / "records").glob("full-*.json"))
    assert names == [
        "full-rho0.05-seed0.json",
        "full-rho0.05-seed1.json",
        "full-rho0.1-seed0.json",
        "full-rho0.1-seed1.json",
    ]
