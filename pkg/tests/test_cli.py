import pytest

from src.cli import build_parser, main
from src.harness import read_summary_csv
from src.trainer import CurveRecord, write_curve_csv
from src.utils import dump_yaml, write_text


@pytest.fixture
def tiny_config_file(tmp_path):
    ppo = {"total_env_steps": 16, "rollout_length": 8, "minibatch_size": 8, "epochs_per_update": 1}
    data = {
        "domain": {"kind": "combogrid", "size": 3},
        "source": {"policy_hidden": [2], "value_hidden": [4], "ppo": ppo},
        "target": {"policy_hidden": [2], "value_hidden": [4], "ppo": ppo},
        "selection": {"mode": "vanilla"},
    }
    return write_text(tmp_path / "experiment.yaml", dump_yaml(data))


def test_parser_verbs():
    """Test that verbs and repeated --seed flags parse and unknown verbs exit."""
    parser = build_parser()
    args = parser.parse_args(["select", "--seed", "1", "--seed", "2", "--mode", "dec-options"])
    assert args.verb == "select"
    assert args.seed == [1, 2]
    assert args.mode == "dec-options"

    with pytest.raises(SystemExit):
        parser.parse_args(["deploy"])


def test_aggregate_curve_files(tmp_path, capsys):
    """Test aggregating explicit curve files into a summary CSV."""
    files = []
    for seed in range(3):
        records = [CurveRecord(10, float(seed), seed, "t"), CurveRecord(20, 1.0, seed, "t")]
        files.append(str(write_curve_csv(records, tmp_path / f"{seed}.csv")))
    out = tmp_path / "summary.csv"

    assert main(["aggregate", *files, "--out", str(out)]) == 0

    assert read_summary_csv(out).n_seeds == 3
    assert str(out) in capsys.readouterr().out


def test_run_all_then_aggregate(tmp_path, tiny_config_file):
    """Test run-all followed by aggregate over two seeds of a tiny config."""
    out = tmp_path / "runs"
    common = ["--config", str(tiny_config_file), "--out", str(out), "--seed", "0", "--seed", "1"]

    assert main(["run-all", *common]) == 0
    assert (out / "seed-1" / "vanilla" / "combogrid3-target-0.curve.csv").is_file()
    assert main(["aggregate", *common]) == 0
    assert (out / "summary-vanilla-combogrid3-target-0.csv").is_file()


def test_failing_stage_exits_with_one(tmp_path, capsys):
    """Test that a failed stage exits with status 1 and names the stage."""
    code = main(["decompose", "--out", str(tmp_path), "--seed", "4"])

    assert code == 1
    assert "Stage 'decompose' failed for seed 4" in capsys.readouterr().err


def test_aggregate_needs_two_runs(tmp_path, capsys):
    """Test that aggregating a single run is reported as an error."""
    path = write_curve_csv([CurveRecord(1, 0.0, 0, "t")], tmp_path / "only.csv")
    assert main(["aggregate", str(path)]) == 1
    assert "at least two runs" in capsys.readouterr().err
