import csv
from dataclasses import replace

import numpy as np
import pytest

from src.errors import AggregationError, ConfigurationError, PipelineError
from src.gridworlds import DomainKind, build_task_sets, write_task_file
from src.harness import (
    RunSummary,
    SelectionMode,
    aggregate_experiment,
    aggregate_runs,
    area_under_curve,
    compare_modes,
    config_from_dict,
    curve_auc,
    export_csv,
    load_experiment_config,
    read_summary_csv,
    retained_count,
    run_paths,
    run_pipeline,
    run_stage,
    tabled_hyperparameters,
    train_source,
)
from src.optionlib import read_option_library, read_selection_log
from src.trainer import CurveRecord, read_curve_csv, write_curve_csv
from src.utils import dump_yaml, read_yaml_file, write_text

TINY_PPO = {
    "total_env_steps": 32,
    "rollout_length": 16,
    "minibatch_size": 8,
    "epochs_per_update": 1,
}


def tiny_experiment(tmp_path, mode="dec-options", seeds=(0,)):
    return config_from_dict(
        {
            "domain": {"kind": "combogrid", "size": 3},
            "seeds": list(seeds),
            "source": {"policy_hidden": [2], "value_hidden": [4], "ppo": TINY_PPO},
            "target": {"policy_hidden": [4], "value_hidden": [4], "ppo": TINY_PPO},
            "selection": {"mode": mode, "max_z": 3},
            "output_dir": str(tmp_path),
        }
    )


def write_curve(path, seed, values, task_id="t", steps=None):
    steps = steps if steps is not None else [100 * (i + 1) for i in range(len(values))]
    records = [CurveRecord(s, float(v), seed, task_id) for s, v in zip(steps, values)]
    return write_curve_csv(records, path)


class TestConfiguration:
    def test_defaults(self):
        """Test the configuration built from an empty document."""
        config = config_from_dict({})
        assert config.domain.kind is DomainKind.COMBOGRID
        assert config.seeds == (0,)
        assert config.mode is SelectionMode.DEC_OPTIONS
        assert config.source.shapes.policy_hidden == (6,)
        assert config.target.shapes.policy_hidden == (16,)

    def test_desk_preset(self):
        """Test that the desk preset layers its overrides on the tabled hyperparameters."""
        config = load_experiment_config(preset="desk")

        assert config.seeds == tuple(range(10))
        assert config.source.shapes.value_hidden == (64, 64)
        assert config.source.attempts == 4
        assert config.target.attempts == 1
        assert config.selection.max_z == 16
        source = config.source_ppo()
        assert source.total_env_steps == 100_000
        assert source.rollout_length == 1024
        assert source.entropy_coef == 0.01
        assert source.clip_epsilon == 0.15
        target = config.target_ppo()
        assert (target.clip_epsilon, target.entropy_coef, target.learning_rate) == (
            0.2,
            0.05,
            0.005,
        )
        assert target.total_env_steps == 40_000

    def test_file_merges_over_preset(self, tmp_path):
        """Test that a config file merges its keys over a named preset."""
        path = write_text(
            tmp_path / "exp.yaml",
            dump_yaml({"preset": "desk", "seeds": [3, 4], "selection": {"mode": "vanilla"}}),
        )
        config = load_experiment_config(path)

        assert config.seeds == (3, 4)
        assert config.mode is SelectionMode.VANILLA
        assert config.target_ppo().clip_epsilon == 0.15

    @pytest.mark.parametrize(
        "data",
        [
            {"colour": "blue"},
            {"domain": {"kind": "combogrid", "depth": 3}},
            {"source": {"ppo": {"learning_rat": 0.1}}},
            {"selection": {"mode": "clever"}},
            {"preset": "nonexistent"},
            {"seeds": []},
            {"seeds": [1, 1]},
            {"workers": 0},
            {"source": {"attempts": 0}},
        ],
    )
    def test_invalid(self, data):
        """Test that unknown keys and invalid values raise ConfigurationError."""
        with pytest.raises(ConfigurationError):
            config_from_dict(data)

    def test_not_a_mapping(self, tmp_path):
        """Test that a YAML list is rejected as a config file."""
        path = write_text(tmp_path / "list.yaml", "- 1\n- 2\n")
        with pytest.raises(ConfigurationError):
            load_experiment_config(path)

    def test_with_overrides(self, tmp_path):
        """Test overriding config values the way the command line does."""
        config = config_from_dict({}).with_overrides(
            seeds=[7], mode="random-options", output_dir=tmp_path
        )
        assert config.seeds == (7,)
        assert config.mode is SelectionMode.RANDOM_OPTIONS
        assert config.output_dir == tmp_path

    def test_published_hyperparameters(self):
        """Test lookups in the tabled PPO hyperparameters."""
        assert tabled_hyperparameters("maze", 2, "dec-options-whole") == {
            "clip_epsilon": 0.25,
            "entropy_coef": 0.05,
            "learning_rate": 0.0005,
        }
        assert tabled_hyperparameters("combogrid", 4, "random-options") == (
            tabled_hyperparameters("combogrid", 4, "dec-options")
        )
        with pytest.raises(ConfigurationError):
            tabled_hyperparameters("combogrid", 7, "vanilla")


class TestAggregation:
    """Dropping, confidence intervals and resampling of learning curves."""

    def test_thirty_seeds_keep_twenty_four(self, tmp_path, rng):
        """Test that 30 runs keep the best 24 by final return."""
        files = [
            write_curve(tmp_path / f"{s}.csv", s, rng.normal(size=5).cumsum()) for s in range(30)
        ]
        summary = aggregate_runs(files)

        assert summary.n_seeds == 24
        assert len(summary.dropped) == 6
        finals = {key: curve[-1] for key, curve in summary.curves.items()}
        worst_kept = min(finals[key] for key in summary.retained)
        assert all(finals[key] <= worst_kept for key in summary.dropped)

    def test_retained_count(self):
        """Test the number of runs kept after dropping the worst fifth."""
        assert [retained_count(n) for n in (2, 3, 5, 10, 30)] == [2, 3, 4, 8, 24]

    def test_identical_curves_have_zero_width(self, tmp_path):
        """Test that identical runs give a zero-width interval."""
        files = [write_curve(tmp_path / f"{s}.csv", s, [1.0, 2.0, 3.0]) for s in range(4)]
        summary = aggregate_runs(files)

        np.testing.assert_allclose(summary.mean, [1.0, 2.0, 3.0])
        np.testing.assert_allclose(summary.ci_low, summary.mean)
        np.testing.assert_allclose(summary.ci_high, summary.mean)
        assert not summary.resampled

    def test_outlier_is_dropped(self, tmp_path):
        """Test that the worst runs are dropped from the mean."""
        files = [write_curve(tmp_path / f"{s}.csv", s, [0.0, 10.0 + s]) for s in range(9)]
        files.append(write_curve(tmp_path / "bad.csv", 99, [0.0, -1e12]))

        summary = aggregate_runs(files)

        assert summary.dropped == ((0, "t"), (99, "t"))
        assert summary.n_seeds == 8
        np.testing.assert_allclose(summary.mean, [0.0, 14.5])

    def test_confidence_interval(self, tmp_path):
        """Test the 95% confidence interval of three runs."""
        files = [write_curve(tmp_path / f"{s}.csv", s, [float(s)]) for s in range(3)]
        summary = aggregate_runs(files)

        half = 1.96 * np.std([0.0, 1.0, 2.0], ddof=1) / np.sqrt(3)
        assert summary.mean[0] == pytest.approx(1.0)
        assert summary.ci_high[0] == pytest.approx(1.0 + half)
        assert summary.ci_low[0] == pytest.approx(1.0 - half)

    def test_different_grids_are_resampled(self, tmp_path, caplog):
        """Test that curves on different step grids are resampled with a warning."""
        a = write_curve(tmp_path / "a.csv", 0, [0.0, 1.0, 2.0, 3.0], steps=[10, 20, 30, 40])
        b = write_curve(tmp_path / "b.csv", 1, [0.0, 2.0, 4.0], steps=[10, 25, 40])

        summary = aggregate_runs([a, b])

        assert summary.resampled
        np.testing.assert_array_equal(summary.env_steps, [10, 25, 40])
        np.testing.assert_allclose(summary.curves[(0, "t")], [0.0, 1.5, 3.0])
        assert "resampled" in caplog.text

    def test_needs_two_runs(self, tmp_path):
        """Test that a single run cannot be aggregated."""
        with pytest.raises(AggregationError):
            aggregate_runs([write_curve(tmp_path / "one.csv", 0, [1.0])])

    def test_unreadable_curve(self, tmp_path):
        """Test that missing curve files raise AggregationError."""
        with pytest.raises(AggregationError):
            aggregate_runs([tmp_path / "missing.csv", tmp_path / "other.csv"])

    def test_export_round_trip_and_determinism(self, tmp_path, rng):
        """Test that summary CSVs are independent of input order."""
        files = [write_curve(tmp_path / f"{s}.csv", s, rng.normal(size=4)) for s in range(6)]
        first = export_csv(aggregate_runs(files), tmp_path / "first.csv")
        second = export_csv(aggregate_runs(list(reversed(files))), tmp_path / "second.csv")

        assert first.read_bytes() == second.read_bytes()
        assert first.read_text(encoding="utf-8").splitlines()[0] == (
            "env_step,mean_return,ci_low,ci_high,n_seeds"
        )
        original = aggregate_runs(files)
        loaded = read_summary_csv(first)
        np.testing.assert_array_equal(loaded.mean, original.mean)
        np.testing.assert_array_equal(loaded.env_steps, original.env_steps)
        assert loaded.n_seeds == 5

    def test_empty_summary_is_not_written(self, tmp_path):
        """Test that an empty summary is refused and no file is left."""
        empty = RunSummary(np.array([]), np.array([]), np.array([]), np.array([]), 0)
        with pytest.raises(AggregationError):
            export_csv(empty, tmp_path / "empty.csv")
        assert not (tmp_path / "empty.csv").exists()

    def test_area_under_curve(self, tmp_path):
        """Test trapezoidal areas under learning curves."""
        assert area_under_curve([0, 10, 20], [0.0, 1.0, 1.0]) == pytest.approx(15.0)
        assert area_under_curve([5], [3.0]) == 0.0
        path = write_curve(tmp_path / "c.csv", 0, [0.0, 2.0], steps=[0, 4])
        assert curve_auc(path) == pytest.approx(4.0)


class TestPipeline:
    """Tiny end-to-end runs of every stage."""

    def test_dec_options_single_seed(self, tmp_path):
        """Test every artifact of one dec-options seed, including the greedy trace."""
        config = tiny_experiment(tmp_path)

        (paths,) = run_pipeline(config)

        sources, targets = build_task_sets("combogrid", 3)
        for task in sources:
            assert paths.source_policy(task.task_id).is_file()
            assert paths.source_value(task.task_id).is_file()
            assert paths.source_curve(task.task_id).is_file()
        decomposition = read_yaml_file(paths.decomposition)
        assert [e["subpolicies"] for e in decomposition["tasks"]] == [9, 9, 9, 9]
        options = read_option_library(paths.options)
        assert all(1 <= o.z <= 3 for o in options)
        assert len(read_selection_log(paths.selection_log)) == len(options)
        curve = read_curve_csv(paths.target_curve(targets[0].task_id))
        assert curve[-1].env_step >= 32

        with paths.target_trace(targets[0].task_id).open(encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
        assert rows
        assert sum(int(r["duration"]) for r in rows) <= targets[0].max_steps
        for row in rows:
            if row["action_kind"] == "option":
                assert 0 <= int(row["action_id"]) < len(options)
                assert 1 <= int(row["duration"]) <= 3
            else:
                assert int(row["duration"]) == 1

    def test_rerun_is_byte_identical(self, tmp_path):
        """Test that rerunning a seed reproduces its artifacts byte for byte."""
        first = run_pipeline(tiny_experiment(tmp_path / "a"))[0]
        second = run_pipeline(tiny_experiment(tmp_path / "b"))[0]

        for name in (
            "options.yaml",
            "selection-log.csv",
            "combogrid3-target-0.curve.csv",
            "combogrid3-target-0.trace.csv",
        ):
            assert (first.mode_dir / name).read_bytes() == (second.mode_dir / name).read_bytes()

    def test_random_and_vanilla_modes(self, tmp_path):
        """Test the random-options and vanilla pipelines."""
        random_paths = run_pipeline(tiny_experiment(tmp_path, mode="random-options"))[0]
        options = read_option_library(random_paths.options)
        assert len(options) == 4
        assert all(o.z == 6 and o.task_id == "random" for o in options)
        assert not random_paths.trajectories.exists()

        vanilla = run_pipeline(tiny_experiment(tmp_path, mode="vanilla"))[0]
        assert not vanilla.options.exists()
        assert vanilla.target_curve("combogrid3-target-0").is_file()
        trace = vanilla.target_trace("combogrid3-target-0").read_text(encoding="utf-8")
        assert all(",primitive," in line for line in trace.splitlines()[1:])

    def test_unsolved_source_is_retrained(self, tmp_path, caplog):
        """Test that a source policy missing its goal is retrained up to `attempts` times."""
        data = {
            "source": {"policy_hidden": [2], "value_hidden": [4], "attempts": 3,
                       "ppo": {"total_env_steps": 0}},
            "output_dir": str(tmp_path),
        }

        written = train_source(config_from_dict(data), 0)

        assert len(written) == 4
        misses = [r.getMessage() for r in caplog.records if "missed the goal" in r.getMessage()]
        assert len(misses) == 12
        assert sum("attempt 3 of 3" in message for message in misses) == 4

    def test_stage_can_restart(self, tmp_path):
        """Test that a stage rerun from its inputs gives the same output."""
        config = tiny_experiment(tmp_path)
        run_pipeline(config)
        before = run_paths(config, 0).options.read_bytes()

        run_stage(config, "select", 0)

        assert run_paths(config, 0).options.read_bytes() == before

    def test_failed_stage_names_stage_and_seed(self, tmp_path):
        """Test that a failed stage raises PipelineError naming stage and seed."""
        with pytest.raises(PipelineError) as exc_info:
            run_stage(tiny_experiment(tmp_path, seeds=(3,)), "decompose", 3)
        assert exc_info.value.stage == "decompose"
        assert exc_info.value.seed == 3
        assert "Stage 'decompose' failed for seed 3" in str(exc_info.value)

    def test_unknown_stage(self, tmp_path):
        """Test that an unknown stage name is rejected."""
        with pytest.raises(ConfigurationError):
            run_stage(tiny_experiment(tmp_path), "deploy", 0)

    def test_aggregate_experiment(self, tmp_path):
        """Test aggregating the target curves of a two-seed experiment."""
        config = tiny_experiment(tmp_path, mode="vanilla", seeds=(0, 1))
        run_pipeline(config)

        (summary_path,) = aggregate_experiment(config)

        assert summary_path.name == "summary-vanilla-combogrid3-target-0.csv"
        assert read_summary_csv(summary_path).n_seeds == 2

    def test_aggregate_without_runs(self, tmp_path):
        """Test that aggregating an experiment with no runs fails."""
        with pytest.raises(AggregationError):
            aggregate_experiment(tiny_experiment(tmp_path))


def test_compare_modes(tmp_path):
    """Test paired AUC comparison of two modes over three seeds."""
    config = tiny_experiment(tmp_path, seeds=(0, 1, 2))
    _, targets = build_task_sets("combogrid", 3)
    task_id = targets[0].task_id
    for seed in (0, 1, 2):
        paths = run_paths(config, seed)
        write_task_file(targets, paths.target_tasks)
        better = [1.0, 5.0] if seed < 2 else [0.0, 0.0]
        write_curve(paths.target_curve(task_id), seed, better, task_id)
        write_curve(
            run_paths(config.with_overrides(mode="vanilla"), seed).target_curve(task_id),
            seed,
            [1.0, 2.0],
            task_id,
        )

    (comparison,) = compare_modes(config, "dec-options", "vanilla")

    assert comparison.task_id == task_id
    assert comparison.seeds == [0, 1, 2]
    assert comparison.wins == 2
    assert comparison.auc_a[0] == pytest.approx(300.0)


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    """Dec-options, whole-policy and vanilla runs of the desk preset sharing source policies."""
    base = load_experiment_config(preset="desk").with_overrides(
        output_dir=tmp_path_factory.mktemp("desk")
    )
    base = replace(base, workers=4)
    configs = {mode: base.with_overrides(mode=mode) for mode in SelectionMode}
    run_pipeline(configs[SelectionMode.DEC_OPTIONS])
    for seed in base.seeds:
        for stage in ("decompose", "select", "train-target"):
            run_stage(configs[SelectionMode.DEC_OPTIONS_WHOLE], stage, seed)
        run_stage(configs[SelectionMode.VANILLA], "train-target", seed)
    return configs


def _selection_losses(config, seed):
    rows = read_selection_log(run_paths(config, seed).selection_log)
    return [float(row["total_loss"]) for row in rows]


@pytest.mark.slow
class TestDeskTransfer:
    """Transfer from the four 3x3 ComboGrid source tasks to the marker task."""

    def test_source_policies_reach_their_goals(self, desk_runs):
        """Test that every greedy source policy reaches its goal on every seed."""
        config = desk_runs[SelectionMode.DEC_OPTIONS]
        for seed in config.seeds:
            document = read_yaml_file(run_paths(config, seed).decomposition)
            assert all(entry["reached_goal"] for entry in document["tasks"])

    @pytest.mark.parametrize("mode", ["dec-options", "dec-options-whole"])
    def test_selection_lowers_the_loss(self, desk_runs, mode):
        """Test that selection lowers the loss on every seed."""
        config = desk_runs[SelectionMode(mode)]
        for seed in config.seeds:
            losses = _selection_losses(config, seed)
            assert all(b < a for a, b in zip(losses, losses[1:]))
            options = read_option_library(run_paths(config, seed).options)
            assert len(options) == len(losses)
            if mode == "dec-options":
                assert options

    def test_decomposed_options_beat_primitives(self, desk_runs):
        """Test that dec-options beats vanilla on AUC and final return."""
        config = desk_runs[SelectionMode.DEC_OPTIONS]
        (comparison,) = compare_modes(config, "dec-options", "vanilla")

        assert len(comparison.seeds) == 10
        assert comparison.wins >= 8

        finals = {}
        for mode in ("dec-options", "vanilla"):
            (path,) = aggregate_experiment(desk_runs[SelectionMode(mode)])
            finals[mode] = read_summary_csv(path).mean[-1]
        assert finals["dec-options"] >= 40.0
        assert finals["vanilla"] <= finals["dec-options"]
