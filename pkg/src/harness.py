"""
Experiment configuration, the four-stage pipeline and run aggregation.

Stages, per seed:

1. ``train-source``: train a policy on every source task.
2. ``decompose``: roll out the greedy source policies and record how they are
   decomposed.
3. ``select``: build option candidates and select options (or draw random
   options).
4. ``train-target``: train on every target task with the selected options.

Every stage reads only the files written by the stages before it, so the
pipeline can be restarted from any stage. Layout under ``output_dir``::

    seed-<s>/source/   source-tasks.yaml, target-tasks.yaml,
                       <task>.policy.yaml, <task>.value.yaml, <task>.curve.csv
    seed-<s>/<mode>/   trajectories.yaml, decomposition.yaml, options.yaml,
                       selection-log.csv, <task>.policy.yaml, <task>.curve.csv,
                       <task>.trace.csv
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .decomposer import enumerate_subpolicies
from .errors import AggregationError, ConfigurationError, DecompositionError, PipelineError
from .gridworlds import (
    N_PRIMITIVES,
    DomainKind,
    GridSpec,
    build_task_sets,
    make_env,
    read_task_file,
    write_task_file,
)
from .neuralnet import MlpPolicy, read_weight_file, write_weight_file
from .option_env import OptionEnv, trace_episode
from .optionlib import (
    ExclusionPolicy,
    SelectionResult,
    collect_trajectories,
    generate_candidates,
    greedy_select,
    random_options,
    read_option_library,
    read_trajectories,
    write_option_library,
    write_selection_log,
    write_trajectories,
)
from .trainer import (
    NetShapes,
    PpoConfig,
    TrainResult,
    read_curve_csv,
    train_task,
    write_curve_csv,
)
from .utils import dump_yaml, ensure_dir, read_yaml_file, write_text

logger = logging.getLogger(__name__)


class SelectionMode(str, Enum):
    DEC_OPTIONS = "dec-options"
    DEC_OPTIONS_WHOLE = "dec-options-whole"
    RANDOM_OPTIONS = "random-options"
    VANILLA = "vanilla"


# (clip_epsilon, entropy_coef, learning_rate) of the target-task agents.
# ComboGrid rows are keyed by grid size, Four Rooms rows by target task index.
_TABLE_MODES = ("vanilla", "dec-options-whole", "dec-options")
_TABLE_ROWS = {
    ("combogrid", 3): [(0.15, 0.1, 0.01), (0.15, 0.05, 0.005), (0.2, 0.05, 0.005)],
    ("combogrid", 4): [(0.1, 0.0, 0.005), (0.25, 0.05, 0.01), (0.25, 0.0, 0.005)],
    ("combogrid", 5): [(0.25, 0.1, 0.005), (0.2, 0.05, 0.005), (0.2, 0.05, 0.005)],
    ("combogrid", 6): [(0.1, 0.05, 0.005), (0.2, 0.0, 0.001), (0.15, 0.05, 0.005)],
    ("maze", 1): [(0.15, 0.05, 0.0005), (0.3, 0.15, 0.0005), (0.25, 0.1, 0.0005)],
    ("maze", 2): [(0.1, 0.2, 0.0005), (0.25, 0.05, 0.0005), (0.2, 0.1, 0.001)],
    ("maze", 3): [(0.2, 0.0, 5e-05), (0.15, 0.05, 0.001), (0.2, 0.1, 0.001)],
}
PPO_TABLES: Dict[Tuple[str, int], Dict[str, Tuple[float, float, float]]] = {
    key: dict(zip(_TABLE_MODES, rows)) for key, rows in _TABLE_ROWS.items()
}

DEFAULT_BUDGETS = {
    "combogrid": {"source": 50_000, "target": 200_000},
    "maze": {"source": 200_000, "target": 500_000},
}


def tabled_hyperparameters(
    domain_kind: Union[DomainKind, str], key: int, mode: Union[SelectionMode, str]
) -> Dict[str, float]:
    """
    Published clip / entropy / learning-rate values of a target agent.

    `key` is the grid size for ComboGrid and the 1-based target task index for
    mazes. Random-option agents use the Dec-Options row.
    """
    kind = DomainKind(domain_kind).value
    mode = SelectionMode(mode)
    row_mode = SelectionMode.DEC_OPTIONS if mode is SelectionMode.RANDOM_OPTIONS else mode
    if kind == "maze":
        key = min(max(int(key), 1), 3)
    table = PPO_TABLES.get((kind, int(key)))
    if table is None:
        raise ConfigurationError(f"No published hyperparameters for {kind} {key}")
    clip, entropy, lr = table[row_mode.value]
    return {"clip_epsilon": clip, "entropy_coef": entropy, "learning_rate": lr}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _reject_unknown(section: str, data: Dict[str, Any], allowed: Sequence[str]) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigurationError(f"Unknown keys in '{section}': {', '.join(unknown)}")


@dataclass(frozen=True)
class DomainConfig:
    kind: DomainKind = DomainKind.COMBOGRID
    size: int = 3
    target_size: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", DomainKind(self.kind))


@dataclass(frozen=True)
class PhaseConfig:
    """
    Networks and PPO settings of one phase.

    `ppo` holds explicit overrides; anything left out comes from the
    published defaults for the domain, task and mode.
    `attempts` is the number of training runs (each with a fresh seed) a
    source task gets before its greedy policy is accepted without reaching
    the goal.
    """

    shapes: NetShapes = field(default_factory=NetShapes)
    ppo: Dict[str, Any] = field(default_factory=dict)
    attempts: int = 1

    def __post_init__(self) -> None:
        PpoConfig.from_dict(self.ppo)  # validate keys early
        if self.attempts < 1:
            raise ConfigurationError(f"attempts must be at least 1, got {self.attempts}")


@dataclass(frozen=True)
class SelectionConfig:
    mode: SelectionMode = SelectionMode.DEC_OPTIONS
    exclusion: ExclusionPolicy = ExclusionPolicy.LEAVE_OWN_TASK_OUT
    validation_tasks: Tuple[str, ...] = ()
    random_length: int = 6
    random_count: int = 4
    max_z: Optional[int] = None
    max_pool: Optional[int] = None
    max_options: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", SelectionMode(self.mode))
        object.__setattr__(self, "exclusion", ExclusionPolicy(self.exclusion))
        object.__setattr__(self, "validation_tasks", tuple(self.validation_tasks))
        if self.random_length < 1 or self.random_count < 1:
            raise ConfigurationError("random_length and random_count must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of an experiment; see `load_experiment_config`."""

    domain: DomainConfig = field(default_factory=DomainConfig)
    seeds: Tuple[int, ...] = (0,)
    source: PhaseConfig = field(default_factory=PhaseConfig)
    target: PhaseConfig = field(default_factory=PhaseConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    output_dir: Path = Path("runs")
    workers: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        if not self.seeds:
            raise ConfigurationError("An experiment needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError(f"Duplicate seeds in {self.seeds}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")

    @property
    def mode(self) -> SelectionMode:
        return self.selection.mode

    def _budget(self, phase: str) -> int:
        return DEFAULT_BUDGETS[self.domain.kind.value][phase]

    def source_ppo(self) -> PpoConfig:
        """Source agents use the vanilla row of the domain's first table."""
        key = self.domain.size if self.domain.kind is DomainKind.COMBOGRID else 1
        base = dict(tabled_hyperparameters(self.domain.kind, key, SelectionMode.VANILLA))
        base["total_env_steps"] = self._budget("source")
        base.update(self.source.ppo)
        return PpoConfig.from_dict(base)

    def target_ppo(self, task_index: int = 0) -> PpoConfig:
        key = self.domain.size if self.domain.kind is DomainKind.COMBOGRID else task_index + 1
        base = dict(tabled_hyperparameters(self.domain.kind, key, self.mode))
        base["total_env_steps"] = self._budget("target")
        base.update(self.target.ppo)
        return PpoConfig.from_dict(base)

    def with_overrides(
        self,
        seeds: Optional[Sequence[int]] = None,
        mode: Optional[Union[SelectionMode, str]] = None,
        output_dir: Optional[Union[str, Path]] = None,
    ) -> "ExperimentConfig":
        cfg = self
        if seeds is not None:
            cfg = replace(cfg, seeds=tuple(seeds))
        if mode is not None:
            cfg = replace(cfg, selection=replace(cfg.selection, mode=SelectionMode(mode)))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=Path(output_dir))
        return cfg


def default_shapes(kind: Union[DomainKind, str], phase: str) -> NetShapes:
    """Published architectures: 6 hidden units on source tasks, wider targets."""
    kind = DomainKind(kind)
    value = (200, 200, 200) if kind is DomainKind.COMBOGRID else (256, 256, 256)
    if phase == "source":
        return NetShapes((6,), value)
    policy = (16,) if kind is DomainKind.COMBOGRID else (50, 50, 50)
    return NetShapes(policy, value)


PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {
        "domain": {"kind": "combogrid", "size": 3},
        "seeds": list(range(10)),
        "source": {
            "policy_hidden": [6],
            "value_hidden": [64, 64],
            "ppo": {"total_env_steps": 100_000, "rollout_length": 1024, "minibatch_size": 64,
                    "epochs_per_update": 10, "entropy_coef": 0.01},
            "attempts": 4,
        },
        "target": {
            "policy_hidden": [16],
            "value_hidden": [64, 64],
            "ppo": {"total_env_steps": 40_000, "rollout_length": 512, "minibatch_size": 64,
                    "epochs_per_update": 10},
        },
        "selection": {"max_z": 16},
        "output_dir": "runs/desk",
    },
    "desk-maze": {
        "domain": {"kind": "maze", "size": 9, "target_size": 9},
        "seeds": list(range(5)),
        "source": {
            "policy_hidden": [6],
            "value_hidden": [64, 64],
            "ppo": {"total_env_steps": 60_000, "rollout_length": 1024, "minibatch_size": 64},
        },
        "target": {
            "policy_hidden": [50, 50, 50],
            "value_hidden": [64, 64],
            "ppo": {"total_env_steps": 60_000, "rollout_length": 1024, "minibatch_size": 64},
        },
        "output_dir": "runs/desk-maze",
    },
}

_TOP_KEYS = ("preset", "domain", "seeds", "source", "target", "selection", "output_dir", "workers")
_PHASE_KEYS = ("policy_hidden", "value_hidden", "head", "ppo", "attempts")


def _deep_merge(base: Dict[str, Any], extra: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _phase_from_dict(name: str, data: Dict[str, Any], kind: DomainKind) -> PhaseConfig:
    if not isinstance(data, dict):
        raise ConfigurationError(f"Section '{name}' must be a mapping")
    _reject_unknown(name, data, _PHASE_KEYS)
    shapes = default_shapes(kind, name)
    shapes = NetShapes(
        tuple(data.get("policy_hidden", shapes.policy_hidden)),
        tuple(data.get("value_hidden", shapes.value_hidden)),
        data.get("head", shapes.head),
    )
    ppo = data.get("ppo") or {}
    if not isinstance(ppo, dict):
        raise ConfigurationError(f"'{name}.ppo' must be a mapping")
    return PhaseConfig(shapes, dict(ppo), int(data.get("attempts", 1)))


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    """
    Build an ExperimentConfig from parsed YAML.

    A ``preset`` key loads a named preset first; the other sections are
    merged on top of it.

    Raises:
        ConfigurationError: On unknown keys or invalid values
    """
    data = dict(data or {})
    _reject_unknown("config", data, _TOP_KEYS)
    preset = data.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"Unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = _deep_merge(PRESETS[preset], data)
    try:
        domain_data = data.get("domain") or {}
        _reject_unknown("domain", domain_data, [f.name for f in fields(DomainConfig)])
        domain = DomainConfig(**domain_data)
        selection_data = data.get("selection") or {}
        _reject_unknown("selection", selection_data, [f.name for f in fields(SelectionConfig)])
        return ExperimentConfig(
            domain=domain,
            seeds=tuple(data.get("seeds", (0,))),
            source=_phase_from_dict("source", data.get("source") or {}, domain.kind),
            target=_phase_from_dict("target", data.get("target") or {}, domain.kind),
            selection=SelectionConfig(**selection_data),
            output_dir=Path(data.get("output_dir", "runs")),
            workers=int(data.get("workers", 1)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"Invalid experiment configuration: {exc}") from exc


def load_experiment_config(
    path: Optional[Union[str, Path]] = None, preset: Optional[str] = None
) -> ExperimentConfig:
    """Load a YAML experiment file, a named preset, or the defaults."""
    data: Dict[str, Any] = {}
    if path is not None:
        loaded = read_yaml_file(path)
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigurationError(f"{path} must contain a mapping")
        data = loaded or {}
    if preset is not None:
        data = {**data, "preset": preset}
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunPaths:
    """Deterministic artifact locations of one seed."""

    root: Path
    mode: SelectionMode

    @property
    def source_dir(self) -> Path:
        return self.root / "source"

    @property
    def mode_dir(self) -> Path:
        return self.root / self.mode.value

    @property
    def source_tasks(self) -> Path:
        return self.source_dir / "source-tasks.yaml"

    @property
    def target_tasks(self) -> Path:
        return self.source_dir / "target-tasks.yaml"

    @property
    def trajectories(self) -> Path:
        return self.mode_dir / "trajectories.yaml"

    @property
    def decomposition(self) -> Path:
        return self.mode_dir / "decomposition.yaml"

    @property
    def options(self) -> Path:
        return self.mode_dir / "options.yaml"

    @property
    def selection_log(self) -> Path:
        return self.mode_dir / "selection-log.csv"

    def source_policy(self, task_id: str) -> Path:
        return self.source_dir / f"{task_id}.policy.yaml"

    def source_value(self, task_id: str) -> Path:
        return self.source_dir / f"{task_id}.value.yaml"

    def source_curve(self, task_id: str) -> Path:
        return self.source_dir / f"{task_id}.curve.csv"

    def target_policy(self, task_id: str) -> Path:
        return self.mode_dir / f"{task_id}.policy.yaml"

    def target_curve(self, task_id: str) -> Path:
        return self.mode_dir / f"{task_id}.curve.csv"

    def target_trace(self, task_id: str) -> Path:
        return self.mode_dir / f"{task_id}.trace.csv"


def run_paths(config: ExperimentConfig, seed: int) -> RunPaths:
    return RunPaths(config.output_dir / f"seed-{seed}", config.mode)


def _train_until_solved(
    config: ExperimentConfig, task: GridSpec, ppo: PpoConfig, seed: int
) -> TrainResult:
    """Train a source policy, retrying with a fresh seed while its greedy rollout is truncated."""
    attempts = config.source.attempts
    for attempt in range(attempts):
        result = train_task(task, config.source.shapes, ppo, seed + 100 * attempt)
        if all(not t.truncated for t in collect_trajectories(result.policy, task)):
            return result
        logger.warning(
            "Greedy source policy for '%s' missed the goal (attempt %d of %d)",
            task.task_id, attempt + 1, attempts,
        )
    return result


def train_source(config: ExperimentConfig, seed: int) -> List[Path]:
    """Stage 1: write the task sets and train one policy per source task."""
    paths = run_paths(config, seed)
    sources, targets = build_task_sets(
        config.domain.kind, config.domain.size, seed, config.domain.target_size
    )
    write_task_file(sources, paths.source_tasks)
    write_task_file(targets, paths.target_tasks)
    ppo = config.source_ppo()
    written = []
    for index, task in enumerate(sources):
        policy, value, curve = _train_until_solved(config, task, ppo, seed * 1000 + index)
        written.append(write_weight_file(policy, paths.source_policy(task.task_id)))
        write_weight_file(value, paths.source_value(task.task_id))
        write_curve_csv(curve, paths.source_curve(task.task_id))
    return written


def decompose(config: ExperimentConfig, seed: int) -> Path:
    """Stage 2: greedy trajectories of the source policies and the decomposition summary."""
    paths = run_paths(config, seed)
    sources = read_task_file(paths.source_tasks)
    whole_only = config.mode is SelectionMode.DEC_OPTIONS_WHOLE
    trajectories = []
    entries = []
    for task in sources:
        policy = read_weight_file(paths.source_policy(task.task_id), expect=MlpPolicy)
        task_trajectories = collect_trajectories(policy, task)
        trajectories.extend(task_trajectories)
        count = len(enumerate_subpolicies(policy, task.task_id, whole_only=whole_only))
        entries.append(
            {
                "task_id": task.task_id,
                "weights": f"../source/{task.task_id}.policy.yaml",
                "hidden_width": policy.hidden_sizes[0],
                "subpolicies": count,
                "reached_goal": all(not t.truncated for t in task_trajectories),
            }
        )
    write_trajectories(trajectories, paths.trajectories)
    document = {"whole_only": whole_only, "tasks": entries}
    return write_text(paths.decomposition, dump_yaml(document))


def select(config: ExperimentConfig, seed: int) -> Tuple[Path, Optional[SelectionResult]]:
    """Stage 3: write the option library (selected or random options)."""
    paths = run_paths(config, seed)
    ensure_dir(paths.mode_dir)
    selection = config.selection
    if config.mode is SelectionMode.RANDOM_OPTIONS:
        options = random_options(
            N_PRIMITIVES, selection.random_length, selection.random_count, seed
        )
        return write_option_library(options, paths.options, {}, N_PRIMITIVES), None

    document = read_yaml_file(paths.decomposition)
    trajectories = read_trajectories(paths.trajectories)
    subpolicies = {}
    weight_files = {}
    for entry in document["tasks"]:
        weights = paths.mode_dir / entry["weights"]
        policy = read_weight_file(weights, expect=MlpPolicy)
        subpolicies[entry["task_id"]] = enumerate_subpolicies(
            policy, entry["task_id"], whole_only=bool(document["whole_only"])
        )
        weight_files[entry["task_id"]] = weights
    candidates = generate_candidates(
        subpolicies, trajectories, max_z=selection.max_z, max_pool=selection.max_pool
    )
    result = greedy_select(
        candidates,
        trajectories,
        N_PRIMITIVES,
        exclusion=selection.exclusion,
        validation_tasks=selection.validation_tasks,
        max_options=selection.max_options,
    )
    write_selection_log(result, paths.selection_log)
    path = write_option_library(result.selected, paths.options, weight_files, N_PRIMITIVES)
    logger.info(
        "Seed %d: selected %d options (loss %.6g -> %.6g)",
        seed, len(result.selected), result.baseline_loss, result.final_loss,
    )
    return path, result


def train_target(config: ExperimentConfig, seed: int) -> List[Path]:
    """
    Stage 4: train on every target task with primitives plus the option library.

    After training, one greedy episode of each target policy is traced
    decision by decision into `<task>.trace.csv`.
    """
    paths = run_paths(config, seed)
    targets = read_task_file(paths.target_tasks)
    options = [] if config.mode is SelectionMode.VANILLA else read_option_library(paths.options)
    written = []
    for index, task in enumerate(targets):
        ppo = config.target_ppo(index)
        task_seed = seed * 1000 + 500 + index
        policy, _, curve = train_task(task, config.target.shapes, ppo, task_seed, options)
        write_weight_file(policy, paths.target_policy(task.task_id))
        written.append(write_curve_csv(curve, paths.target_curve(task.task_id)))

        trace = trace_episode(policy, OptionEnv(make_env(task), options, ppo.gamma), task_seed)
        trace.write_csv(paths.target_trace(task.task_id))
        logger.info(
            "Greedy %s episode on %s: %d decisions, return %.2f, %s",
            config.mode.value,
            task.task_id,
            len(trace.rows),
            trace.total_reward,
            "goal reached" if trace.terminal else "truncated",
        )
    return written


STAGES = ("train-source", "decompose", "select", "train-target")


def run_stage(config: ExperimentConfig, stage: str, seed: int) -> Any:
    """
    Run one stage for one seed.

    Raises:
        PipelineError: Wrapping any failure with the stage name and seed
    """
    functions = {
        "train-source": train_source,
        "decompose": decompose,
        "select": select,
        "train-target": train_target,
    }
    if stage not in functions:
        raise ConfigurationError(f"Unknown stage {stage!r}; choose from {STAGES}")
    logger.info("Stage %s started for seed %d (%s)", stage, seed, config.mode.value)
    try:
        result = functions[stage](config, seed)
    except (DecompositionError, OSError, KeyError, TypeError, ValueError) as exc:
        raise PipelineError(stage, seed, exc) from exc
    logger.info("Stage %s finished for seed %d", stage, seed)
    return result


def run_seed(config: ExperimentConfig, seed: int) -> RunPaths:
    """All stages for one seed; vanilla runs skip decomposition and selection."""
    for stage in STAGES:
        if config.mode is SelectionMode.VANILLA and stage in ("decompose", "select"):
            continue
        if config.mode is SelectionMode.RANDOM_OPTIONS and stage == "decompose":
            continue
        run_stage(config, stage, seed)
    return run_paths(config, seed)


def run_pipeline(config: ExperimentConfig) -> List[RunPaths]:
    """
    Run every stage for every seed.

    Seeds run in a process pool when ``config.workers > 1``.
    """
    if config.workers > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(run_seed, config, seed) for seed in config.seeds]
            return [f.result() for f in futures]
    return [run_seed(config, seed) for seed in config.seeds]


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


CI_Z = 1.96
DROP_FRACTION_PERCENT = 20
SUMMARY_COLUMNS = ("env_step", "mean_return", "ci_low", "ci_high", "n_seeds")


@dataclass(eq=False)
class RunSummary:
    """Per-step mean and 95% confidence interval over the retained runs."""

    env_steps: np.ndarray
    mean: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    n_seeds: int
    retained: Tuple[Tuple[int, str], ...] = ()
    dropped: Tuple[Tuple[int, str], ...] = ()
    resampled: bool = False
    curves: Dict[Tuple[int, str], np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.env_steps)


def retained_count(n_runs: int) -> int:
    """Runs kept after dropping the worst 20% (ceil of 80%)."""
    return n_runs - (n_runs * DROP_FRACTION_PERCENT) // 100


def _common_grid(grids: List[np.ndarray]) -> np.ndarray:
    low = max(float(g[0]) for g in grids)
    high = min(float(g[-1]) for g in grids)
    coarsest = min(grids, key=len)
    grid = coarsest[(coarsest >= low) & (coarsest <= high)]
    if len(grid) == 0:
        raise AggregationError("Learning curves do not share any step range")
    return grid


def aggregate_runs(curve_files: Sequence[Union[str, Path]]) -> RunSummary:
    """
    Aggregate learning curves, one run per (seed, task) found in the files.

    The worst 20% of runs by final mean return are dropped before computing
    the mean and the normal-approximation 95% confidence interval. Runs with
    different step grids are interpolated onto the coarsest common grid and
    the summary is flagged as resampled.

    Raises:
        AggregationError: If fewer than two runs are found
    """
    runs: Dict[Tuple[int, str], List[Tuple[int, float]]] = {}
    for path in curve_files:
        try:
            records = read_curve_csv(path)
        except ConfigurationError as exc:
            raise AggregationError(str(exc)) from exc
        for record in records:
            runs.setdefault((record.seed, record.task_id), []).append(
                (record.env_step, record.mean_episode_return)
            )
    runs = {key: points for key, points in runs.items() if points}
    if len(runs) < 2:
        raise AggregationError(f"Aggregation needs at least two runs, found {len(runs)}")

    keys = sorted(runs)
    grids = [np.array([s for s, _ in runs[k]], dtype=np.float64) for k in keys]
    values = [np.array([v for _, v in runs[k]], dtype=np.float64) for k in keys]
    resampled = any(len(g) != len(grids[0]) or not np.array_equal(g, grids[0]) for g in grids)
    if resampled:
        grid = _common_grid(grids)
        values = [np.interp(grid, g, v) for g, v in zip(grids, values)]
        logger.warning(
            "Curves have different step grids; resampled onto %d common steps", len(grid)
        )
    else:
        grid = grids[0]

    matrix = np.vstack(values)
    keep = retained_count(len(keys))
    order = sorted(range(len(keys)), key=lambda i: (matrix[i, -1], keys[i]))
    dropped_idx = sorted(order[: len(keys) - keep])
    kept_idx = sorted(order[len(keys) - keep :])
    kept = matrix[kept_idx]
    mean = kept.mean(axis=0)
    if len(kept_idx) > 1:
        half = CI_Z * kept.std(axis=0, ddof=1) / math.sqrt(len(kept_idx))
    else:
        half = np.zeros_like(mean)
    return RunSummary(
        env_steps=grid,
        mean=mean,
        ci_low=mean - half,
        ci_high=mean + half,
        n_seeds=len(kept_idx),
        retained=tuple(keys[i] for i in kept_idx),
        dropped=tuple(keys[i] for i in dropped_idx),
        resampled=resampled,
        curves={keys[i]: matrix[i] for i in range(len(keys))},
    )


def _format_step(step: float) -> str:
    return str(int(step)) if float(step).is_integer() else repr(float(step))


def export_csv(summary: RunSummary, path: Union[str, Path]) -> Path:
    """
    Write a summary with columns env_step, mean_return, ci_low, ci_high, n_seeds.

    Raises:
        AggregationError: If the summary is empty (no file is written)
    """
    if len(summary) == 0:
        raise AggregationError("Cannot export an empty summary")
    lines = [",".join(SUMMARY_COLUMNS)]
    for i in range(len(summary)):
        lines.append(
            ",".join([
                _format_step(summary.env_steps[i]),
                repr(float(summary.mean[i])),
                repr(float(summary.ci_low[i])),
                repr(float(summary.ci_high[i])),
                str(summary.n_seeds),
            ])
        )
    return write_text(path, "\n".join(lines) + "\n")


def read_summary_csv(path: Union[str, Path]) -> RunSummary:
    """Read a file written by `export_csv`."""
    path = Path(path)
    if not path.is_file():
        raise AggregationError(f"Summary file not found: {path}")
    rows = [line.split(",") for line in path.read_text(encoding="utf-8").splitlines()]
    if not rows or tuple(rows[0]) != SUMMARY_COLUMNS:
        raise AggregationError(f"{path} is not a summary file")
    body = rows[1:]
    return RunSummary(
        env_steps=np.array([float(r[0]) for r in body]),
        mean=np.array([float(r[1]) for r in body]),
        ci_low=np.array([float(r[2]) for r in body]),
        ci_high=np.array([float(r[3]) for r in body]),
        n_seeds=int(body[0][4]) if body else 0,
    )


def area_under_curve(steps: Sequence[float], values: Sequence[float]) -> float:
    """Trapezoidal area under a learning curve."""
    x = np.asarray(steps, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if len(x) < 2:
        return 0.0
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def curve_auc(path: Union[str, Path]) -> float:
    """Area under the learning curve stored in a curve CSV."""
    records = read_curve_csv(path)
    return area_under_curve([r.env_step for r in records], [r.mean_episode_return for r in records])


def target_curve_files(config: ExperimentConfig) -> Dict[str, List[Path]]:
    """Curve files of every target task for every seed, keyed by task id."""
    found: Dict[str, List[Path]] = {}
    for seed in config.seeds:
        paths = run_paths(config, seed)
        if not paths.target_tasks.is_file():
            continue
        for task in read_task_file(paths.target_tasks):
            curve = paths.target_curve(task.task_id)
            if curve.is_file():
                found.setdefault(task.task_id, []).append(curve)
    return found


def aggregate_experiment(config: ExperimentConfig) -> List[Path]:
    """Write ``summary-<mode>-<task>.csv`` for every target task of an experiment."""
    written = []
    for task_id, files in sorted(target_curve_files(config).items()):
        summary = aggregate_runs(files)
        written.append(
            export_csv(summary, config.output_dir / f"summary-{config.mode.value}-{task_id}.csv")
        )
    if not written:
        raise AggregationError(f"No target learning curves found under {config.output_dir}")
    return written


@dataclass(frozen=True)
class PairedComparison:
    """Per-seed AUC of two modes on one target task."""

    task_id: str
    auc_a: Dict[int, float]
    auc_b: Dict[int, float]

    @property
    def seeds(self) -> List[int]:
        return sorted(set(self.auc_a) & set(self.auc_b))

    @property
    def wins(self) -> int:
        """Seeds on which mode A has the strictly larger area."""
        return sum(1 for s in self.seeds if self.auc_a[s] > self.auc_b[s])


def compare_modes(
    config: ExperimentConfig, mode_a: Union[SelectionMode, str], mode_b: Union[SelectionMode, str]
) -> List[PairedComparison]:
    """Paired per-seed AUC comparison of two modes run under the same output directory."""
    config_a = config.with_overrides(mode=mode_a)
    config_b = config.with_overrides(mode=mode_b)
    comparisons = []
    for task_id, files_a in sorted(target_curve_files(config_a).items()):
        files_b = target_curve_files(config_b).get(task_id, [])
        auc_a = {int(p.parent.parent.name.split("-")[-1]): curve_auc(p) for p in files_a}
        auc_b = {int(p.parent.parent.name.split("-")[-1]): curve_auc(p) for p in files_b}
        comparisons.append(PairedComparison(task_id, auc_a, auc_b))
    return comparisons
