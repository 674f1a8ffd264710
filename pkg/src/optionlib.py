"""
Option candidates, Levin loss and greedy option selection.

An option wraps a sub-policy in a loop of z iterations: started in any state,
it takes the sub-policy's greedy action z times and then terminates. Options
are scored by how many decisions they save when reproducing the greedy
trajectories of the source policies under the uniform policy over primitives
and options (the Levin loss); a greedy search picks the subset with the
smallest total loss.
"""

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .decomposer import ActivationMask, SubPolicy, batch_greedy_actions
from .errors import ConfigurationError
from .gridworlds import GridSpec, make_env
from .neuralnet import MlpPolicy, read_weight_file
from .utils import config, dump_yaml, ensure_dir, log_sum_exp, read_yaml_file, safe_exp, write_text

logger = logging.getLogger(__name__)

OPTION_LIBRARY_FORMAT = "option-library"
TRAJECTORY_FORMAT = "trajectories"
FILE_VERSION = 1


class GreedyActor(Protocol):
    def greedy_action(self, observation: np.ndarray) -> int: ...


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Trajectory:
    """
    Greedy state-action sequence s_0, a_0, ..., s_T, a_T followed by s_{T+1}.

    `observations` has one row per state-action pair; `terminal_observation`
    is the encoding of s_{T+1}.
    """

    observations: np.ndarray
    actions: np.ndarray
    terminal_observation: np.ndarray
    task_id: str = ""
    truncated: bool = False

    def __post_init__(self) -> None:
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=np.float64))
        self.actions = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        self.terminal_observation = np.asarray(self.terminal_observation, dtype=np.float64)
        if len(self.actions) < 1:
            raise ConfigurationError("A trajectory needs at least one state-action pair")
        if len(self.observations) != len(self.actions):
            raise ConfigurationError(
                f"Trajectory has {len(self.observations)} observations "
                f"but {len(self.actions)} actions"
            )

    def __len__(self) -> int:
        """Number of state-action pairs (T + 1)."""
        return len(self.actions)

    @property
    def num_states(self) -> int:
        """States in the sequence including the terminal one (T + 2)."""
        return len(self.actions) + 1


def rollout_greedy(
    policy: GreedyActor,
    task: GridSpec,
    start: Optional[Tuple[int, int]] = None,
    horizon: Optional[int] = None,
) -> Trajectory:
    """
    Run the greedy (argmax) policy on a task.

    The episode ends at a terminal state or at the task's step cap (or
    `horizon` if smaller); in the latter case the trajectory is flagged
    as truncated.
    """
    env = make_env(task)
    obs, _ = env.reset(options={"start": start} if start is not None else None)
    limit = task.max_steps if horizon is None else min(horizon, task.max_steps)
    observations, actions = [], []
    terminal = False
    while True:
        action = int(policy.greedy_action(obs))
        observations.append(obs)
        actions.append(action)
        obs, _, terminal, truncated, _ = env.step(action)
        if terminal or truncated or len(actions) >= limit:
            break
    traj = Trajectory(np.array(observations), np.array(actions), obs, task.task_id, not terminal)
    if traj.truncated:
        logger.warning(
            "Greedy rollout on '%s' did not terminate within %d steps", task.task_id, limit
        )
    return traj


def collect_trajectories(policy: GreedyActor, task: GridSpec) -> List[Trajectory]:
    """One greedy trajectory per start candidate of the task."""
    return [rollout_greedy(policy, task, start) for start in task.starts]


# ---------------------------------------------------------------------------
# Options
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedSequencePolicy:
    """Replays a fixed action sequence regardless of the observation."""

    sequence: Tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "sequence", tuple(int(a) for a in self.sequence))
        if not self.sequence:
            raise ConfigurationError("A fixed action sequence cannot be empty")

    def act(self, observation: np.ndarray, iteration: int = 0) -> int:
        return self.sequence[iteration % len(self.sequence)]

    def greedy_action(self, observation: np.ndarray) -> int:
        return self.sequence[0]


def _match_runs(matches: np.ndarray) -> np.ndarray:
    """run[..., t] = number of consecutive True values starting at t."""
    runs = np.zeros(matches.shape[:-1] + (matches.shape[-1] + 1,), dtype=np.int64)
    for t in range(matches.shape[-1] - 1, -1, -1):
        runs[..., t] = np.where(matches[..., t], runs[..., t + 1] + 1, 0)
    return runs[..., :-1]


@dataclass(frozen=True, eq=False)
class OptionDef:
    """
    Option looping `source` for `z` iterations; applicable in every state.

    `index` is the option's position in its candidate set (or library).
    """

    source: Any
    z: int
    task_id: str = ""
    index: int = 0

    def __post_init__(self) -> None:
        if int(self.z) < 1:
            raise ConfigurationError(f"Option loop length must be >= 1, got {self.z}")
        object.__setattr__(self, "z", int(self.z))

    @property
    def mask(self) -> Optional[ActivationMask]:
        return self.source.mask if isinstance(self.source, SubPolicy) else None

    @property
    def label(self) -> str:
        if isinstance(self.source, SubPolicy):
            return f"{self.task_id}/{self.source.mask.to_text()}/z{self.z}"
        seq = "".join(str(a) for a in self.source.sequence)
        return f"{self.task_id}/seq{seq}/z{self.z}"

    def act(self, observation: np.ndarray, iteration: int) -> int:
        return int(self.source.act(observation, iteration))

    def applicable_starts(self, traj: Trajectory) -> np.ndarray:
        """Boolean array over pair positions j: is the option applicable at s_j."""
        n = len(traj)
        if isinstance(self.source, FixedSequencePolicy):
            expected = np.array([self.source.act(None, k) for k in range(self.z)])
            out = np.zeros(n, dtype=bool)
            for j in range(n - self.z + 1):
                out[j] = np.array_equal(traj.actions[j : j + self.z], expected)
            return out
        if isinstance(self.source, SubPolicy):
            greedy = self.source.greedy_actions(traj.observations)
        else:
            greedy = np.array([self.source.act(obs, 0) for obs in traj.observations])
        return _match_runs(greedy == traj.actions) >= self.z

    def __repr__(self) -> str:
        return f"OptionDef({self.label!r}, index={self.index})"


def is_applicable(option: OptionDef, traj: Trajectory, j: int) -> bool:
    """
    True iff the option, started at s_j, reproduces the trajectory's next z actions.

    Positions past the end of the sequence (j + z > T + 1) are never applicable.
    """
    if j < 0 or j + option.z > len(traj):
        return False
    return all(
        option.act(traj.observations[j + k], k) == int(traj.actions[j + k])
        for k in range(option.z)
    )


@dataclass(eq=False)
class CandidateSet:
    """Every (sub-policy, z) pair for z in 1..t_max, grouped by source task."""

    options: List[OptionDef]
    t_max: int
    per_task: Dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.options)

    def __iter__(self):
        return iter(self.options)

    def for_task(self, task_id: str) -> List[OptionDef]:
        return [o for o in self.options if o.task_id == task_id]


def generate_candidates(
    subpolicies: Mapping[str, Sequence[SubPolicy]],
    trajectories: Sequence[Trajectory],
    max_z: Optional[int] = None,
    max_pool: Optional[int] = None,
) -> CandidateSet:
    """
    Build the candidate pool.

    T_max is the largest number of state-action pairs among `trajectories`.
    `max_z` caps the loop length and `max_pool` the total candidate count
    (first candidates kept); both are off by default.

    Raises:
        ConfigurationError: If there are no trajectories or no sub-policies
    """
    if not trajectories:
        raise ConfigurationError("Candidate generation needs at least one trajectory")
    if not subpolicies or not any(subpolicies.values()):
        raise ConfigurationError("Candidate generation needs at least one sub-policy")
    t_max = max(len(t) for t in trajectories)
    z_limit = t_max if max_z is None else min(t_max, max_z)
    options: List[OptionDef] = []
    per_task: Dict[str, int] = {}
    for task_id, subs in subpolicies.items():
        for sub in subs:
            for z in range(1, z_limit + 1):
                if max_pool is not None and len(options) >= max_pool:
                    break
                options.append(OptionDef(sub, z, task_id, len(options)))
                per_task[task_id] = per_task.get(task_id, 0) + 1
    logger.info("Generated %d option candidates (T_max=%d)", len(options), t_max)
    return CandidateSet(options, t_max, per_task)


def random_options(n_primitives: int, length: int, count: int, seed: int) -> List[OptionDef]:
    """
    `count` options, each replaying a random primitive sequence of `length` actions.
    """
    if length < 1 or count < 1 or n_primitives < 1:
        raise ConfigurationError(
            f"random_options needs positive sizes, got length={length}, count={count}"
        )
    rng = np.random.default_rng(seed)
    return [
        OptionDef(
            FixedSequencePolicy(tuple(rng.integers(n_primitives, size=length).tolist())),
            length,
            "random",
            index,
        )
        for index in range(count)
    ]


# ---------------------------------------------------------------------------
# Levin loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LevinLoss:
    """Loss value, its natural log and the final decision table M."""

    loss: float
    log_loss: float
    table: np.ndarray

    @property
    def decisions(self) -> int:
        return int(self.table[-1])


def min_decisions(n_pairs: int, jumps: Iterable[Tuple[np.ndarray, int]]) -> np.ndarray:
    """
    Decision table of a sequence with `n_pairs` actions.

    M[j] is the least number of decisions reaching s_j when a primitive
    advances one state and an option applicable at s_j advances z states.
    `jumps` holds (applicable-start mask, z) pairs.
    """
    jumps = [(np.asarray(starts, dtype=bool), int(z)) for starts, z in jumps]
    table = np.arange(n_pairs + 1, dtype=np.int64)
    for j in range(n_pairs + 1):
        if j > 0 and table[j - 1] + 1 < table[j]:
            table[j] = table[j - 1] + 1
        for starts, z in jumps:
            if j < len(starts) and starts[j] and j + z <= n_pairs and table[j] + 1 < table[j + z]:
                table[j + z] = table[j] + 1
    return table


def _levin_from_table(num_states: int, p: float, table: np.ndarray) -> LevinLoss:
    log_loss = math.log(num_states) - float(table[-1]) * math.log(p)
    return LevinLoss(safe_exp(log_loss), log_loss, table)


def compute_loss(traj: Trajectory, p: float, options: Iterable[OptionDef]) -> LevinLoss:
    """
    Levin loss of a trajectory under the uniform policy with probability `p`.

    Returns ``num_states * p ** -M[T+1]`` where `num_states` counts s_0 through
    s_{T+1}. The log value is exact even when the loss overflows.

    Raises:
        ConfigurationError: If p is not in (0, 1]
    """
    if not 0.0 < p <= 1.0:
        raise ConfigurationError(f"Probability must be in (0, 1], got {p}")
    table = min_decisions(len(traj), [(o.applicable_starts(traj), o.z) for o in options])
    return _levin_from_table(traj.num_states, p, table)


# ---------------------------------------------------------------------------
# Greedy selection
# ---------------------------------------------------------------------------


class ExclusionPolicy(str, Enum):
    """Which (option, trajectory) pairs are scored together."""

    LEAVE_OWN_TASK_OUT = "leave-own-task-out"
    TRAIN_VALIDATION = "train-validation"
    NONE = "none"


@dataclass(frozen=True)
class SelectionLogEntry:
    iteration: int
    candidate_index: int
    label: str
    z: int
    source_task: str
    total_loss: float
    log_total_loss: float
    scored_tasks: Tuple[str, ...]


@dataclass(eq=False)
class SelectionResult:
    """Options in acceptance order with the total loss after each acceptance."""

    selected: List[OptionDef]
    losses: List[float]
    log_losses: List[float]
    final_loss: float
    baseline_loss: float
    log: List[SelectionLogEntry] = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not self.selected


def _scores_on(
    option_task: str,
    traj_task: str,
    exclusion: ExclusionPolicy,
    validation: frozenset,
) -> bool:
    if exclusion is ExclusionPolicy.LEAVE_OWN_TASK_OUT:
        return option_task != traj_task
    if exclusion is ExclusionPolicy.TRAIN_VALIDATION:
        return traj_task in validation and option_task not in validation
    return True


def _applicability(
    candidates: Sequence[OptionDef], trajectories: Sequence[Trajectory]
) -> List[List[np.ndarray]]:
    """Run-length arrays per (candidate source, trajectory), batched per policy."""
    runs_by_source: Dict[int, List[np.ndarray]] = {}
    by_policy: Dict[int, Tuple[MlpPolicy, List[SubPolicy]]] = {}
    seen: set = set()
    for option in candidates:
        src = option.source
        if isinstance(src, SubPolicy) and id(src) not in seen:
            seen.add(id(src))
            by_policy.setdefault(id(src.policy), (src.policy, []))[1].append(src)
    for policy, subs in by_policy.values():
        masks = [s.mask for s in subs]
        per_traj = []
        for traj in trajectories:
            greedy = batch_greedy_actions(policy, masks, traj.observations)
            per_traj.append(_match_runs(greedy == traj.actions[None, :]))
        for row, sub in enumerate(subs):
            runs_by_source[id(sub)] = [runs[row] for runs in per_traj]

    result = []
    for option in candidates:
        if id(option.source) in runs_by_source:
            result.append([runs >= option.z for runs in runs_by_source[id(option.source)]])
        else:
            result.append([option.applicable_starts(traj) for traj in trajectories])
    return result


def greedy_select(
    candidates: Union[CandidateSet, Sequence[OptionDef]],
    trajectories: Sequence[Trajectory],
    n_primitives: int,
    exclusion: Union[ExclusionPolicy, str] = ExclusionPolicy.LEAVE_OWN_TASK_OUT,
    validation_tasks: Iterable[str] = (),
    max_options: Optional[int] = None,
) -> SelectionResult:
    """
    Greedily select options minimizing the total Levin loss.

    Each round scores every remaining candidate with p = 1 / (|A| + |selected| + 1)
    and accepts the best one if it strictly lowers the current total loss
    (computed with p = 1 / (|A| + |selected|)). Ties go to the smaller z, then
    to the smaller candidate index. An option is only applied on the
    trajectories the exclusion policy lets it be scored on, but every
    selected option counts towards the probability denominator.

    Raises:
        ConfigurationError: If candidates or trajectories are empty
    """
    options = list(candidates)
    if not options or not trajectories:
        raise ConfigurationError("greedy_select needs candidates and trajectories")
    if n_primitives < 1:
        raise ConfigurationError(f"n_primitives must be >= 1, got {n_primitives}")
    exclusion = ExclusionPolicy(exclusion)
    validation = frozenset(validation_tasks)
    if exclusion is ExclusionPolicy.TRAIN_VALIDATION and not validation:
        raise ConfigurationError("The train-validation exclusion needs validation task ids")

    starts = _applicability(options, trajectories)
    allowed = [
        [_scores_on(o.task_id, t.task_id, exclusion, validation) for t in trajectories]
        for o in options
    ]

    # Candidates with identical applicability and scoring pattern behave identically.
    groups: Dict[Tuple, int] = {}
    for index, option in enumerate(options):
        if not any(s.any() and ok for s, ok in zip(starts[index], allowed[index])):
            continue
        key = (option.z,) + tuple(
            s.tobytes() if ok else b"" for s, ok in zip(starts[index], allowed[index])
        )
        groups.setdefault(key, index)
    representatives = sorted(groups.values(), key=lambda i: (options[i].z, i))
    logger.info(
        "Scoring %d distinct candidates out of %d on %d trajectories",
        len(representatives), len(options), len(trajectories),
    )

    selected_jumps: List[List[Tuple[np.ndarray, int]]] = [[] for _ in trajectories]
    tables = [min_decisions(len(t), []) for t in trajectories]

    def total(candidate: Optional[int], p: float) -> float:
        logs = []
        for ti, traj in enumerate(trajectories):
            table = tables[ti]
            if candidate is not None and allowed[candidate][ti] and starts[candidate][ti].any():
                jumps = selected_jumps[ti] + [(starts[candidate][ti], options[candidate].z)]
                table = min_decisions(len(traj), jumps)
            logs.append(_levin_from_table(traj.num_states, p, table).log_loss)
        return log_sum_exp(logs)

    baseline_log = total(None, 1.0 / n_primitives)
    current_log = baseline_log
    selected: List[OptionDef] = []
    losses: List[float] = []
    log_losses: List[float] = []
    entries: List[SelectionLogEntry] = []
    chosen: set = set()

    while max_options is None or len(selected) < max_options:
        p = 1.0 / (n_primitives + len(selected) + 1)
        best: Optional[Tuple[float, int, int]] = None
        for index in representatives:
            if index in chosen:
                continue
            key = (total(index, p), options[index].z, index)
            if best is None or key < best:
                best = key
        if best is None or not best[0] < current_log - config.epsilon:
            break
        log_value, _, index = best
        option = options[index]
        chosen.add(index)
        selected.append(option)
        selected_jumps = [
            jumps + [(s, option.z)] if ok else jumps
            for jumps, s, ok in zip(selected_jumps, starts[index], allowed[index])
        ]
        tables = [min_decisions(len(t), jumps) for t, jumps in zip(trajectories, selected_jumps)]
        current_log = log_value
        losses.append(safe_exp(log_value))
        log_losses.append(log_value)
        scored = tuple(t.task_id for t, ok in zip(trajectories, allowed[index]) if ok)
        entries.append(
            SelectionLogEntry(
                len(selected), index, option.label, option.z, option.task_id,
                losses[-1], log_value, scored,
            )
        )
        logger.info("Accepted option %s (total loss %.6g)", option.label, losses[-1])

    return SelectionResult(
        selected=selected,
        losses=losses,
        log_losses=log_losses,
        final_loss=safe_exp(current_log),
        baseline_loss=safe_exp(baseline_log),
        log=entries,
    )


SELECTION_LOG_COLUMNS = (
    "iteration",
    "accepted_candidate_id",
    "total_loss",
    "label",
    "z",
    "source_task",
    "scored_tasks",
)


def write_selection_log(result: SelectionResult, path: Union[str, Path]) -> Path:
    """CSV with one row per accepted option."""
    path = Path(path)
    ensure_dir(path.parent)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SELECTION_LOG_COLUMNS)
        for e in result.log:
            writer.writerow(
                [e.iteration, e.candidate_index, repr(e.total_loss), e.label, e.z,
                 e.source_task, "|".join(e.scored_tasks)]
            )
    return path


def read_selection_log(path: Union[str, Path]) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Selection log not found: {path}")
    with path.open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def trajectory_to_dict(traj: Trajectory) -> Dict[str, Any]:
    return {
        "task_id": traj.task_id,
        "truncated": bool(traj.truncated),
        "actions": traj.actions.tolist(),
        "observations": traj.observations.tolist(),
        "terminal_observation": traj.terminal_observation.tolist(),
    }


def write_trajectories(trajectories: Iterable[Trajectory], path: Union[str, Path]) -> Path:
    document = {
        "format": TRAJECTORY_FORMAT,
        "version": FILE_VERSION,
        "trajectories": [trajectory_to_dict(t) for t in trajectories],
    }
    return write_text(path, dump_yaml(document))


def read_trajectories(path: Union[str, Path]) -> List[Trajectory]:
    """
    Raises:
        ConfigurationError: If the file is missing or malformed
    """
    document = read_yaml_file(path)
    if not isinstance(document, dict) or document.get("format") != TRAJECTORY_FORMAT:
        raise ConfigurationError(f"{path} is not a trajectory file")
    try:
        return [
            Trajectory(
                observations=np.array(item["observations"], dtype=np.float64),
                actions=np.array(item["actions"], dtype=np.int64),
                terminal_observation=np.array(item["terminal_observation"], dtype=np.float64),
                task_id=str(item["task_id"]),
                truncated=bool(item.get("truncated", False)),
            )
            for item in document.get("trajectories", [])
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"Malformed trajectory in {path}: {exc}") from exc


def write_option_library(
    options: Sequence[OptionDef],
    path: Union[str, Path],
    weight_files: Mapping[str, Union[str, Path]],
    n_primitives: int,
) -> Path:
    """
    Write an option library.

    Sub-policy options reference their source policy through
    `weight_files[task_id]`, stored relative to the library's directory.
    """
    path = Path(path)
    entries = []
    for option in options:
        entry: Dict[str, Any] = {"task_id": option.task_id, "z": option.z, "index": option.index}
        if isinstance(option.source, SubPolicy):
            if option.task_id not in weight_files:
                raise ConfigurationError(f"No weight file given for task '{option.task_id}'")
            weights = Path(weight_files[option.task_id]).resolve()
            try:
                weights = Path(os.path.relpath(weights, path.parent.resolve()))
            except ValueError:
                pass  # different drive
            entry.update(
                kind="subpolicy", mask=option.source.mask.to_text(), weights=weights.as_posix()
            )
        else:
            entry.update(kind="sequence", sequence=list(option.source.sequence))
        entries.append(entry)
    document = {
        "format": OPTION_LIBRARY_FORMAT,
        "version": FILE_VERSION,
        "n_primitives": int(n_primitives),
        "options": entries,
    }
    return write_text(path, dump_yaml(document))


def read_option_library(path: Union[str, Path]) -> List[OptionDef]:
    """
    Load an option library, restoring sub-policies from their weight files.

    Raises:
        ConfigurationError: If the library is malformed
        WeightFileError: If a referenced weight file cannot be read
    """
    path = Path(path)
    document = read_yaml_file(path)
    if not isinstance(document, dict) or document.get("format") != OPTION_LIBRARY_FORMAT:
        raise ConfigurationError(f"{path} is not an option library")
    if document.get("version") != FILE_VERSION:
        raise ConfigurationError(f"Unsupported option library version {document.get('version')!r}")
    policies: Dict[str, MlpPolicy] = {}
    options = []
    for entry in document.get("options") or []:
        try:
            kind, z, task_id = entry["kind"], int(entry["z"]), str(entry["task_id"])
            if kind == "subpolicy":
                ref = Path(entry["weights"])
                weights = ref if ref.is_absolute() else path.parent / ref
                key = str(weights)
                if key not in policies:
                    policies[key] = read_weight_file(weights, expect=MlpPolicy)
                mask = ActivationMask.from_text(entry["mask"])
                source: Any = SubPolicy(policies[key], mask, task_id)
            elif kind == "sequence":
                source = FixedSequencePolicy(tuple(entry["sequence"]))
            else:
                raise ConfigurationError(f"Unknown option kind {kind!r}")
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"Malformed option entry in {path}: {exc}") from exc
        options.append(OptionDef(source, z, task_id, int(entry.get("index", len(options)))))
    return options
