"""
Call-and-return execution of options on top of a primitive environment.

The agent's action set becomes A followed by the selected options. A primitive
takes one environment step; an option runs its loop for up to z primitive
steps (stopping early when the episode ends) and is seen by the agent as a
single semi-MDP transition with discounted aggregated reward.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from .errors import ConfigurationError, invalid_action_error
from .utils import ensure_dir

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SmdpTransition:
    """
    Outcome of one agent decision.

    `reward` is sum_k gamma^k r_k over the `duration` primitive steps;
    `undiscounted_reward` is the plain sum.
    """

    observation: np.ndarray
    reward: float
    duration: int
    terminal: bool
    truncated: bool
    undiscounted_reward: float
    primitive_actions: Tuple[int, ...]


def augmented_action_count(n_primitives: int, options: Sequence[Any]) -> int:
    """|A| + |options|."""
    return int(n_primitives) + len(options)


def augmented_step(
    env: gym.Env,
    observation: np.ndarray,
    action: int,
    options: Sequence[Any],
    gamma: float,
    n_primitives: Optional[int] = None,
) -> SmdpTransition:
    """
    Execute a primitive or an option on an environment that is mid-episode.

    Args:
        env: Primitive environment positioned at `observation`
        observation: Current observation (the options' first input)
        action: Index in [0, |A|) for primitives, [|A|, |A| + |options|) for options
        options: Options exposing `z` and `act(observation, iteration)`
        gamma: Discount applied inside an option
        n_primitives: |A|; read from `env.action_space` when omitted

    Raises:
        InvalidActionError: If the action index is out of range
    """
    n_primitives = int(env.action_space.n) if n_primitives is None else n_primitives
    total = augmented_action_count(n_primitives, options)
    if isinstance(action, (bool, np.bool_)) or not isinstance(action, (int, np.integer)):
        raise invalid_action_error(action, total)
    action = int(action)
    if not 0 <= action < total:
        raise invalid_action_error(action, total)

    if action < n_primitives:
        obs, reward, terminal, truncated, _ = env.step(action)
        reward = float(reward)
        return SmdpTransition(
            obs, reward, 1, bool(terminal), bool(truncated), reward, (action,)
        )

    option = options[action - n_primitives]
    obs = observation
    discounted, undiscounted, factor = 0.0, 0.0, 1.0
    taken: List[int] = []
    terminal = truncated = False
    for iteration in range(option.z):
        primitive = int(option.act(obs, iteration))
        obs, reward, terminal, truncated, _ = env.step(primitive)
        taken.append(primitive)
        discounted += factor * float(reward)
        undiscounted += float(reward)
        factor *= gamma
        if terminal or truncated:
            break
    return SmdpTransition(
        obs, discounted, len(taken), bool(terminal), bool(truncated), undiscounted, tuple(taken)
    )


class OptionEnv(gym.Wrapper):
    """
    Wrapper exposing Discrete(|A| + |options|).

    `step` returns the aggregated reward of the decision and sets
    ``info["duration"]``, ``info["undiscounted_reward"]`` and
    ``info["primitive_actions"]``.
    """

    def __init__(self, env: gym.Env, options: Sequence[Any], gamma: float = 0.99):
        super().__init__(env)
        if not isinstance(env.action_space, spaces.Discrete):
            raise ConfigurationError("Options need a discrete primitive action space")
        if not 0.0 < gamma <= 1.0:
            raise ConfigurationError(f"gamma must be in (0, 1], got {gamma}")
        self.options = list(options)
        self.gamma = gamma
        self.n_primitives = int(env.action_space.n)
        self.action_space = spaces.Discrete(augmented_action_count(self.n_primitives, self.options))
        self._observation: Optional[np.ndarray] = None

    def reset(self, **kwargs: Any) -> Tuple[np.ndarray, Dict[str, Any]]:
        obs, info = self.env.reset(**kwargs)
        self._observation = obs
        return obs, info

    def step(self, action: Any) -> Tuple[np.ndarray, float, bool, bool, Dict[str, Any]]:
        if self._observation is None:
            raise ConfigurationError("reset() must be called before step()")
        transition = augmented_step(
            self.env, self._observation, action, self.options, self.gamma, self.n_primitives
        )
        self._observation = transition.observation
        info = {
            "duration": transition.duration,
            "undiscounted_reward": transition.undiscounted_reward,
            "primitive_actions": transition.primitive_actions,
        }
        return (
            transition.observation,
            transition.reward,
            transition.terminal,
            transition.truncated,
            info,
        )


# ---------------------------------------------------------------------------
# Episode traces
# ---------------------------------------------------------------------------


TRACE_COLUMNS = ("decision_index", "action_kind", "action_id", "duration", "reward")


@dataclass(frozen=True)
class TraceRow:
    decision_index: int
    action_kind: str
    action_id: int
    duration: int
    reward: float


@dataclass(eq=False)
class EpisodeTrace:
    """Decision-level log of one episode in an `OptionEnv`."""

    rows: List[TraceRow] = field(default_factory=list)
    primitive_actions: List[int] = field(default_factory=list)
    terminal: bool = False

    @property
    def total_reward(self) -> float:
        return sum(row.reward for row in self.rows)

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        ensure_dir(path.parent)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for row in self.rows:
                writer.writerow(
                    [
                        row.decision_index,
                        row.action_kind,
                        row.action_id,
                        row.duration,
                        repr(row.reward),
                    ]
                )
        return path


def trace_episode(
    policy: Any,
    env: OptionEnv,
    seed: Optional[int] = None,
    options: Optional[Dict[str, Any]] = None,
    max_decisions: Optional[int] = None,
) -> EpisodeTrace:
    """
    Run `policy.greedy_action` in an option environment and record every decision.

    Rewards in the trace are undiscounted.
    """
    obs, _ = env.reset(seed=seed, options=options)
    trace = EpisodeTrace()
    while max_decisions is None or len(trace.rows) < max_decisions:
        action = int(policy.greedy_action(obs))
        obs, _, terminal, truncated, info = env.step(action)
        is_option = action >= env.n_primitives
        trace.rows.append(
            TraceRow(
                decision_index=len(trace.rows),
                action_kind="option" if is_option else "primitive",
                action_id=action - env.n_primitives if is_option else action,
                duration=info["duration"],
                reward=info["undiscounted_reward"],
            )
        )
        trace.primitive_actions.extend(info["primitive_actions"])
        if terminal or truncated:
            trace.terminal = bool(terminal)
            break
    return trace
