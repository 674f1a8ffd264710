"""
Clipped-surrogate policy optimization (PPO) for `MlpPolicy` / `ValueNet`.

Everything is plain numpy: rollouts are collected from a gymnasium
environment, advantages use generalized advantage estimation with the
semi-MDP discount gamma^k (k = primitive steps a decision spanned), and
gradients are backpropagated by hand through the networks.
"""

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import gymnasium as gym
import numpy as np

from .errors import ConfigurationError, NumericError
from .gridworlds import GridSpec, make_env, observation_length
from .neuralnet import (
    Head,
    LayerParams,
    MlpPolicy,
    ValueNet,
    init_params,
    init_value_net,
    log_softmax,
)
from .option_env import OptionEnv
from .utils import ensure_dir

logger = logging.getLogger(__name__)

ADVANTAGE_EPSILON = 1e-8


@dataclass
class PpoConfig:
    """
    Hyperparameters of one training phase.

    `rollout_length` and `minibatch_size` count agent decisions;
    `total_env_steps` counts primitive environment steps.
    """

    learning_rate: float = 0.005
    clip_epsilon: float = 0.2
    entropy_coef: float = 0.05
    gamma: float = 0.99
    gae_lambda: float = 0.95
    rollout_length: int = 2048
    epochs_per_update: int = 10
    minibatch_size: int = 64
    total_env_steps: int = 100_000
    value_loss_coef: float = 0.5
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_grad_norm: Optional[float] = 0.5
    normalize_advantages: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ConfigurationError(f"clip_epsilon must be in (0, 1), got {self.clip_epsilon}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigurationError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        for name in ("rollout_length", "epochs_per_update", "minibatch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.total_env_steps < 0:
            raise ConfigurationError(f"total_env_steps must be >= 0, got {self.total_env_steps}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.minibatch_size > self.rollout_length:
            raise ConfigurationError(
                f"minibatch_size ({self.minibatch_size}) exceeds "
                f"rollout_length ({self.rollout_length})"
            )
        if self.optimizer != "adam":
            raise ConfigurationError(
                f"Unsupported optimizer {self.optimizer!r}; only 'adam' is available"
            )
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigurationError("Adam betas must be in [0, 1)")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ConfigurationError(f"max_grad_norm must be positive, got {self.max_grad_norm}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base: Optional["PpoConfig"] = None) -> "PpoConfig":
        """
        Build a config from a mapping, starting from `base` (or the defaults).

        Raises:
            ConfigurationError: On unknown keys or invalid values
        """
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"Unknown PPO settings: {', '.join(unknown)}")
        values = {f.name: getattr(base, f.name) for f in fields(cls)} if base else {}
        values.update(data)
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class NetShapes:
    """Hidden-layer widths of the policy and value networks."""

    policy_hidden: Tuple[int, ...] = (6,)
    value_hidden: Tuple[int, ...] = (200, 200, 200)
    head: str = Head.SOFTMAX.value

    def __post_init__(self) -> None:
        object.__setattr__(self, "policy_hidden", tuple(int(w) for w in self.policy_hidden))
        object.__setattr__(self, "value_hidden", tuple(int(w) for w in self.value_hidden))
        if not self.policy_hidden or any(w < 1 for w in self.policy_hidden + self.value_hidden):
            raise ConfigurationError(f"Invalid network widths {self}")
        Head(self.head)


# ---------------------------------------------------------------------------
# Rollouts and advantages
# ---------------------------------------------------------------------------


@dataclass
class RolloutCursor:
    """Environment position carried from one rollout to the next."""

    observation: np.ndarray
    episode_return: float = 0.0


@dataclass(eq=False)
class RolloutBuffer:
    """
    Time-ordered decision records of one rollout.

    `next_values` holds the value estimate of the successor observation, 0 for
    terminal transitions; `durations` holds the primitive steps each decision
    spanned. `advantages` and `returns` are filled by `compute_advantages`.
    """

    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    terminals: np.ndarray
    episode_ends: np.ndarray
    durations: np.ndarray
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None
    episode_returns: List[float] = field(default_factory=list)
    env_steps: int = 0
    cursor: Optional[RolloutCursor] = None

    def __len__(self) -> int:
        return len(self.actions)


def collect_rollouts(
    policy: MlpPolicy,
    value: ValueNet,
    env: gym.Env,
    n_steps: int,
    rng: np.random.Generator,
    cursor: Optional[RolloutCursor] = None,
) -> RolloutBuffer:
    """
    Sample `n_steps` decisions from the stochastic policy.

    Episodes are reset automatically on terminal or truncated transitions.
    `info["duration"]` (default 1) gives the primitive steps of a decision
    and `info["undiscounted_reward"]` (default: the reward) is used for
    episode returns. Pass the previous buffer's `cursor` to continue an
    unfinished episode.
    """
    if n_steps < 1:
        raise ConfigurationError(f"n_steps must be >= 1, got {n_steps}")
    if cursor is None:
        obs, _ = env.reset(seed=int(rng.integers(2**31)))
        cursor = RolloutCursor(np.asarray(obs, dtype=np.float64))
    obs = cursor.observation
    episode_return = cursor.episode_return

    observations, next_observations = [], []
    actions, log_probs, rewards, terminals, ends, durations = [], [], [], [], [], []
    episode_returns: List[float] = []
    env_steps = 0
    for _ in range(n_steps):
        log_p = log_softmax(policy.logits(obs))
        action = int(rng.choice(len(log_p), p=np.exp(log_p)))
        next_obs, reward, terminal, truncated, info = env.step(action)
        next_obs = np.asarray(next_obs, dtype=np.float64)
        duration = int(info.get("duration", 1))

        observations.append(obs)
        next_observations.append(next_obs)
        actions.append(action)
        log_probs.append(log_p[action])
        rewards.append(float(reward))
        terminals.append(bool(terminal))
        ends.append(bool(terminal or truncated))
        durations.append(duration)
        env_steps += duration
        episode_return += float(info.get("undiscounted_reward", reward))

        if terminal or truncated:
            episode_returns.append(episode_return)
            episode_return = 0.0
            obs, _ = env.reset()
            obs = np.asarray(obs, dtype=np.float64)
        else:
            obs = next_obs

    obs_arr = np.array(observations)
    terminal_arr = np.array(terminals, dtype=bool)
    next_values = value.predict_batch(np.array(next_observations))
    next_values[terminal_arr] = 0.0
    return RolloutBuffer(
        observations=obs_arr,
        actions=np.array(actions, dtype=np.int64),
        log_probs=np.array(log_probs, dtype=np.float64),
        rewards=np.array(rewards, dtype=np.float64),
        values=value.predict_batch(obs_arr),
        next_values=next_values,
        terminals=terminal_arr,
        episode_ends=np.array(ends, dtype=bool),
        durations=np.array(durations, dtype=np.int64),
        episode_returns=episode_returns,
        env_steps=env_steps,
        cursor=RolloutCursor(obs, episode_return),
    )


def compute_advantages(buffer: RolloutBuffer, gamma: float, lam: float) -> RolloutBuffer:
    """
    Fill `advantages` and `returns` with generalized advantage estimates.

    For a decision spanning k primitive steps the TD residual is
    ``r + gamma^k * next_value - value`` and the trace decays by
    ``gamma^k * lam``. Traces stop at episode boundaries and at the end of the
    buffer.
    """
    discounts = np.power(gamma, buffer.durations.astype(np.float64))
    deltas = buffer.rewards + discounts * buffer.next_values - buffer.values
    advantages = np.zeros_like(deltas)
    running = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        if buffer.episode_ends[t]:
            running = 0.0
        running = deltas[t] + discounts[t] * lam * running
        advantages[t] = running
    buffer.advantages = advantages
    buffer.returns = advantages + buffer.values
    return buffer


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Minibatch:
    observations: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(eq=False)
class GradientSet:
    """Gradients of the loss, one LayerParams per layer of each network."""

    policy: List[LayerParams]
    value: List[LayerParams]

    def arrays(self) -> List[np.ndarray]:
        """Gradient arrays in the order of `policy.parameters() + value.parameters()`."""
        out: List[np.ndarray] = []
        for layer in self.policy + self.value:
            out.extend([layer.weights, layer.biases])
        return out

    def global_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.arrays()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.arrays())


def ppo_loss(
    policy: MlpPolicy,
    value: ValueNet,
    batch: Minibatch,
    config: PpoConfig,
) -> Tuple[float, Dict[str, float], GradientSet]:
    """
    Clipped-surrogate loss and its gradients.

    ``loss = -surrogate + value_loss_coef * value_mse - entropy_coef * entropy``
    where ``surrogate = mean(min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A))``.

    Raises:
        NumericError: If the loss is not finite
    """
    n = len(batch)
    rows = np.arange(n)
    output, policy_cache = policy.forward_batch(batch.observations)
    log_p = log_softmax(policy.output_to_logits(output))
    probs = np.exp(log_p)
    log_p_taken = log_p[rows, batch.actions]
    ratio = np.exp(log_p_taken - batch.old_log_probs)
    adv = batch.advantages
    eps = config.clip_epsilon

    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    surrogate = float(np.mean(np.minimum(unclipped, clipped)))
    entropy_each = -np.sum(probs * log_p, axis=1)
    entropy = float(np.mean(entropy_each))

    v_pred, value_cache = value.forward_batch(batch.observations)
    v_err = v_pred[:, 0] - batch.returns
    value_loss = float(np.mean(v_err**2))
    loss = -surrogate + config.value_loss_coef * value_loss - config.entropy_coef * entropy

    if not math.isfinite(loss):
        raise NumericError(
            "PPO loss is not finite",
            {"surrogate": surrogate, "entropy": entropy, "value_loss": value_loss},
        )

    # dLoss/dlog p(a): the unclipped branch is the active one when it is the minimum
    active = (unclipped <= clipped).astype(np.float64)
    d_log_p_taken = -(active * ratio * adv) / n
    one_hot = np.zeros_like(probs)
    one_hot[rows, batch.actions] = 1.0
    d_logits = d_log_p_taken[:, None] * (one_hot - probs)
    d_logits += (config.entropy_coef / n) * probs * (log_p + entropy_each[:, None])
    policy_grads = policy.backward(policy_cache, policy.logits_to_output_grad(d_logits))

    d_value = (2.0 * config.value_loss_coef / n) * v_err[:, None]
    value_grads = value.backward(value_cache, d_value)

    metrics = {
        "loss": loss,
        "surrogate": surrogate,
        "entropy": entropy,
        "value_loss": value_loss,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
        "approx_kl": float(np.mean(batch.old_log_probs - log_p_taken)),
        "max_ratio_deviation": float(np.max(np.abs(ratio - 1.0))),
    }
    return loss, metrics, GradientSet(policy_grads, value_grads)


class AdamOptimizer:
    """Adaptive-moment optimizer over a fixed list of parameter arrays."""

    def __init__(
        self,
        shapes: Sequence[Tuple[int, ...]],
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self._m = [np.zeros(shape) for shape in shapes]
        self._v = [np.zeros(shape) for shape in shapes]

    @classmethod
    def for_networks(cls, policy: MlpPolicy, value: ValueNet, config: PpoConfig) -> "AdamOptimizer":
        shapes = [p.shape for p in policy.parameters() + value.parameters()]
        return cls(
            shapes,
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_epsilon,
        )

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        """Update `params` in place."""
        if len(params) != len(self._m):
            raise ConfigurationError(
                f"Optimizer tracks {len(self._m)} arrays but got {len(params)}"
            )
        self.step_count += 1
        correction1 = 1.0 - self.beta1**self.step_count
        correction2 = 1.0 - self.beta2**self.step_count
        for param, grad, m, v in zip(params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            step = (m / correction1) / (np.sqrt(v / correction2) + self.epsilon)
            param -= self.learning_rate * step


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    """
    Zero-mean, unit-variance advantages of one minibatch.

    Minibatches with a spread of at most `ADVANTAGE_EPSILON` (including single
    records) are returned unchanged.
    """
    std = float(advantages.std())
    if len(advantages) < 2 or std <= ADVANTAGE_EPSILON:
        return advantages
    return (advantages - advantages.mean()) / (std + ADVANTAGE_EPSILON)


def ppo_update(
    policy: MlpPolicy,
    value: ValueNet,
    buffer: RolloutBuffer,
    config: PpoConfig,
    rng: np.random.Generator,
    optimizer: Optional[AdamOptimizer] = None,
) -> Tuple[MlpPolicy, ValueNet, Dict[str, float]]:
    """
    Run `epochs_per_update` epochs of minibatch updates on a copy of the nets.

    Returns:
        The updated policy and value networks and the metrics averaged over
        all minibatches. The input networks are left untouched.

    Raises:
        ConfigurationError: If advantages are missing or the minibatch is too large
        NumericError: If the loss or gradients become non-finite
    """
    if buffer.advantages is None or buffer.returns is None:
        raise ConfigurationError("compute_advantages() must run before ppo_update()")
    if config.minibatch_size > len(buffer):
        raise ConfigurationError(
            f"minibatch_size ({config.minibatch_size}) exceeds the buffer size ({len(buffer)})"
        )
    policy, value = policy.copy(), value.copy()
    optimizer = optimizer or AdamOptimizer.for_networks(policy, value, config)
    params = policy.parameters() + value.parameters()

    totals: Dict[str, float] = {}
    n_batches = 0
    size = len(buffer)
    for _ in range(config.epochs_per_update):
        order = rng.permutation(size)
        for start in range(0, size, config.minibatch_size):
            idx = order[start : start + config.minibatch_size]
            adv = buffer.advantages[idx]
            if config.normalize_advantages:
                adv = normalize_advantages(adv)
            batch = Minibatch(
                observations=buffer.observations[idx],
                actions=buffer.actions[idx],
                old_log_probs=buffer.log_probs[idx],
                advantages=adv,
                returns=buffer.returns[idx],
            )
            _, metrics, grads = ppo_loss(policy, value, batch, config)
            if not grads.is_finite():
                raise NumericError("PPO gradients are not finite", metrics)
            arrays = grads.arrays()
            norm = grads.global_norm()
            if config.max_grad_norm is not None and norm > config.max_grad_norm:
                arrays = [g * (config.max_grad_norm / norm) for g in arrays]
            optimizer.step(params, arrays)
            metrics["grad_norm"] = norm
            for key, val in metrics.items():
                totals[key] = totals.get(key, 0.0) + val
            n_batches += 1
    averaged = {key: val / n_batches for key, val in totals.items()}
    logger.debug("PPO update: %s", averaged)
    return policy, value, averaged


# ---------------------------------------------------------------------------
# Training loop and learning curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurveRecord:
    """Mean episode return after one trainer update."""

    env_step: int
    mean_episode_return: float
    seed: int
    task_id: str


@dataclass(eq=False)
class TrainResult:
    policy: MlpPolicy
    value: ValueNet
    curve: List[CurveRecord]

    def __iter__(self):
        return iter((self.policy, self.value, self.curve))


def build_networks(
    input_size: int, n_actions: int, net_shapes: NetShapes, seed: int
) -> Tuple[MlpPolicy, ValueNet]:
    """Freshly initialized policy and value networks for a seed."""
    policy_seed, value_seed = (int(s) for s in np.random.SeedSequence(seed).generate_state(2))
    head = Head(net_shapes.head)
    outputs = 1 if head is Head.SIGMOID else n_actions
    policy = init_params(
        (input_size,) + net_shapes.policy_hidden + (outputs,), policy_seed, head=head
    )
    value = init_value_net((input_size,) + net_shapes.value_hidden + (1,), value_seed)
    return policy, value


def train_task(
    task: GridSpec,
    net_shapes: NetShapes,
    config: PpoConfig,
    seed: int,
    options: Optional[Sequence[Any]] = None,
) -> TrainResult:
    """
    Train a policy and value network on one task.

    Args:
        task: Task to train on
        net_shapes: Hidden widths of both networks
        config: PPO hyperparameters; the budget is `total_env_steps` primitive steps
        seed: Seed for initialization, sampling and minibatch order
        options: Optional options; the agent then acts over primitives and options

    Returns:
        TrainResult(policy, value, curve) with one curve record per update.
        With a zero budget the initial networks are returned.
    """
    env: gym.Env = make_env(task)
    if options:
        env = OptionEnv(env, options, gamma=config.gamma)
    n_actions = int(env.action_space.n)
    policy, value = build_networks(observation_length(task), n_actions, net_shapes, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    optimizer = AdamOptimizer.for_networks(policy, value, config)

    curve: List[CurveRecord] = []
    cursor: Optional[RolloutCursor] = None
    last_mean: Optional[float] = None
    env_steps = 0
    while env_steps < config.total_env_steps:
        buffer = collect_rollouts(policy, value, env, config.rollout_length, rng, cursor)
        cursor = buffer.cursor
        compute_advantages(buffer, config.gamma, config.gae_lambda)
        policy, value, metrics = ppo_update(policy, value, buffer, config, rng, optimizer)
        env_steps += buffer.env_steps
        if buffer.episode_returns:
            last_mean = float(np.mean(buffer.episode_returns))
        mean_return = last_mean if last_mean is not None else cursor.episode_return
        curve.append(CurveRecord(env_steps, mean_return, seed, task.task_id))
        logger.debug(
            "task=%s seed=%d step=%d return=%.3f entropy=%.3f",
            task.task_id, seed, env_steps, mean_return, metrics["entropy"],
        )
    logger.info(
        "Finished training on '%s' (seed %d, %d env steps, %d updates)",
        task.task_id, seed, env_steps, len(curve),
    )
    return TrainResult(policy, value, curve)


CURVE_COLUMNS = ("env_step", "mean_episode_return", "seed", "task_id")


def write_curve_csv(records: Sequence[CurveRecord], path: Union[str, Path]) -> Path:
    """Write learning-curve records with a header row."""
    path = Path(path)
    ensure_dir(path.parent)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for r in records:
            writer.writerow([r.env_step, repr(float(r.mean_episode_return)), r.seed, r.task_id])
    return path


def read_curve_csv(path: Union[str, Path]) -> List[CurveRecord]:
    """
    Read learning-curve records written by `write_curve_csv`.

    Raises:
        ConfigurationError: If the file is missing or has the wrong columns
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Curve file not found: {path}")
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if tuple(reader.fieldnames or ()) != CURVE_COLUMNS:
            raise ConfigurationError(f"{path} does not have the columns {CURVE_COLUMNS}")
        return [
            CurveRecord(
                int(row["env_step"]),
                float(row["mean_episode_return"]),
                int(row["seed"]),
                row["task_id"],
            )
            for row in reader
        ]
