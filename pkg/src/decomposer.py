"""
Decomposition of one-hidden-layer ReLU policies.

A network with d hidden ReLU units is a piecewise-linear function: each
hidden unit splits the input space by the hyperplane P.X + v = 0. Fixing the
activation of every unit gives a full binary tree of depth d (the neural
tree) whose leaves hold the composed output-layer linear map.

Clamping only some of the units gives a sub-tree of that tree; every
sub-tree is a policy on its own. Those sub-policies are indexed by an
activation mask with one of {FREE, OFF, ON} per hidden unit, 3^d in total.
"""

import itertools
import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ConfigurationError,
    EnumerationCapError,
    UnsupportedArchitectureError,
    shape_error,
)
from .neuralnet import MlpPolicy, relu, softmax
from .utils import config

logger = logging.getLogger(__name__)


class NeuronState(IntEnum):
    """Clamp state of one hidden unit."""

    FREE = 0
    OFF = 1
    ON = 2


_STATE_CHARS = {NeuronState.FREE: "F", NeuronState.OFF: "0", NeuronState.ON: "1"}
_CHAR_STATES = {char: state for state, char in _STATE_CHARS.items()}


@dataclass(frozen=True)
class ActivationMask:
    """
    One clamp state per hidden unit.

    The text form uses one character per unit: "F" (free), "0" (clamped off)
    and "1" (clamped on), e.g. "F10".
    """

    states: Tuple[NeuronState, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "states", tuple(NeuronState(s) for s in self.states))

    @classmethod
    def all_free(cls, width: int) -> "ActivationMask":
        return cls((NeuronState.FREE,) * width)

    @classmethod
    def from_text(cls, text: str) -> "ActivationMask":
        try:
            return cls(tuple(_CHAR_STATES[char] for char in text))
        except KeyError as exc:
            raise ConfigurationError(
                f"Invalid activation mask {text!r}: use only 'F', '0' and '1'"
            ) from exc

    def to_text(self) -> str:
        return "".join(_STATE_CHARS[s] for s in self.states)

    @property
    def width(self) -> int:
        return len(self.states)

    @property
    def is_all_free(self) -> bool:
        return all(s is NeuronState.FREE for s in self.states)

    @property
    def is_fully_clamped(self) -> bool:
        return all(s is not NeuronState.FREE for s in self.states)

    def as_array(self) -> np.ndarray:
        return np.array([int(s) for s in self.states], dtype=np.int8)

    def __len__(self) -> int:
        return len(self.states)

    def __str__(self) -> str:
        return self.to_text()


def masked_hidden(pre_activations: np.ndarray, states: np.ndarray) -> np.ndarray:
    """
    Hidden-layer output under a mask.

    Unit k outputs 0 when clamped off, its raw pre-activation when clamped on
    and ReLU of it when free. `states` broadcasts against `pre_activations`
    along the last axis.
    """
    return np.where(
        states == NeuronState.FREE,
        relu(pre_activations),
        np.where(states == NeuronState.ON, pre_activations, 0.0),
    )


def _check_decomposable(policy: MlpPolicy) -> None:
    if not policy.is_decomposable:
        raise UnsupportedArchitectureError(
            f"Only networks with exactly one hidden layer can be decomposed; "
            f"got layer sizes {policy.layer_sizes}"
        )


# ---------------------------------------------------------------------------
# Neural trees
# ---------------------------------------------------------------------------


def format_linear(coeffs: Sequence[float], offset: float, variable: str = "x") -> str:
    """
    Human-readable linear form, e.g. ``2x1 + x2 + 1`` or ``-4x1 - 2x2 + 1``.

    Variables are numbered from 1; zero terms are omitted.
    """
    terms: List[Tuple[float, str]] = [
        (float(c), f"{variable}{i + 1}") for i, c in enumerate(coeffs) if c != 0
    ]
    if offset != 0 or not terms:
        terms.append((float(offset), ""))
    text = ""
    for index, (value, name) in enumerate(terms):
        magnitude = abs(value)
        body = f"{magnitude:g}" if not name or magnitude != 1 else ""
        body += name
        if index == 0:
            text = f"-{body}" if value < 0 else body
        else:
            text += f" - {body}" if value < 0 else f" + {body}"
    return text


@dataclass(eq=False)
class NeuralTreeNode:
    """
    Node of a neural tree.

    Internal nodes test ``coeffs . x + offset <= 0`` for hidden unit `neuron`
    and send the input left (unit inactive) or right (unit active). Leaves hold
    the composed output map: the pre-head output is ``leaf_weights @ x +
    leaf_offset``.
    """

    pattern: Tuple[bool, ...]
    neuron: Optional[int] = None
    coeffs: Optional[np.ndarray] = None
    offset: float = 0.0
    left: Optional["NeuralTreeNode"] = None
    right: Optional["NeuralTreeNode"] = None
    leaf_weights: Optional[np.ndarray] = None
    leaf_offset: Optional[np.ndarray] = None

    @property
    def is_leaf(self) -> bool:
        return self.neuron is None

    def routes_left(self, x: np.ndarray) -> bool:
        return float(self.coeffs @ x + self.offset) <= 0.0


@dataclass(eq=False)
class NeuralTree:
    """Full binary tree of depth d equivalent to a one-hidden-layer policy."""

    root: NeuralTreeNode
    depth: int
    input_size: int
    policy: MlpPolicy

    def leaves(self) -> List[NeuralTreeNode]:
        """Leaves from left to right (binary order of the activation pattern)."""
        found: List[NeuralTreeNode] = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                found.append(node)
            else:
                stack.extend([node.right, node.left])
        return found

    def route(self, x: np.ndarray) -> NeuralTreeNode:
        """The leaf reached by an input."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape[0] != self.input_size:
            raise shape_error("tree input", (self.input_size,), x.shape)
        node = self.root
        while not node.is_leaf:
            node = node.left if node.routes_left(x) else node.right
        return node

    def dump(self) -> str:
        """Indented text rendering with linear forms at every node."""
        lines: List[str] = []
        head = "sigmoid" if self.policy.head.value == "sigmoid" else "softmax"

        def visit(node: NeuralTreeNode, indent: int) -> None:
            pad = "  " * indent
            if node.is_leaf:
                forms = ", ".join(
                    format_linear(row, off) for row, off in zip(node.leaf_weights, node.leaf_offset)
                )
                lines.append(f"{pad}leaf {head}({forms})")
                return
            lines.append(f"{pad}if {format_linear(node.coeffs, node.offset)} <= 0:")
            visit(node.left, indent + 1)
            lines.append(f"{pad}else:")
            visit(node.right, indent + 1)

        visit(self.root, 0)
        return "\n".join(lines)


def build_neural_tree(policy: MlpPolicy) -> NeuralTree:
    """
    Build the neural tree of a one-hidden-layer policy.

    Units are tested in index order. A leaf with activation pattern alpha has
    ``leaf_weights = W2 diag(alpha) W1`` and ``leaf_offset = W2 diag(alpha) b1
    + b2``.

    Raises:
        UnsupportedArchitectureError: If the policy does not have exactly one hidden layer
        EnumerationCapError: If the hidden width exceeds ``config.max_tree_depth``
    """
    _check_decomposable(policy)
    hidden, output = policy.layers
    depth = hidden.n_out
    if depth > config.max_tree_depth:
        raise EnumerationCapError(
            f"A tree of depth {depth} exceeds max_tree_depth={config.max_tree_depth}"
        )

    def build(pattern: Tuple[bool, ...]) -> NeuralTreeNode:
        k = len(pattern)
        if k == depth:
            alpha = np.array(pattern, dtype=np.float64)
            scaled = output.weights * alpha
            return NeuralTreeNode(
                pattern=pattern,
                leaf_weights=scaled @ hidden.weights,
                leaf_offset=scaled @ hidden.biases + output.biases,
            )
        return NeuralTreeNode(
            pattern=pattern,
            neuron=k,
            coeffs=hidden.weights[k].copy(),
            offset=float(hidden.biases[k]),
            left=build(pattern + (False,)),
            right=build(pattern + (True,)),
        )

    tree = NeuralTree(root=build(()), depth=depth, input_size=hidden.n_in, policy=policy)
    logger.debug("Built neural tree of depth %d with %d leaves", depth, 2**depth)
    return tree


def tree_forward(tree: NeuralTree, x: np.ndarray) -> np.ndarray:
    """Action distribution computed by walking the tree."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    leaf = tree.route(x)
    output = leaf.leaf_weights @ x + leaf.leaf_offset
    return softmax(tree.policy.output_to_logits(output))


def activation_pattern(policy: MlpPolicy, x: np.ndarray) -> Tuple[bool, ...]:
    """Active/inactive flag per hidden unit; a zero pre-activation is inactive."""
    _check_decomposable(policy)
    hidden = policy.layers[0]
    z = hidden.weights @ np.asarray(x, dtype=np.float64).reshape(-1) + hidden.biases
    return tuple(bool(v > 0.0) for v in z)


# ---------------------------------------------------------------------------
# Sub-policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SubPolicy:
    """A source policy with some hidden units clamped by a mask."""

    policy: MlpPolicy
    mask: ActivationMask
    task_id: str = ""

    def __post_init__(self) -> None:
        _check_decomposable(self.policy)
        width = self.policy.hidden_sizes[0]
        if self.mask.width != width:
            raise shape_error("activation mask", (width,), (self.mask.width,))

    @property
    def input_size(self) -> int:
        return self.policy.input_size

    def logits_batch(self, observations: np.ndarray) -> np.ndarray:
        """Per-action logits for a batch of observations, shape (n, |A|)."""
        x = np.atleast_2d(np.asarray(observations, dtype=np.float64))
        if x.shape[-1] != self.input_size:
            raise shape_error("sub-policy input", (self.input_size,), x.shape[-1:])
        hidden, output = self.policy.layers
        h = masked_hidden(x @ hidden.weights.T + hidden.biases, self.mask.as_array())
        return self.policy.output_to_logits(h @ output.weights.T + output.biases)

    def logits(self, observation: np.ndarray) -> np.ndarray:
        return self.logits_batch(observation)[0]

    def distribution(self, observation: np.ndarray) -> np.ndarray:
        return softmax(self.logits(observation))

    def greedy_action(self, observation: np.ndarray) -> int:
        """argmax of the pre-head output; ties go to the lowest index."""
        return int(np.argmax(self.logits(observation)))

    def greedy_actions(self, observations: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits_batch(observations), axis=-1)

    def act(self, observation: np.ndarray, iteration: int = 0) -> int:
        """Action inside an option loop; a sub-policy ignores the iteration."""
        return self.greedy_action(observation)

    def __repr__(self) -> str:
        return f"SubPolicy(task_id={self.task_id!r}, mask={self.mask.to_text()!r})"


def subpolicy_forward(sub: SubPolicy, x: np.ndarray) -> np.ndarray:
    """Action distribution of a sub-policy at one observation."""
    return sub.distribution(x)


def iter_masks(width: int) -> Iterator[ActivationMask]:
    """All 3^width masks; the first one is all-free."""
    for states in itertools.product(NeuronState, repeat=width):
        yield ActivationMask(states)


def enumerate_subpolicies(
    policy: MlpPolicy,
    task_id: str = "",
    cap: Optional[int] = None,
    whole_only: bool = False,
) -> List[SubPolicy]:
    """
    Every sub-policy of a one-hidden-layer policy.

    Args:
        policy: Source policy
        task_id: Source task recorded on each sub-policy
        cap: Largest hidden width allowed; defaults to ``config.max_enumeration_width``
        whole_only: Return only the all-free mask (the policy itself)

    Returns:
        3^d sub-policies in mask order (all-free first), or one with `whole_only`

    Raises:
        UnsupportedArchitectureError: If the policy does not have exactly one hidden layer
        EnumerationCapError: If the hidden width exceeds the cap
    """
    _check_decomposable(policy)
    width = policy.hidden_sizes[0]
    if whole_only:
        return [SubPolicy(policy, ActivationMask.all_free(width), task_id)]
    cap = config.max_enumeration_width if cap is None else cap
    if width > cap:
        raise EnumerationCapError(
            f"Hidden width {width} exceeds the enumeration cap {cap} ({3**width} masks)"
        )
    subs = [SubPolicy(policy, mask, task_id) for mask in iter_masks(width)]
    logger.info("Enumerated %d sub-policies for task '%s'", len(subs), task_id)
    return subs


def batch_greedy_actions(
    policy: MlpPolicy,
    masks: Sequence[ActivationMask],
    observations: np.ndarray,
    chunk_size: int = 4096,
) -> np.ndarray:
    """
    Greedy actions of many masks of one policy over a batch of observations.

    Returns:
        Integer array of shape (len(masks), n_observations)
    """
    _check_decomposable(policy)
    x = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    if x.shape[-1] != policy.input_size:
        raise shape_error("observation batch", (policy.input_size,), x.shape[-1:])
    hidden, output = policy.layers
    z = x @ hidden.weights.T + hidden.biases
    result = np.empty((len(masks), x.shape[0]), dtype=np.int64)
    for start in range(0, len(masks), chunk_size):
        chunk = np.stack([m.as_array() for m in masks[start : start + chunk_size]])
        h = masked_hidden(z[None, :, :], chunk[:, None, :])
        logits = policy.output_to_logits(h @ output.weights.T + output.biases)
        result[start : start + len(chunk)] = np.argmax(logits, axis=-1)
    return result
