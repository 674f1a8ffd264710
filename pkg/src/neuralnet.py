"""
Small fully connected networks with ReLU hidden layers.

`MlpPolicy` produces a categorical action distribution (softmax head, or a
sigmoid head for two actions); `ValueNet` produces a scalar. Both support a
batched forward pass that keeps the intermediate values needed by the manual
backward pass used in training.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type, TypeVar, Union

import numpy as np
import yaml

from .errors import (
    ConfigurationError,
    NumericError,
    ShapeError,
    WeightFileParseError,
    WeightFileSchemaError,
    shape_error,
)
from .utils import config, dump_yaml, write_text

logger = logging.getLogger(__name__)

WEIGHT_FILE_FORMAT = "option-decomposition-weights"
WEIGHT_FILE_VERSION = 1


class Head(str, Enum):
    """Output activation of a policy network."""

    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, stabilized by subtracting the maximum."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def sigmoid(z: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Logistic function, stable for large |z|."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


@dataclass(frozen=True, eq=False)
class LayerParams:
    """
    Parameters between two consecutive layers.

    Attributes:
        weights: Matrix of shape (n_out, n_in)
        biases: Vector of shape (n_out,)
    """

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self) -> None:
        weights = np.array(self.weights, dtype=np.float64)
        biases = np.array(self.biases, dtype=np.float64).reshape(-1)
        if weights.ndim != 2:
            raise ShapeError(f"Layer weights must be a matrix, got {weights.ndim} dimensions")
        if biases.shape != (weights.shape[0],):
            raise shape_error("layer biases", (weights.shape[0],), biases.shape)
        if config.strict_validation and not (
            np.all(np.isfinite(weights)) and np.all(np.isfinite(biases))
        ):
            raise NumericError("Layer parameters contain non-finite values")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.biases.copy())


ForwardCache = List[np.ndarray]
NetT = TypeVar("NetT", bound="Mlp")


class Mlp:
    """
    Fully connected network with ReLU on every hidden layer and a linear output.

    Subclasses decide how the linear output is interpreted.
    """

    def __init__(self, layers: Sequence[LayerParams]):
        layers = tuple(layers)
        if not layers:
            raise ShapeError("A network needs at least one layer")
        for index in range(1, len(layers)):
            if layers[index].n_in != layers[index - 1].n_out:
                raise ShapeError(
                    f"Layer {index} expects {layers[index].n_in} inputs but layer "
                    f"{index - 1} produces {layers[index - 1].n_out}"
                )
        self._layers = layers

    @property
    def layers(self) -> Tuple[LayerParams, ...]:
        return self._layers

    @property
    def layer_sizes(self) -> Tuple[int, ...]:
        """Widths of every layer, input first."""
        return (self._layers[0].n_in,) + tuple(layer.n_out for layer in self._layers)

    @property
    def input_size(self) -> int:
        return self._layers[0].n_in

    @property
    def output_size(self) -> int:
        return self._layers[-1].n_out

    @property
    def hidden_sizes(self) -> Tuple[int, ...]:
        return self.layer_sizes[1:-1]

    @property
    def num_parameters(self) -> int:
        return sum(layer.weights.size + layer.biases.size for layer in self._layers)

    def parameters(self) -> List[np.ndarray]:
        """Parameter arrays in a fixed order (W0, b0, W1, b1, ...); views, not copies."""
        params: List[np.ndarray] = []
        for layer in self._layers:
            params.extend([layer.weights, layer.biases])
        return params

    def with_layers(self: NetT, layers: Sequence[LayerParams]) -> NetT:
        """A network of the same kind with other parameters."""
        return type(self)(layers)

    def copy(self: NetT) -> NetT:
        return self.with_layers([layer.copy() for layer in self._layers])

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_size:
            raise shape_error("network input", (self.input_size,), x.shape[-1:])
        return x

    def forward_batch(self, inputs: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
        """
        Forward a batch of inputs.

        Args:
            inputs: Array of shape (n, input_size)

        Returns:
            The linear output (n, output_size) and the cache
            [A^1, Z^2, A^2, ..., Z^m] needed by `backward`.
        """
        activation = self._check_input(np.atleast_2d(inputs))
        cache: ForwardCache = [activation]
        for index, layer in enumerate(self._layers):
            z = activation @ layer.weights.T + layer.biases
            if index == len(self._layers) - 1:
                cache.append(z)
                return z, cache
            activation = relu(z)
            cache.extend([z, activation])
        raise AssertionError("unreachable")

    def backward(self, cache: ForwardCache, d_output: np.ndarray) -> List[LayerParams]:
        """
        Backpropagate a gradient of the linear output.

        Args:
            cache: Cache from `forward_batch`
            d_output: dLoss/dOutput of shape (n, output_size)

        Returns:
            One LayerParams of gradients per layer
        """
        grads: List[LayerParams] = []
        delta = np.asarray(d_output, dtype=np.float64)
        for index in range(len(self._layers) - 1, -1, -1):
            layer = self._layers[index]
            a_prev = cache[2 * index]
            grad_w = delta.T @ a_prev
            grad_b = delta.sum(axis=0)
            grads.append(_unchecked_layer(grad_w, grad_b))
            if index > 0:
                z_prev = cache[2 * index - 1]
                delta = (delta @ layer.weights) * (z_prev > 0.0)
        grads.reverse()
        return grads

    def __repr__(self) -> str:
        return f"{type(self).__name__}(layer_sizes={self.layer_sizes})"


def _unchecked_layer(weights: np.ndarray, biases: np.ndarray) -> LayerParams:
    layer = object.__new__(LayerParams)
    object.__setattr__(layer, "weights", weights)
    object.__setattr__(layer, "biases", biases)
    return layer


class MlpPolicy(Mlp):
    """
    Policy network over a discrete action set.

    With a softmax head the output layer has one logit per action. A sigmoid
    head has a single output z giving P(action 1) = sigmoid(z); it is exposed to
    the rest of the library as the two logits [0, z], which yield the same
    distribution.
    """

    def __init__(self, layers: Sequence[LayerParams], head: Union[Head, str] = Head.SOFTMAX):
        super().__init__(layers)
        self._head = Head(head)
        if self._head is Head.SIGMOID and self.output_size != 1:
            raise ShapeError(
                f"A sigmoid head needs exactly one output, got {self.output_size}"
            )

    @property
    def head(self) -> Head:
        return self._head

    @property
    def n_actions(self) -> int:
        return 2 if self._head is Head.SIGMOID else self.output_size

    @property
    def is_decomposable(self) -> bool:
        """True iff the network has exactly one hidden layer."""
        return len(self._layers) == 2

    def with_layers(self, layers: Sequence[LayerParams]) -> "MlpPolicy":
        return MlpPolicy(layers, head=self._head)

    def output_to_logits(self, output: np.ndarray) -> np.ndarray:
        """Map the linear network output to per-action logits."""
        if self._head is Head.SIGMOID:
            return np.concatenate([np.zeros_like(output), output], axis=-1)
        return output

    def logits_to_output_grad(self, d_logits: np.ndarray) -> np.ndarray:
        """Pull a gradient on the per-action logits back to the linear output."""
        if self._head is Head.SIGMOID:
            return d_logits[..., 1:]
        return d_logits

    def logits_batch(self, observations: np.ndarray) -> np.ndarray:
        output, _ = self.forward_batch(observations)
        return self.output_to_logits(output)

    def logits(self, observation: np.ndarray) -> np.ndarray:
        return self.logits_batch(observation)[0]

    def distribution(self, observation: np.ndarray) -> np.ndarray:
        """Action probabilities for one observation."""
        return softmax(self.logits(observation))

    def greedy_action(self, observation: np.ndarray) -> int:
        """argmax action; ties go to the lowest index."""
        return int(np.argmax(self.logits(observation)))


class ValueNet(Mlp):
    """State-value network with a single linear output."""

    def __init__(self, layers: Sequence[LayerParams]):
        super().__init__(layers)
        if self.output_size != 1:
            raise ShapeError(f"A value network needs one output, got {self.output_size}")

    def predict_batch(self, observations: np.ndarray) -> np.ndarray:
        output, _ = self.forward_batch(observations)
        return output[:, 0]

    def predict(self, observation: np.ndarray) -> float:
        return float(self.predict_batch(observation)[0])


def policy_forward(policy: MlpPolicy, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Evaluate a policy on one observation.

    Returns:
        The action distribution and the pre-activations of the first hidden
        layer (Z^2).

    Raises:
        ShapeError: If the observation length does not match the network
        NumericError: If a parameter or the result is non-finite
    """
    for param in policy.parameters():
        if not np.all(np.isfinite(param)):
            raise NumericError("Policy parameters contain non-finite values")
    output, cache = policy.forward_batch(np.asarray(x, dtype=np.float64).reshape(1, -1))
    probs = softmax(policy.output_to_logits(output))[0]
    hidden = cache[1][0] if len(cache) > 2 else np.zeros(0)
    return probs, hidden


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


class InitScheme(str, Enum):
    ORTHOGONAL = "orthogonal"
    ZERO = "zero"


def _orthogonal(rng: np.random.Generator, n_out: int, n_in: int, gain: float) -> np.ndarray:
    flat = rng.standard_normal((max(n_out, n_in), min(n_out, n_in)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if n_out < n_in:
        q = q.T
    return gain * q[:n_out, :n_in]


def _init_layers(
    shape: Sequence[int],
    seed: int,
    scheme: Union[InitScheme, str],
    output_scale: float,
) -> List[LayerParams]:
    shape = [int(width) for width in shape]
    if len(shape) < 2 or any(width < 1 for width in shape):
        raise ConfigurationError(f"Invalid network shape {shape}")
    scheme = InitScheme(scheme)
    rng = np.random.default_rng(seed)
    layers = []
    for index, (n_in, n_out) in enumerate(zip(shape[:-1], shape[1:])):
        if scheme is InitScheme.ZERO:
            weights = np.zeros((n_out, n_in))
        else:
            is_output = index == len(shape) - 2
            gain = output_scale if is_output else math.sqrt(2.0)
            weights = _orthogonal(rng, n_out, n_in, gain)
        layers.append(LayerParams(weights, np.zeros(n_out)))
    return layers


def init_params(
    shape: Sequence[int],
    seed: int,
    scheme: Union[InitScheme, str] = InitScheme.ORTHOGONAL,
    head: Union[Head, str] = Head.SOFTMAX,
    output_scale: float = 0.01,
) -> MlpPolicy:
    """
    Initialize a policy network.

    Args:
        shape: Layer widths, input first and output last
        seed: Seed of the generator; equal seeds give equal parameters
        scheme: "orthogonal" (gain sqrt(2) on hidden layers, `output_scale`
            on the output layer, zero biases) or "zero"
        head: Output head
        output_scale: Gain of the output layer; the default keeps the initial
            policy close to uniform

    Returns:
        A new MlpPolicy
    """
    return MlpPolicy(_init_layers(shape, seed, scheme, output_scale), head=head)


def init_value_net(shape: Sequence[int], seed: int) -> ValueNet:
    """Initialize a value network (orthogonal, unit output gain)."""
    return ValueNet(_init_layers(shape, seed, InitScheme.ORTHOGONAL, 1.0))


# ---------------------------------------------------------------------------
# Weight files
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WeightFile:
    """
    Portable, versioned text form of a network.

    Attributes:
        kind: "policy" or "value"
        head: Head name for policies, None for value networks
        layer_sizes: Widths of every layer, input first
        weights: Row-major weight matrices as nested lists
        biases: Bias vectors as lists
        version: Format version
    """

    kind: str
    head: Optional[str]
    layer_sizes: Tuple[int, ...]
    weights: Tuple[list, ...]
    biases: Tuple[list, ...]
    version: int = WEIGHT_FILE_VERSION

    def to_text(self) -> str:
        """YAML text; floats use the shortest repr that reads back bit-exactly."""
        document: Dict[str, Any] = {
            "format": WEIGHT_FILE_FORMAT,
            "version": self.version,
            "kind": self.kind,
            "head": self.head,
            "layer_sizes": list(self.layer_sizes),
            "layers": [
                {"weights": weights, "biases": biases}
                for weights, biases in zip(self.weights, self.biases)
            ],
        }
        return dump_yaml(document)

    @classmethod
    def from_text(cls, text: str) -> "WeightFile":
        """
        Parse weight-file text.

        Raises:
            WeightFileParseError: If the text is not well-formed
            WeightFileSchemaError: If the document is inconsistent
        """
        try:
            document = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = mark.line + 1 if mark is not None else None
            column = mark.column + 1 if mark is not None else None
            raise WeightFileParseError("Malformed weight file", line, column) from exc
        if not isinstance(document, dict):
            raise WeightFileParseError("Weight file does not contain a mapping")
        if document.get("format") != WEIGHT_FILE_FORMAT:
            raise WeightFileSchemaError(f"Unknown weight file format {document.get('format')!r}")
        if document.get("version") != WEIGHT_FILE_VERSION:
            raise WeightFileSchemaError(
                f"Unsupported weight file version {document.get('version')!r}; "
                f"expected {WEIGHT_FILE_VERSION}"
            )
        kind = document.get("kind")
        if kind not in ("policy", "value"):
            raise WeightFileSchemaError(f"Unknown network kind {kind!r}")
        sizes = document.get("layer_sizes")
        layers = document.get("layers")
        if not isinstance(sizes, list) or not isinstance(layers, list):
            raise WeightFileSchemaError("Weight file needs 'layer_sizes' and 'layers' lists")
        if not all(isinstance(s, int) and not isinstance(s, bool) and s >= 1 for s in sizes):
            raise WeightFileSchemaError(f"layer_sizes must be positive integers, got {sizes!r}")
        if len(layers) != len(sizes) - 1:
            raise WeightFileSchemaError(
                f"Weight file lists {len(sizes)} layer sizes but {len(layers)} layers"
            )
        weights, biases = [], []
        for index, layer in enumerate(layers):
            if not isinstance(layer, dict) or "weights" not in layer or "biases" not in layer:
                raise WeightFileSchemaError(f"Layer {index} needs 'weights' and 'biases'")
            try:
                w = np.array(layer["weights"], dtype=np.float64)
                b = np.array(layer["biases"], dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise WeightFileSchemaError(
                    f"Layer {index} has ragged or non-numeric values"
                ) from exc
            expected_w = (sizes[index + 1], sizes[index])
            if w.shape != expected_w:
                raise WeightFileSchemaError(
                    f"Layer {index}: weights shape {w.shape} does not match "
                    f"layer sizes {expected_w}"
                )
            if b.shape != (expected_w[0],):
                raise WeightFileSchemaError(
                    f"Layer {index}: biases shape {b.shape} does not match ({expected_w[0]},)"
                )
            weights.append(layer["weights"])
            biases.append(layer["biases"])
        return cls(
            kind=kind,
            head=document.get("head"),
            layer_sizes=tuple(sizes),
            weights=tuple(weights),
            biases=tuple(biases),
        )


def save_weights(net: Mlp) -> WeightFile:
    """Capture a policy or value network as a WeightFile."""
    kind = "value" if isinstance(net, ValueNet) else "policy"
    head = net.head.value if isinstance(net, MlpPolicy) else None
    return WeightFile(
        kind=kind,
        head=head,
        layer_sizes=net.layer_sizes,
        weights=tuple(layer.weights.tolist() for layer in net.layers),
        biases=tuple(layer.biases.tolist() for layer in net.layers),
    )


def load_weights(weight_file: WeightFile) -> Union[MlpPolicy, ValueNet]:
    """
    Rebuild a network from a WeightFile.

    Raises:
        WeightFileSchemaError: If the stored parameters do not form a valid network
    """
    try:
        layers = [
            LayerParams(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64))
            for w, b in zip(weight_file.weights, weight_file.biases)
        ]
        if weight_file.kind == "value":
            return ValueNet(layers)
        return MlpPolicy(layers, head=weight_file.head or Head.SOFTMAX)
    except (ShapeError, NumericError, ValueError) as exc:
        raise WeightFileSchemaError(f"Invalid network in weight file: {exc}") from exc


def write_weight_file(net: Mlp, path: Union[str, Path]) -> Path:
    """Save a network to a weight file on disk."""
    return write_text(path, save_weights(net).to_text())


def read_weight_file(path: Union[str, Path], expect: Optional[Type[Mlp]] = None) -> Any:
    """
    Load a network from a weight file on disk.

    Args:
        path: File path
        expect: Optional network class the file must contain

    Raises:
        WeightFileError: If the file is missing, malformed or of the wrong kind
    """
    path = Path(path)
    if not path.is_file():
        raise WeightFileParseError(f"Weight file not found: {path}")
    net = load_weights(WeightFile.from_text(path.read_text(encoding="utf-8")))
    if expect is not None and not isinstance(net, expect):
        raise WeightFileSchemaError(
            f"{path} holds a {type(net).__name__}, expected {expect.__name__}"
        )
    return net
