import math

import numpy as np
import pytest
import yaml

from src.errors import NumericError, ShapeError, WeightFileParseError, WeightFileSchemaError
from src.neuralnet import (
    Head,
    LayerParams,
    MlpPolicy,
    ValueNet,
    WeightFile,
    init_params,
    init_value_net,
    policy_forward,
    read_weight_file,
    save_weights,
    sigmoid,
    softmax,
    write_weight_file,
)
from src.utils import config


class TestPolicyForward:
    """Forward passes of the small fixture networks."""

    def test_two_unit_at_origin(self, two_unit_policy):
        """Test the two-unit network at the origin: both units active."""
        probs, hidden = policy_forward(two_unit_policy, np.array([0.0, 0.0]))

        np.testing.assert_allclose(hidden, [1.0, 1.0])
        assert probs[1] == pytest.approx(0.7310585786, abs=1e-9)
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)

    def test_two_unit_second_point(self, two_unit_policy):
        """Test the two-unit network where only the second unit is active."""
        probs, hidden = policy_forward(two_unit_policy, np.array([-1.0, 1.0]))

        np.testing.assert_allclose(hidden, [0.0, 2.0])
        assert probs[1] == pytest.approx(sigmoid(3.0), abs=1e-12)

    def test_zero_network_is_uniform(self):
        """Test that an all-zero network gives a uniform distribution."""
        policy = init_params([4, 5, 3], seed=0, scheme="zero")
        probs, _ = policy_forward(policy, np.ones(4))
        np.testing.assert_allclose(probs, [1 / 3, 1 / 3, 1 / 3])

    def test_shape_mismatch(self, two_unit_policy):
        """Test that a wrongly sized observation raises ShapeError."""
        with pytest.raises(ShapeError):
            policy_forward(two_unit_policy, np.zeros(3))

    def test_non_finite_parameter(self, two_unit_policy):
        """Test that a NaN weight raises NumericError in the forward pass."""
        two_unit_policy.layers[0].weights[0, 0] = np.nan
        with pytest.raises(NumericError):
            policy_forward(two_unit_policy, np.zeros(2))

    def test_sigmoid_head_exposes_two_logits(self, two_unit_policy):
        """Test that a sigmoid head acts as a two-action policy."""
        logits = two_unit_policy.logits(np.array([0.0, 0.0]))
        np.testing.assert_allclose(logits, [0.0, 1.0])
        assert two_unit_policy.n_actions == 2
        assert two_unit_policy.greedy_action(np.array([0.0, 0.0])) == 1

    def test_greedy_ties_go_to_lowest_index(self):
        """Test that greedy ties resolve to the lowest action index."""
        policy = init_params([2, 3, 3], seed=0, scheme="zero")
        assert policy.greedy_action(np.array([1.0, -1.0])) == 0


class TestNetworkConstruction:
    def test_layers_must_chain(self):
        """Test that consecutive layers with mismatched widths are rejected."""
        with pytest.raises(ShapeError):
            MlpPolicy(
                [
                    LayerParams(np.zeros((3, 2)), np.zeros(3)),
                    LayerParams(np.zeros((2, 4)), np.zeros(2)),
                ]
            )

    def test_bias_shape(self):
        """Test that a bias of the wrong length is rejected."""
        with pytest.raises(ShapeError):
            LayerParams(np.zeros((3, 2)), np.zeros(2))

    def test_non_finite_rejected_in_strict_mode(self):
        """Test that strict validation rejects infinite weights."""
        assert config.strict_validation
        with pytest.raises(NumericError):
            LayerParams(np.array([[np.inf]]), np.zeros(1))

    def test_sigmoid_needs_one_output(self):
        """Test that a sigmoid head requires exactly one output unit."""
        with pytest.raises(ShapeError):
            init_params([2, 2, 2], seed=0, head="sigmoid")

    def test_value_net_single_output(self):
        """Test that a value network must end in one output."""
        with pytest.raises(ShapeError):
            ValueNet([LayerParams(np.zeros((2, 2)), np.zeros(2))])

    def test_sizes(self):
        """Test layer sizes, hidden sizes, decomposability and parameter count."""
        policy = init_params([10, 6, 3], seed=1)
        assert policy.layer_sizes == (10, 6, 3)
        assert policy.hidden_sizes == (6,)
        assert policy.is_decomposable
        assert not init_params([10, 6, 6, 3], seed=1).is_decomposable
        assert policy.num_parameters == 10 * 6 + 6 + 6 * 3 + 3


class TestInitialization:
    def test_deterministic_given_seed(self):
        """Test that initialization depends only on the seed."""
        a = init_params([8, 6, 3], seed=42)
        b = init_params([8, 6, 3], seed=42)
        c = init_params([8, 6, 3], seed=43)
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa, pb)
        assert not np.array_equal(a.layers[0].weights, c.layers[0].weights)

    def test_orthogonal_hidden_layer(self):
        """Test that hidden weights are orthogonal with gain sqrt(2)."""
        policy = init_params([8, 6, 3], seed=0)
        w = policy.layers[0].weights
        np.testing.assert_allclose(w @ w.T, 2.0 * np.eye(6), atol=1e-10)
        np.testing.assert_array_equal(policy.layers[0].biases, np.zeros(6))

    def test_small_output_layer_keeps_policy_near_uniform(self):
        """Test that the scaled output layer starts near uniform."""
        policy = init_params([8, 6, 3], seed=0)
        probs = policy.distribution(np.ones(8))
        np.testing.assert_allclose(probs, np.full(3, 1 / 3), atol=0.05)

    def test_value_net(self):
        """Test batch and single predictions of a value network."""
        value = init_value_net([8, 16, 16, 1], seed=0)
        assert value.predict_batch(np.ones((5, 8))).shape == (5,)
        assert isinstance(value.predict(np.ones(8)), float)


class TestBackward:
    def test_matches_finite_differences(self, rng):
        """Test the gradient of sum(output * g) against central differences."""
        policy = init_params([3, 4, 2], seed=5, output_scale=1.0)
        x = rng.normal(size=(6, 3))
        g = rng.normal(size=(6, 2))
        output, cache = policy.forward_batch(x)
        grads = policy.backward(cache, g)

        h = 1e-6
        for layer, grad in zip(policy.layers, grads):
            for param, analytic in ((layer.weights, grad.weights), (layer.biases, grad.biases)):
                for index in np.ndindex(param.shape):
                    saved = param[index]
                    param[index] = saved + h
                    up = float(np.sum(policy.forward_batch(x)[0] * g))
                    param[index] = saved - h
                    down = float(np.sum(policy.forward_batch(x)[0] * g))
                    param[index] = saved
                    assert analytic[index] == pytest.approx((up - down) / (2 * h), abs=1e-5)

    def test_copy_is_independent(self):
        """Test that a copied network shares no arrays with the original."""
        policy = init_params([3, 4, 2], seed=0)
        clone = policy.copy()
        clone.layers[0].weights[0, 0] += 1.0
        assert policy.layers[0].weights[0, 0] != clone.layers[0].weights[0, 0]


class TestHelpers:
    def test_softmax_stable(self):
        """Test softmax on large equal logits."""
        probs = softmax(np.array([1000.0, 1000.0]))
        np.testing.assert_allclose(probs, [0.5, 0.5])

    def test_sigmoid_extremes(self):
        """Test sigmoid at extreme and ordinary arguments."""
        assert sigmoid(-800.0) == pytest.approx(0.0)
        assert sigmoid(800.0) == pytest.approx(1.0)
        assert sigmoid(0.0) == 0.5
        assert sigmoid(1.0) == pytest.approx(1.0 / (1.0 + math.exp(-1.0)))


class TestWeightFiles:
    """Versioned YAML weight files."""

    def test_round_trip_is_bit_exact(self, tmp_path):
        """Test that weight files restore every parameter bit for bit."""
        policy = init_params([7, 6, 3], seed=3, output_scale=1.0)
        path = write_weight_file(policy, tmp_path / "policy.yaml")
        restored = read_weight_file(path, expect=MlpPolicy)

        for original, loaded in zip(policy.parameters(), restored.parameters()):
            np.testing.assert_array_equal(original, loaded)
        assert restored.head is Head.SOFTMAX

    def test_sigmoid_and_value_round_trip(self, tmp_path, two_unit_policy):
        """Test weight files for sigmoid policies and value networks."""
        restored = read_weight_file(write_weight_file(two_unit_policy, tmp_path / "two-unit.yaml"))
        assert restored.head is Head.SIGMOID

        value = init_value_net([4, 5, 1], seed=0)
        loaded = read_weight_file(write_weight_file(value, tmp_path / "v.yaml"), expect=ValueNet)
        np.testing.assert_array_equal(loaded.layers[1].weights, value.layers[1].weights)

    def test_identical_writes_are_byte_identical(self, tmp_path):
        """Test that writing the same network twice gives identical bytes."""
        policy = init_params([5, 6, 3], seed=9)
        first = write_weight_file(policy, tmp_path / "a.yaml").read_bytes()
        second = write_weight_file(policy, tmp_path / "b.yaml").read_bytes()
        assert first == second

    def test_truncated_file_reports_position(self, tmp_path, two_unit_policy):
        """Test that a truncated weight file reports the parse position."""
        text = save_weights(two_unit_policy).to_text()
        with pytest.raises(WeightFileParseError) as exc_info:
            WeightFile.from_text(text[: text.index("layers") + 20] + "[\n")
        assert exc_info.value.line is not None

    def test_shape_mismatch_names_layer(self, two_unit_policy):
        """Test that a layer shape mismatch names the offending layer."""
        text = save_weights(two_unit_policy).to_text()
        text = text.replace("layer_sizes: [2, 2, 1]", "layer_sizes: [2, 3, 1]")
        with pytest.raises(WeightFileSchemaError, match="Layer 0"):
            WeightFile.from_text(text)

    def test_unknown_version(self, two_unit_policy):
        """Test that an unsupported format version is rejected."""
        text = save_weights(two_unit_policy).to_text().replace("version: 1", "version: 99")
        with pytest.raises(WeightFileSchemaError, match="version"):
            WeightFile.from_text(text)

    @pytest.mark.parametrize("bad_size", ["two", None, 0, 1.5, True])
    def test_non_integer_layer_sizes(self, two_unit_policy, bad_size):
        """Test that malformed layer sizes raise a schema error, not a bare ValueError."""
        document = yaml.safe_load(save_weights(two_unit_policy).to_text())
        document["layer_sizes"][1] = bad_size
        with pytest.raises(WeightFileSchemaError, match="layer_sizes"):
            WeightFile.from_text(yaml.safe_dump(document))

    def test_wrong_kind(self, tmp_path):
        """Test that reading a value file as a policy is rejected."""
        path = write_weight_file(init_value_net([3, 4, 1], seed=0), tmp_path / "v.yaml")
        with pytest.raises(WeightFileSchemaError):
            read_weight_file(path, expect=MlpPolicy)

    def test_missing_file(self, tmp_path):
        """Test that a missing weight file raises WeightFileParseError."""
        with pytest.raises(WeightFileParseError):
            read_weight_file(tmp_path / "missing.yaml")
