"""Pytest configuration and shared fixtures for option decomposition tests."""

import numpy as np
import pytest

from src.gridworlds import DomainKind, build_task_sets
from src.neuralnet import LayerParams, MlpPolicy
from src.optionlib import FixedSequencePolicy, OptionDef, Trajectory


@pytest.fixture
def two_unit_policy():
    """Two inputs, two hidden ReLU units and a sigmoid output."""
    return MlpPolicy(
        [
            LayerParams(np.array([[2.0, 1.0], [-2.0, -1.0]]), np.array([1.0, 1.0])),
            LayerParams(np.array([[-1.0, 1.0]]), np.array([1.0])),
        ],
        head="sigmoid",
    )


@pytest.fixture
def six_state_trajectory():
    """Five actions 0, 1, 2, 2, 2 visiting six states s0..s5."""
    return Trajectory(
        observations=np.eye(6)[:5],
        actions=np.array([0, 1, 2, 2, 2]),
        terminal_observation=np.eye(6)[5],
        task_id="fixture",
    )


@pytest.fixture
def six_state_options():
    """omega_1 applies only at s0 with z=2; omega_2 only at s1 with z=3."""
    return [
        OptionDef(FixedSequencePolicy((0, 1)), 2, "other", 0),
        OptionDef(FixedSequencePolicy((1, 2, 2)), 3, "other", 1),
    ]


@pytest.fixture(scope="module")
def combogrid3():
    """Source and target tasks of the 3x3 ComboGrid."""
    return build_task_sets(DomainKind.COMBOGRID, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
