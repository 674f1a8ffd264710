"""
Option Decomposition

Extracts temporally extended actions (options) from small trained ReLU policy
networks by decomposing them into the linear sub-policies of their neural
trees, selects a helpful subset by minimizing the Levin loss, and trains
option-augmented agents on harder gridworld tasks.
"""

from .decomposer import (
    ActivationMask,
    NeuralTree,
    NeuronState,
    SubPolicy,
    build_neural_tree,
    enumerate_subpolicies,
)
from .errors import (
    AggregationError,
    ConfigurationError,
    DecompositionError,
    EnumerationCapError,
    InvalidActionError,
    NumericError,
    PipelineError,
    ShapeError,
    UnsupportedArchitectureError,
    WeightFileError,
    WeightFileParseError,
    WeightFileSchemaError,
)
from .gridworlds import DomainKind, GridSpec, GridTaskEnv, build_task_sets, make_env
from .harness import ExperimentConfig, RunSummary, SelectionMode, aggregate_runs, run_pipeline
from .neuralnet import MlpPolicy, ValueNet, init_params, read_weight_file, write_weight_file
from .option_env import OptionEnv
from .optionlib import (
    ExclusionPolicy,
    FixedSequencePolicy,
    OptionDef,
    Trajectory,
    compute_loss,
    generate_candidates,
    greedy_select,
    rollout_greedy,
)
from .trainer import NetShapes, PpoConfig, train_task
from .utils import Config, config

__all__ = [
    # Networks and decomposition
    "MlpPolicy",
    "ValueNet",
    "init_params",
    "read_weight_file",
    "write_weight_file",
    "ActivationMask",
    "NeuronState",
    "NeuralTree",
    "SubPolicy",
    "build_neural_tree",
    "enumerate_subpolicies",
    # Environments
    "DomainKind",
    "GridSpec",
    "GridTaskEnv",
    "OptionEnv",
    "build_task_sets",
    "make_env",
    # Options
    "ExclusionPolicy",
    "FixedSequencePolicy",
    "OptionDef",
    "Trajectory",
    "compute_loss",
    "generate_candidates",
    "greedy_select",
    "rollout_greedy",
    # Training and experiments
    "NetShapes",
    "PpoConfig",
    "train_task",
    "ExperimentConfig",
    "RunSummary",
    "SelectionMode",
    "aggregate_runs",
    "run_pipeline",
    # Exceptions
    "DecompositionError",
    "ConfigurationError",
    "InvalidActionError",
    "ShapeError",
    "NumericError",
    "UnsupportedArchitectureError",
    "EnumerationCapError",
    "WeightFileError",
    "WeightFileParseError",
    "WeightFileSchemaError",
    "AggregationError",
    "PipelineError",
    # Configuration
    "Config",
    "config",
]
