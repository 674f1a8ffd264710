"""Shared configuration and small helpers."""

import math
from pathlib import Path
from typing import Any, Union

import numpy as np
import yaml

from .errors import ConfigurationError


class Config:
    """Global configuration for the option-decomposition library."""

    def __init__(self) -> None:
        self.epsilon: float = 1e-9
        self.strict_validation: bool = True
        self.max_enumeration_width: int = 14
        self.max_tree_depth: int = 16


config = Config()


def ensure_dir(path: Union[str, Path]) -> Path:
    """Create a directory (and parents) if needed and return it as a Path."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def dump_yaml(data: Any) -> str:
    """
    Serialize plain data to YAML text with a stable key order.

    Floats are written with Python's shortest round-trip representation, so
    reading the text back yields bit-identical values.
    """
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=None, width=4096)


def read_yaml_file(path: Union[str, Path]) -> Any:
    """
    Load a YAML file.

    Raises:
        ConfigurationError: If the file does not exist or is not valid YAML
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"File not found: {path}")
    try:
        return yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"Malformed YAML in {path}: {exc}") from exc


def write_text(path: Union[str, Path], text: str) -> Path:
    """Write text to a file, creating parent directories."""
    path = Path(path)
    ensure_dir(path.parent)
    path.write_text(text, encoding="utf-8")
    return path


def log_sum_exp(values: Union[list, np.ndarray]) -> float:
    """Numerically stable log(sum(exp(values))); -inf for an empty input."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("-inf")
    peak = float(np.max(arr))
    if math.isinf(peak):
        return peak
    return peak + math.log(float(np.sum(np.exp(arr - peak))))


def safe_exp(value: float) -> float:
    """exp() that saturates to inf instead of raising OverflowError."""
    try:
        return math.exp(value)
    except OverflowError:
        return float("inf")
