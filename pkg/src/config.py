import copy
import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml

logger = logging.getLogger(__name__)

VERSION = "1.0.0"

NUMBER = (int, float)
OPT_INT = (int, type(None))
OPT_LIST = (list, type(None))
OPT_STR = (str, type(None))

# Nested dicts are sections; tuples list the accepted leaf types; `dict` leaves are free-form.
SCHEMA: Dict[str, Any] = {
    "seed": (int,),
    "world": {
        "name": (str,),
        "params": (dict,),
        "states": OPT_LIST,
        "noise": (dict,),
    },
    "thresholds": {"c_out": NUMBER, "c_in": NUMBER},
    "network": {"hidden": OPT_LIST, "latent_dim": OPT_INT, "pb_dim": (int,)},
    "train": {"epochs": (int,), "batch_size": (int,), "learning_rate": NUMBER, "pb_lr_ratio": NUMBER},
    "online": {
        "mode": (str,),
        "buffer_capacity": (int,),
        "min_start": (int,),
        "steps_per_datum": (int,),
        "learning_rate_w": NUMBER,
        "learning_rate_p": NUMBER,
    },
    "iteropt": {"gamma_max": NUMBER, "n_batch": (int,), "iterations": (int,)},
    "losses": (dict,),
    "collect": {"n_samples": (int,), "available": OPT_LIST},
    "estimate": {"hidden": (list,), "state": OPT_STR},
    "control": {"group": OPT_STR, "loss": OPT_STR, "init": OPT_LIST},
    "simulate": {"command_group": (str,), "constraints": OPT_STR, "carry_over": (bool,)},
    "detect": {"hidden": (list,), "n_sigma": NUMBER, "n_calibration": (int,)},
}

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "world": {"name": "B", "params": {}, "states": None, "noise": {}},
    "thresholds": {"c_out": 0.15, "c_in": 0.15},
    "network": {"hidden": None, "latent_dim": None, "pb_dim": 0},
    "train": {"epochs": 200, "batch_size": 64, "learning_rate": 0.05, "pb_lr_ratio": 10.0},
    "online": {
        "mode": "p_only",
        "buffer_capacity": 200,
        "min_start": 20,
        "steps_per_datum": 1,
        "learning_rate_w": 0.01,
        "learning_rate_p": 0.1,
    },
    "iteropt": {"gamma_max": 1.0, "n_batch": 16, "iterations": 30},
    "losses": {},
    "collect": {"n_samples": 1000, "available": None},
    "estimate": {"hidden": [], "state": None},
    "control": {"group": None, "loss": None, "init": None},
    "simulate": {"command_group": "l", "constraints": None, "carry_over": True},
    "detect": {"hidden": ["l"], "n_sigma": 3.0, "n_calibration": 200},
}

ENV_DEFAULTS = {
    "LOG_LEVEL": "INFO",
    "BODYSCHEMA_OUT_DIR": "runs",
}

THREAD_VARIABLES = ("GEMUCO_THREADS", "BODYSCHEMA_THREADS")


class ConfigError(ValueError):
    """Invalid experiment configuration; `line` is 1-based when known."""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None, line: Optional[int] = None):
        self.path = str(path) if path is not None else "<config>"
        self.line = line
        prefix = f"{self.path}:{line}: " if line is not None else f"{self.path}: "
        super().__init__(prefix + message)


def validate_environment() -> Dict[str, str]:
    """Apply defaults for missing environment variables and return the effective values."""
    defaults = dict(ENV_DEFAULTS)
    if not any(os.getenv(key) for key in THREAD_VARIABLES):
        defaults[THREAD_VARIABLES[0]] = str(os.cpu_count() or 1)
    for key, value in defaults.items():
        if not os.getenv(key):
            os.environ[key] = value
            logger.info(f"Setting default {key}={value}")
    worker_count()
    return {key: os.environ[key] for key in list(ENV_DEFAULTS) + list(THREAD_VARIABLES) if os.getenv(key)}


def worker_count() -> int:
    """Thread cap from GEMUCO_THREADS, else BODYSCHEMA_THREADS, defaulting to the CPU count."""
    key = next((k for k in THREAD_VARIABLES if os.getenv(k)), None)
    if key is None:
        return os.cpu_count() or 1
    raw = os.environ[key]
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got '{raw}'", path="environment")
    if value < 1:
        raise ConfigError(f"{key} must be at least 1, got {value}", path="environment")
    return value


def _type_names(types) -> str:
    return " or ".join("null" if t is type(None) else t.__name__ for t in types)


def _matches(value: Any, types) -> bool:
    if isinstance(value, bool) and bool not in types:
        return False
    return isinstance(value, types)


def _check(node: yaml.Node, data: Any, schema: Dict[str, Any], path: str, where: str) -> None:
    line = node.start_mark.line + 1
    if not isinstance(node, yaml.MappingNode) or not isinstance(data, dict):
        raise ConfigError(f"Section '{where or 'top level'}' must be a mapping", path, line)
    for key_node, value_node in node.value:
        key = key_node.value
        name = f"{where}.{key}" if where else key
        if key not in schema:
            raise ConfigError(f"Unknown key '{name}'; allowed: {', '.join(sorted(schema))}", path, key_node.start_mark.line + 1)
        rule = schema[key]
        value = data[key]
        if isinstance(rule, dict):
            _check(value_node, value, rule, path, name)
        elif not _matches(value, rule):
            raise ConfigError(
                f"'{name}' must be {_type_names(rule)}, got {type(value).__name__}", path, value_node.start_mark.line + 1
            )


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(merged.get(key), dict) and isinstance(value, dict) and isinstance(SCHEMA.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


@dataclass
class ExperimentConfig:
    """Validated experiment configuration with every default filled in."""

    data: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    source: str = ""
    path: str = "<config>"

    def __getitem__(self, section: str) -> Any:
        return self.data[section]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.source.encode("utf-8")).hexdigest()

    def with_seed(self, seed: Optional[int]) -> "ExperimentConfig":
        if seed is None:
            return self
        data = copy.deepcopy(self.data)
        data["seed"] = int(seed)
        return ExperimentConfig(data, self.source, self.path)

    def loss_records(self, name: str) -> list:
        losses = self.data["losses"]
        if name not in losses:
            raise ConfigError(f"No loss named '{name}' under 'losses'; defined: {sorted(losses)}", self.path)
        if not isinstance(losses[name], list):
            raise ConfigError(f"Loss '{name}' must be a list of term records", self.path)
        return losses[name]

    @classmethod
    def from_text(cls, text: str, path: Union[str, Path] = "<config>") -> "ExperimentConfig":
        """
        Parse and validate YAML text.

        Raises:
            ConfigError: For YAML syntax errors, unknown keys or wrong types, with the line.
        """
        try:
            node = yaml.compose(text)
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            line = mark.line + 1 if mark is not None else None
            raise ConfigError(f"Invalid YAML: {getattr(e, 'problem', e)}", path, line)
        if node is None:
            data = {}
        else:
            _check(node, data, SCHEMA, str(path), "")
        config = cls(_merge(DEFAULTS, data), text, str(path))
        if config["world"]["name"] not in ("A", "B", "C"):
            raise ConfigError(f"world.name must be A, B or C, got '{config['world']['name']}'", path, _line_of(node, "world", "name"))
        return config

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"Cannot read config: {e}", path)
        logger.info(f"Loaded config {path}")
        return cls.from_text(text, path)


def _line_of(node: Optional[yaml.Node], *keys: str) -> Optional[int]:
    for key in keys:
        if not isinstance(node, yaml.MappingNode):
            return None
        match = [v for k, v in node.value if k.value == key]
        if not match:
            return None
        node = match[0]
    return node.start_mark.line + 1 if node is not None else None
