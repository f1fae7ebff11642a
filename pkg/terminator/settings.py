import copy
import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

from .model import ModelConfig
from .sfne import SfneConfig
from .slownet import MfnConfig
from .tensor import set_default_dtype

DATASETS = ("mnist", "smnist", "pmnist", "stripes", "blobs")
PRECISIONS = ("float64", "float32")


class ConfigError(Exception):
    """Raised for unreadable or invalid run configuration."""


def default_run_config() -> Dict[str, Any]:
    return {
        "name": "desk_mnist",
        "seed": 0,
        "precision": "float64",
        "model": {
            "stem_channels": 8,
            "num_blocks": 4,
            "expansion": 2,
            "kernel_sizes": [3, 5, 7],
            "groups": 4,
            "eps": 1e-5,
            "global_mfn": {"depth": 2, "width": 32, "omega": 64.0},
            "local_mfn": {"depth": 2, "width": 8, "omega": 64.0},
            "hyper_mfn": {"depth": 1, "width": 16, "omega": 64.0},
            "disabled_branches": [],
        },
        "optimizer": {
            "lr": 0.05,
            "momentum": 0.9,
            "weight_decay": 0.0,
            "epochs": 15,
            "batch_size": 32,
            "eval_batch_size": 100,
        },
        "loss": {"alpha": 0.1, "slow_loss_reduction": "mean"},
        "data": {
            "dataset": "mnist",
            "root": None,
            "train_size": 10000,
            "test_size": 2000,
            "permutation_seed": 42,
            "synthetic_size": 8,
            "shuffle_seed": 0,
        },
        "gradcheck": {"step": 1e-5, "tol": 1e-4, "max_entries": 3, "batch_size": 3, "seed": 0},
    }


def _type_ok(default: Any, value: Any) -> bool:
    if default is None:
        return value is None or isinstance(value, (str, int, float))
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return (isinstance(value, int) and not isinstance(value, bool)) or value is None
    return isinstance(value, type(default))


def _merge(defaults: Dict[str, Any], raw: Dict[str, Any], path: str) -> Dict[str, Any]:
    merged = copy.deepcopy(defaults)
    for key, value in raw.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        default = defaults[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be an object")
            merged[key] = _merge(default, value, where)
        elif not _type_ok(default, value):
            raise ConfigError(f"{where} has type {type(value).__name__}, expected {type(default).__name__}")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def normalize_run_config(raw: Dict[str, Any]) -> Dict[str, Any]:
    """Defaults overlaid with `raw`; unknown keys and mistyped values are rejected."""
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    merged = _merge(default_run_config(), raw, "")
    if merged["precision"] not in PRECISIONS:
        raise ConfigError(f"precision must be one of {PRECISIONS}")
    if merged["data"]["dataset"] not in DATASETS:
        raise ConfigError(f"data.dataset must be one of {DATASETS}")
    opt = merged["optimizer"]
    if opt["lr"] <= 0 or opt["epochs"] < 1 or opt["batch_size"] < 1 or opt["eval_batch_size"] < 1:
        raise ConfigError("optimizer.lr must be > 0 and epochs / batch sizes >= 1")
    if merged["loss"]["alpha"] < 0:
        raise ConfigError("loss.alpha must be >= 0")
    if merged["loss"]["slow_loss_reduction"] not in ("mean", "sum"):
        raise ConfigError("loss.slow_loss_reduction must be 'mean' or 'sum'")
    return merged


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float
    momentum: float
    weight_decay: float
    epochs: int
    batch_size: int
    eval_batch_size: int


@dataclass(frozen=True)
class LossConfig:
    alpha: float
    slow_loss_reduction: str


@dataclass(frozen=True)
class DataConfig:
    dataset: str
    root: Optional[str]
    train_size: Optional[int]
    test_size: Optional[int]
    permutation_seed: Optional[int]
    synthetic_size: int
    shuffle_seed: int

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        if self.dataset == "mnist":
            return (1, 28, 28)
        if self.dataset in ("smnist", "pmnist"):
            return (1, 784)
        return (1, self.synthetic_size, self.synthetic_size)

    @property
    def num_classes(self) -> int:
        return {"stripes": 2, "blobs": 4}.get(self.dataset, 10)


@dataclass(frozen=True)
class GradCheckConfig:
    step: float
    tol: float
    max_entries: Optional[int]
    batch_size: int
    seed: int


@dataclass(frozen=True)
class RunConfig:
    name: str
    seed: int
    precision: str
    model: ModelConfig
    optimizer: OptimizerConfig
    loss: LossConfig
    data: DataConfig
    gradcheck: GradCheckConfig
    raw: Dict[str, Any]

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        resolved = normalize_run_config(raw)
        data = DataConfig(**resolved["data"])
        m = resolved["model"]
        sample_shape = data.sample_shape
        rank = len(sample_shape) - 1
        try:
            blocks, channels = [], m["stem_channels"]
            for _ in range(m["num_blocks"]):
                blocks.append(
                    SfneConfig(
                        in_channels=channels,
                        expansion=m["expansion"],
                        kernel_sizes=tuple(m["kernel_sizes"]),
                        groups=m["groups"],
                        spatial_rank=rank,
                        eps=m["eps"],
                        global_mfn=MfnConfig(**m["global_mfn"]),
                        local_mfn=MfnConfig(**m["local_mfn"]),
                        hyper_mfn=MfnConfig(**m["hyper_mfn"]),
                        disabled_branches=tuple(m["disabled_branches"]),
                    )
                )
                channels *= m["expansion"]
            model = ModelConfig(sample_shape, m["stem_channels"], tuple(blocks), data.num_classes)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid model section: {e}") from e
        return cls(
            name=resolved["name"],
            seed=resolved["seed"],
            precision=resolved["precision"],
            model=model,
            optimizer=OptimizerConfig(**resolved["optimizer"]),
            loss=LossConfig(**resolved["loss"]),
            data=data,
            gradcheck=GradCheckConfig(**resolved["gradcheck"]),
            raw=resolved,
        )

    def apply_precision(self) -> None:
        set_default_dtype(self.precision)


class ConfigManager:
    """Loads and saves run configuration JSON documents."""

    def __init__(self, file_path: str):
        self.file_path = file_path

    def load(self) -> Dict[str, Any]:
        if not os.path.exists(self.file_path):
            raise ConfigError(f"config file not found: {self.file_path}")
        try:
            with open(self.file_path, "r", encoding="utf-8") as f:
                settings = json.load(f)
        except json.JSONDecodeError as e:
            logging.error("Error parsing config %s: %s", self.file_path, e)
            raise ConfigError(f"{self.file_path}:{e.lineno}:{e.colno}: {e.msg}") from e
        except OSError as e:
            logging.error("Error loading config from %s: %s", self.file_path, e)
            raise ConfigError(f"cannot read {self.file_path}: {e}") from e
        logging.info("Config loaded from %s", self.file_path)
        return settings

    def save(self, settings: Dict[str, Any]) -> bool:
        try:
            os.makedirs(os.path.dirname(self.file_path) or ".", exist_ok=True)
            with open(self.file_path, "w", encoding="utf-8") as f:
                json.dump(settings, f, indent=4)
            logging.info("Config saved to %s", self.file_path)
            return True
        except (IOError, OSError) as e:
            logging.error("Error saving config to %s: %s", self.file_path, e)
            return False


def load_run_config(path: str) -> RunConfig:
    return RunConfig.from_dict(ConfigManager(path).load())
