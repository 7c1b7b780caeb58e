"""Experiment configuration: a flat JSON object with strict keys.

Precedence when resolving a run: command-line flags > config file > defaults.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Optional

from .layers import ModelSpec, cnn_spec, mlp_spec
from .quantizer import FULL_PRECISION
from .scaling import GMode
from .training import DeltaMode, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # what to train
    task: str = "two_moons"          # two_moons | mnist
    model: str = "mlp"               # mlp (two_moons) | cnn (mnist)
    hidden: int = 32                 # MLP hidden width
    w_bits: int = 2                  # 32 = full precision
    a_bits: int = 2
    # optimization
    epochs: int = 500
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"          # network weights: adam | sgd
    lr_weights: float = 1e-2
    lr_quantizer: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # scaling factors
    delta_mode: str = "adaptive"     # ste | fixed:<value> | adaptive
    delta_update_period: int = 100   # iterations
    n_probes: int = 16
    g_mode: str = "three_sigma"      # three_sigma | max_abs | mean_abs
    # data
    n_train: int = 256               # two_moons
    n_test: int = 256                # two_moons
    noise: float = 0.1               # two_moons
    data_seed: int = 0               # two_moons sampling; the test set uses data_seed + 1
    mnist_subset: int = 10000
    mnist_test_subset: Optional[int] = None
    data_root: Optional[str] = None  # default: $EWGS_DATA_ROOT
    # outputs
    output_dir: str = "runs"
    checkpoint_every: int = 0        # iterations; 0 = final checkpoint only
    eval_batch_size: int = 500
    recalibrate_bn: bool = False     # recompute BN statistics after the last step

    def __post_init__(self):
        errors = []
        if not isinstance(self.recalibrate_bn, bool):
            errors.append(f"recalibrate_bn: expected true or false, got {self.recalibrate_bn!r}")
        if self.task not in ("two_moons", "mnist"):
            errors.append(f"task: expected 'two_moons' or 'mnist', got {self.task!r}")
        if self.model not in ("mlp", "cnn"):
            errors.append(f"model: expected 'mlp' or 'cnn', got {self.model!r}")
        elif (self.task, self.model) not in (("two_moons", "mlp"), ("mnist", "cnn")):
            errors.append(f"model: {self.model!r} is not available for task {self.task!r}")
        if self.optimizer not in ("adam", "sgd"):
            errors.append(f"optimizer: expected 'adam' or 'sgd', got {self.optimizer!r}")
        for name in ("w_bits", "a_bits"):
            b = getattr(self, name)
            if not isinstance(b, int) or not (1 <= b <= 16 or b == FULL_PRECISION):
                errors.append(f"{name}: expected 1..16 or {FULL_PRECISION} (full precision), got {b!r}")
        try:
            self.delta_mode = str(DeltaMode.parse(self.delta_mode))
        except ValueError as exc:
            errors.append(f"delta_mode: {exc}")
        try:
            GMode(self.g_mode)
        except ValueError:
            errors.append(f"g_mode: expected one of {[m.value for m in GMode]}, got {self.g_mode!r}")
        for name in ("epochs", "batch_size", "delta_update_period", "n_probes", "hidden", "n_train", "mnist_subset", "eval_batch_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                errors.append(f"{name}: expected a positive integer, got {v!r}")
        if self.task == "two_moons":
            for name in ("n_train", "n_test"):
                v = getattr(self, name)
                if not isinstance(v, int) or v < 2 or v % 2:
                    errors.append(f"{name}: two_moons needs a positive even count, got {v!r}")
        if self.checkpoint_every < 0:
            errors.append("checkpoint_every: must be >= 0")
        for name in ("lr_weights", "lr_quantizer", "weight_decay", "noise"):
            if getattr(self, name) < 0:
                errors.append(f"{name}: must be >= 0")
        if errors:
            raise ConfigError("invalid config:\n  " + "\n  ".join(errors))

    # -- construction --------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for f in fields(cls):
            if f.name in raw and raw[f.name] is not None:
                raw[f.name] = _coerce(f.name, f.type, raw[f.name])
        return cls(**raw)

    @classmethod
    def load(cls, path: str | os.PathLike, overrides: Optional[dict] = None) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    # -- derived objects -----------------------------------------------
    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            optimizer=self.optimizer,
            lr_weights=self.lr_weights,
            lr_quantizer=self.lr_quantizer,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            delta_mode=DeltaMode.parse(self.delta_mode),
            delta_update_period=self.delta_update_period,
            n_probes=self.n_probes,
            g_mode=GMode(self.g_mode),
            eval_batch_size=self.eval_batch_size,
            recalibrate_bn=self.recalibrate_bn,
        )

    def model_spec(self) -> ModelSpec:
        if self.model == "mlp":
            return mlp_spec((2, self.hidden, self.hidden, 2), self.w_bits, self.a_bits)
        return cnn_spec(self.w_bits, self.a_bits)


_TYPES = {"bool": bool, "int": int, "float": float, "str": str, "Optional[int]": int, "Optional[str]": str}


def _coerce(name: str, type_name: Any, value: Any) -> Any:
    target = _TYPES.get(str(type_name))
    if target is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if target is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true or false, got {value!r}")
        return value
    if target is not None and (not isinstance(value, target) or isinstance(value, bool)):
        raise ConfigError(f"{name}: expected {type_name}, got {value!r}")
    return value
