"""Experiment configuration: dataclasses, case presets, YAML round-trip and ``key=value`` overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import yaml

from .channel import ChannelError, ChannelSpec
from .data import RECOVER, TASK1, TASK2, TASK3, DataError, TaskSpec
from .nets import VARIANTS, ModelConfig, ModelConfigError
from .objective import LossConfigError, LossWeights

PRESETS = ("case1", "case2", "case3", "case4", "case5", "custom")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 128
    snr_list: List[float] = field(default_factory=lambda: list(range(-5, 20, 2)))
    snr_sampling: str = "discrete"  # discrete | continuous (uniform over [min, max])
    lr: float = 1e-3
    lr_decay: float = 1.0  # multiplicative per epoch
    grad_clip: Optional[float] = 5.0
    seed: int = 0
    checkpoint_every: int = 1
    max_train_items: Optional[int] = None

    def __post_init__(self):
        if not self.snr_list:
            raise ConfigError("must not be empty", "trainer.snr_list")
        if self.epochs < 1:
            raise ConfigError("must be >= 1", "trainer.epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "trainer.batch_size")
        if self.snr_sampling not in ("discrete", "continuous"):
            raise ConfigError(f"unknown mode {self.snr_sampling!r}", "trainer.snr_sampling")


@dataclass
class EvalConfig:
    grid: List[float] = field(default_factory=lambda: list(range(-5, 20, 2)))
    repeats: int = 5
    batch_size: int = 500
    max_test_items: Optional[int] = None

    def __post_init__(self):
        if not self.grid:
            raise ConfigError("must not be empty", "eval.grid")
        if self.repeats < 1:
            raise ConfigError("must be >= 1", "eval.repeats")


@dataclass
class UserSpec:
    task: TaskSpec = field(default_factory=TaskSpec)
    channel: ChannelSpec = field(default_factory=ChannelSpec)


@dataclass
class ExperimentConfig:
    preset: str = "custom"
    users: List[UserSpec] = field(default_factory=list)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    variants: List[str] = field(default_factory=lambda: ["deepbroadcast"])
    dataset: str = "cifar10"  # cifar10 | synthetic
    data_dir: Optional[str] = None
    output_dir: str = "runs"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}", "preset")
        n = len(self.users)
        if n < 1:
            raise ConfigError("at least one user is required", "users")
        heads = [u.task.head() for u in self.users]
        current = [dataclasses.asdict(h) for h in self.model.heads]
        if self.model.n_users != n or current != heads:
            try:
                self.model = dataclasses.replace(self.model, n_users=n, heads=heads)
            except ModelConfigError as exc:
                raise ConfigError(str(exc), "model") from exc
        if self.loss.n_users != n:
            raise ConfigError(f"{self.loss.n_users} task weights for {n} users", "loss.task_weights")
        for i, v in enumerate(self.variants):
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}", f"variants.{i}")
        if self.dataset not in ("cifar10", "synthetic"):
            raise ConfigError(f"unknown dataset {self.dataset!r}", "dataset")

    @property
    def tasks(self) -> List[TaskSpec]:
        return [u.task for u in self.users]

    @property
    def channels(self) -> List[ChannelSpec]:
        return [u.channel for u in self.users]

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:10]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _users(*pairs) -> List[UserSpec]:
    return [UserSpec(copy.deepcopy(t), copy.deepcopy(c)) for t, c in pairs]


def expand_preset(name: str) -> ExperimentConfig:
    """Fully expanded configuration for one of the named experiment cases."""
    awgn, rayleigh, rician = ChannelSpec("awgn"), ChannelSpec("rayleigh"), ChannelSpec("rician", rician_a=2.0)
    if name == "case1":
        return ExperimentConfig(
            preset=name,
            users=_users((RECOVER, awgn), (TASK3, rayleigh)),
            model=ModelConfig(deterministic_latent=True),
            # L1 + 1e-3 * CE, end-to-end (no KL)
            loss=LossWeights([1.0, 1e-3], beta=0.0),
            eval=EvalConfig(grid=list(range(-5, 20, 2))),
            variants=["deepbroadcast", "deeprc"],
        )
    if name in ("case2", "case4"):
        return ExperimentConfig(
            preset=name,
            users=_users((TASK1, rayleigh), (TASK2, awgn)),
            loss=LossWeights([0.5, 0.5], beta=1e-4),
            eval=EvalConfig(grid=list(range(-5, 32, 2)) if name == "case2" else list(range(-5, 20, 2))),
            variants=["deepbroadcast", "mtoc", "unicast"] if name == "case2"
            else ["mtoc", "mtoc_wlca", "mtoc_wgcf", "deepbroadcast"],
        )
    if name in ("case3", "case5"):
        return ExperimentConfig(
            preset=name,
            users=_users((TASK1, awgn), (TASK2, rayleigh), (TASK3, rician)),
            loss=LossWeights([0.15, 0.15, 0.7], beta=1e-4),
            eval=EvalConfig(grid=list(range(-5, 20, 2))),
            variants=["deepbroadcast", "mtoc", "unicast"] if name == "case3"
            else ["deepbroadcast", "deepbroadcast_e2e"],
        )
    if name == "custom":
        return ExperimentConfig(preset="custom", users=_users((TASK3, awgn)), loss=LossWeights([1.0]))
    raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}", "preset")


# --- dict -> dataclass ---------------------------------------------------------

def _build(cls, data, path, nested=None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", path)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError("unknown key", sub)
        if nested and key in nested:
            value = nested[key](value, sub)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ChannelError, DataError, LossConfigError, ModelConfigError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path or cls.__name__) from exc


def _user(data, path):
    return _build(UserSpec, data, path, {
        "task": lambda v, p: _build(TaskSpec, v, p),
        "channel": lambda v, p: _build(ChannelSpec, v, p),
    })


def _model(data, path):
    if isinstance(data, dict):
        data = dict(data)
        for derived in ("c2", "c3"):
            data.pop(derived, None)
    return _build(ModelConfig, data, path)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a config: start from ``data['preset']`` (default custom) and overlay ``data``."""
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a mapping")
    preset = data.get("preset", "custom")
    base = expand_preset(preset).to_dict()
    merged = _merge(base, data, "")
    if isinstance(data.get("loss"), dict) and "gamma" not in data["loss"]:
        merged["loss"]["gamma"] = None
    return _build(ExperimentConfig, merged, "", {
        "users": lambda v, p: [_user(u, f"{p}.{i}") for i, u in enumerate(_as_list(v, p))],
        "model": _model,
        "loss": lambda v, p: _build(LossWeights, v, p),
        "trainer": lambda v, p: _build(TrainConfig, v, p),
        "eval": lambda v, p: _build(EvalConfig, v, p),
    })


def _as_list(v, path):
    if not isinstance(v, list):
        raise ConfigError("expected a list", path)
    return v


def _merge(base, over, path):
    if isinstance(base, dict) and isinstance(over, dict):
        out = dict(base)
        for k, v in over.items():
            sub = f"{path}.{k}" if path else k
            if k not in base and base:
                raise ConfigError("unknown key", sub)
            out[k] = _merge(base[k], v, sub) if k in base else v
        return out
    if isinstance(base, list) and isinstance(over, list) and len(base) == len(over) and all(isinstance(b, dict) for b in base):
        return [_merge(b, o, f"{path}.{i}") for i, (b, o) in enumerate(zip(base, over))]
    return over


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars/lists."""
    data = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node, parts = data, key.split(".")
        for depth, part in enumerate(parts):
            where = ".".join(parts[:depth + 1])
            last = depth == len(parts) - 1
            if isinstance(node, list):
                if not part.isdigit() or int(part) >= len(node):
                    raise ConfigError("unknown key", where)
                part = int(part)
            elif not isinstance(node, dict) or part not in node:
                raise ConfigError("unknown key", where)
            if last:
                node[part] = value
            else:
                node = node[part]
    keys = [item.split("=", 1)[0] for item in overrides or ()]
    if "loss.task_weights" in keys and "loss.gamma" not in keys:
        data["loss"]["gamma"] = None  # re-derive the uniform KL weights for the new user count
    return config_from_dict(data)


def load_config(path, overrides=()) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}", str(path)) from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config file: {exc}", str(path)) from exc
    return apply_overrides(config_from_dict(data or {}), overrides)


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
