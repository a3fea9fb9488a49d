"""Run configuration: one nested tree of dataclass sections, loadable from YAML."""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .critic import CriticConfig, OptimizerConfig, SUBNETS
from .data import Schema
from .env import OracleConfig
from .policy import PolicyConfig
from .rl import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_logged_train: int = 20000
    n_logged_test: int = 8000
    n_policy_train: int = 5000
    n_policy_eval: int = 1000
    negative_ratio: float = 1 / 50   # positive:negative target after reweighting
    compress: bool = False


@dataclass
class EvalConfig:
    # rows of the ablation grid, each a list of enabled sub-nets
    ablation_grid: list = field(default_factory=lambda: [[], ["fcn"], ["fcn", "pin"], ["fcn", "pin", "bigru"],
                                                          list(SUBNETS)])
    baselines: list = field(default_factory=lambda: ["pointwise", "ncand"])
    algorithms: list = field(default_factory=lambda: ["reinforce-real", "reinforce", "ppo", "ppo-exploration"])
    ips_episodes: int = 20000
    entropy_contexts: int = 500


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    workers: int = 1
    schema: Schema = field(default_factory=Schema)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    critic_optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(epochs=8))
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.schema.n < self.schema.k:
            raise ConfigError("need n >= k")

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def provenance(self) -> dict:
        """The headline hyperparameters, as read from this config."""
        return {
            "n": self.schema.n,
            "k": self.schema.k,
            "m": self.trainer.m,
            "c": self.trainer.c,
            "loss_weights": dict(self.critic.loss_weights),
            "negative_ratio": self.data.negative_ratio,
            "seed": self.seed,
        }


def _build(cls, values, path: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in values.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default) and isinstance(value, dict):
            base = asdict(default)
            merged = merge(base, value)
            kwargs[name] = _build(type(default), merged, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = _coerce(default, value, f"{path}.{name}" if path else name)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _coerce(default, value, path: str):
    # YAML 1.1 reads "1e-3" as a string, and ints stand in for floats
    if isinstance(default, bool) or default is None or value is None:
        return value
    if isinstance(default, float) and not isinstance(value, bool):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path} must be a number, got {value!r}") from None
    if isinstance(default, int) and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{path} must be an integer, got {value!r}")
    return value


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = merge(out[k], v) if isinstance(out.get(k), dict) and isinstance(v, dict) else v
    return out


def from_dict(values: dict | None) -> RunConfig:
    return _build(RunConfig, values or {}, "")


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            values = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"bad YAML in {path}: {exc}") from exc
    return from_dict(merge(values, overrides or {}))


def parse_override(text: str) -> dict:
    """``a.b.c=value`` to a nested dict; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw)
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out
