"""Run configuration: built-in defaults, then a YAML file, then flags.

The file path comes from ``--config`` or the ``HPCALIGN_CONFIG`` environment
variable. Files and flags may only set keys that already have a default.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .controller import ControllerConfig
from .hpcc import HpccConfig

CONFIG_ENV = "HPCALIGN_CONFIG"

BENCHMARK_TASKS = ("fridge_milk", "breakfast", "store_groceries", "wash_dry", "fetch_far", "relay")


class ConfigError(ValueError):
    """Unknown key, wrong type or unreadable config file."""


def _model_defaults() -> dict:
    return {f.name: f.default for f in fields(HpccConfig) if f.name != "vocab_size"}


def _controller_defaults() -> dict:
    out = asdict(ControllerConfig())
    out.update(prototype_episodes=10, prototype_seed=1000)
    return out


def default_sections() -> dict:
    return {
        "simulate": {
            "tasks": list(BENCHMARK_TASKS),
            "episodes": 60,
            "noise_rate": 0.2,
            "persistence": 0.6,
            "label_mode": "oracle",
            "mix": {"ordering": 0.25, "grounding": 0.25, "termination": 0.25, "looping": 0.25},
        },
        "model": _model_defaults(),
        "train": {"steps": 300, "lr": 1e-4, "batch_size": 32, "stage": "both", "pretrain_steps": None,
                  "warmup": 1000, "weight_decay": 0.01},
        "controller": _controller_defaults(),
        "metrics": {"K": 10, "n_boot": 1000, "n_match": 1, "eps_reg": 1e-4, "alpha": 0.05, "ipcw": False,
                    "pac_range": [1, 10], "auc_windows": [3, 5]},
    }


def _coerce(section: str, key: str, default, value):
    where = f"{section}.{key}"
    if value is None:
        return value
    if default is None:  # optional integers such as train.pretrain_steps
        return _coerce(section, key, 0, value)
    if isinstance(default, bool):
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool):
            raise ConfigError(f"{where} must be a number")
        try:
            num = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where} must be a number, got {value!r}") from None
        if isinstance(default, int):
            if not num.is_integer():
                raise ConfigError(f"{where} must be an integer, got {value!r}")
            return int(num)
        return num
    if isinstance(default, (list, tuple)):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        if default and all(isinstance(d, (int, float)) and not isinstance(d, bool) for d in default):
            try:
                value = [type(default[0])(v) for v in value]
            except (TypeError, ValueError):
                raise ConfigError(f"{where} must be a list of numbers") from None
        return type(default)(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be a mapping")
        return dict(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    return value


@dataclass
class RunConfig:
    seed: int = 0
    sections: dict = field(default_factory=default_sections)

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def merged(self, overrides: dict) -> "RunConfig":
        """New config with ``overrides`` (``{"seed": .., section: {key: value}}``) applied."""
        out = RunConfig(self.seed, copy.deepcopy(self.sections))
        defaults = default_sections()
        for sec, vals in (overrides or {}).items():
            if sec == "seed":
                if vals is not None:
                    out.seed = int(_coerce("run", "seed", 0, vals))
                continue
            if sec not in out.sections:
                raise ConfigError(f"unknown config section {sec!r}")
            if not isinstance(vals, dict):
                raise ConfigError(f"section {sec!r} must be a mapping")
            for key, value in vals.items():
                if key not in out.sections[sec]:
                    raise ConfigError(f"unknown config key {sec}.{key}")
                out.sections[sec][key] = _coerce(sec, key, defaults[sec][key], value)
        out.validate()
        return out

    def validate(self) -> None:
        try:
            self.hpcc_config(2)
            self.controller_config()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        m = self["metrics"]
        if m["K"] < 1 or m["n_boot"] < 0 or m["n_match"] < 1 or len(m["pac_range"]) != 2:
            raise ConfigError("metrics: K >= 1, n_boot >= 0, n_match >= 1 and a two-element pac_range are required")
        s = self["simulate"]
        if not 0.0 <= s["noise_rate"] <= 1.0:
            raise ConfigError("simulate.noise_rate must be in [0, 1]")

    def hpcc_config(self, vocab_size: int) -> HpccConfig:
        return HpccConfig(vocab_size=vocab_size, **self["model"])

    def controller_config(self, **changes) -> ControllerConfig:
        known = {f.name for f in fields(ControllerConfig)}
        kw = {k: v for k, v in self["controller"].items() if k in known}
        kw.update(changes)
        return ControllerConfig(**kw)

    def to_dict(self) -> dict:
        return {"seed": self.seed, **copy.deepcopy(self.sections)}


def read_config_file(path: str | Path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return raw


def load_config(path: str | Path | None = None, flags: dict | None = None, env=None) -> RunConfig:
    """Defaults, then the file at ``path`` (or ``$HPCALIGN_CONFIG``), then ``flags``."""
    env = os.environ if env is None else env
    path = path or env.get(CONFIG_ENV) or None
    cfg = RunConfig()
    if path:
        cfg = cfg.merged(read_config_file(path))
    return cfg.merged(flags or {})
