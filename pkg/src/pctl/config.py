"""Flat dotted-key configuration (TOML) resolved onto the training and generator configs."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

import tomli

from .data import GeneratorConfig
from .encoder import DOMAINS
from .trainer import TrainConfig

SPLITS = ("train", "val", "test")

# dotted key -> TrainConfig field
TRAIN_KEYS = {
    "loss.lambda": "lam",
    "loss.r": "r",
    "loss.r_prime": "r_prime",
    "cluster.k_schedule": "k_schedule",
    "cluster.tau_prime": "tau_prime",
    "cluster.alpha": "alpha",
    "model.gamma": "gamma",
    "model.d": "d",
    "model.hidden": "hidden",
    "model.layers": "layers",
    "model.cls_hidden": "cls_hidden",
    "model.activation": "activation",
    "optim.lr": "lr",
    "optim.body_lr": "body_lr",
    "optim.momentum": "momentum",
    "train.batch_size": "batch_size",
    "train.epochs": "epochs",
    "train.pretrain_epochs": "pretrain_epochs",
    "train.seed": "seed",
    "train.mode": "mode",
}
GENERATOR_KEYS = {f"generator.{f.name}": f.name for f in fields(GeneratorConfig) if f.name != "counts"}
COUNT_KEYS = {f"generator.counts.{dom}.{split}": (dom, split) for dom in DOMAINS for split in SPLITS}
ALL_KEYS = sorted([*TRAIN_KEYS, *GENERATOR_KEYS, *COUNT_KEYS])

MODE_ALIASES = {"pctl": "pctl", "target-only": "target_only", "target_only": "target_only", "fine-tune": "fine_tune", "fine_tune": "fine_tune"}


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message)


@dataclass
class ResolvedConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def flat(self) -> dict:
        """Every known key with its resolved value, in sorted key order."""
        out = {}
        for key, name in TRAIN_KEYS.items():
            v = getattr(self.train, name)
            out[key] = list(v) if isinstance(v, tuple) else v
        for key, name in GENERATOR_KEYS.items():
            out[key] = getattr(self.generator, name)
        for key, (dom, split) in COUNT_KEYS.items():
            out[key] = self.generator.counts[dom][split]
        return dict(sorted(out.items()))


def _flatten(table: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in table.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, tuple):
        if isinstance(value, int) and not isinstance(value, bool):
            value = [value]
        ok = isinstance(value, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in value)
        value = tuple(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"config key {key!r}: expected {type(default).__name__}, got {value!r}", key)
    return value


def apply(cfg: ResolvedConfig, values: dict) -> ResolvedConfig:
    """Return a copy of ``cfg`` with the flat dotted ``values`` applied."""
    train_kw, gen_kw = {}, {}
    counts = {dom: dict(cfg.generator.counts[dom]) for dom in DOMAINS}
    for key, value in values.items():
        if key in TRAIN_KEYS:
            name = TRAIN_KEYS[key]
            if name == "mode":
                if value not in MODE_ALIASES:
                    raise ConfigError(f"config key {key!r}: unknown mode {value!r}", key)
                value = MODE_ALIASES[value]
            train_kw[name] = _coerce(key, value, getattr(cfg.train, name))
        elif key in GENERATOR_KEYS:
            name = GENERATOR_KEYS[key]
            gen_kw[name] = _coerce(key, value, getattr(cfg.generator, name))
        elif key in COUNT_KEYS:
            dom, split = COUNT_KEYS[key]
            counts[dom][split] = _coerce(key, value, 0)
        else:
            raise ConfigError(f"unknown config key {key!r}", key)
    return ResolvedConfig(replace(cfg.train, **train_kw), replace(cfg.generator, counts=counts, **gen_kw))


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with a TOML value; bare words are taken as strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key, value


def load_config(path=None, overrides: Iterable[str] = ()) -> ResolvedConfig:
    cfg = ResolvedConfig()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                table = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = apply(cfg, _flatten(table))
    cfg = apply(cfg, dict(parse_override(o) for o in overrides))
    try:
        cfg.train.validate()
        cfg.generator.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def dump_toml(cfg: ResolvedConfig) -> str:
    """Flat dotted TOML text for ``cfg``; loading it back gives the same config."""
    lines = []
    for key, v in cfg.flat().items():
        if isinstance(v, str):
            lines.append(f'{key} = "{v}"')
        elif isinstance(v, list):
            lines.append(f"{key} = [{', '.join(str(x) for x in v)}]")
        else:
            lines.append(f"{key} = {v!r}")
    return "\n".join(lines) + "\n"


def default_config_dir() -> Path:
    return Path(__file__).resolve().parent / "configs"


def desk_config(overrides: Iterable[str] = ()) -> ResolvedConfig:
    """The shipped desk-scale training settings for the synthetic transfer experiment."""
    return load_config(default_config_dir() / "desk.toml", overrides)


__all__ = ["ALL_KEYS", "ConfigError", "ResolvedConfig", "apply", "desk_config", "dump_toml", "load_config", "parse_override"]
