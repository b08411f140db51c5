"""Flat dotted-key run configuration (JSON file + command-line overrides)."""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

from .data import SynthConfig
from .losses import LossWeights
from .meta import MetaConfig
from .network import NetConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def _section(prefix: str, cls, skip=()) -> dict:
    inst = cls()
    out = {}
    for f in fields(cls):
        if f.name in skip or f.name.startswith("_"):
            continue
        value = getattr(inst, f.name)
        out[f"{prefix}.{f.name}"] = list(value) if isinstance(value, tuple) else value
    return out


DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "runs/default",
    "data.root": "data",
    "data.train_domains": None,
    "data.test_domain": None,
    "data.dev_fraction": 0.2,
    **_section("synth", SynthConfig, skip=("seed",)),
    **_section("model", NetConfig, skip=("in_channels", "n_parsing", "depth_size")),
    **_section("meta", MetaConfig),
    **_section("loss", LossWeights),
}

# keys whose default is None and what they accept instead
_NULLABLE = {
    "data.train_domains": list,
    "data.test_domain": str,
    "synth.hue_shifts": list,
    "synth.blur_radii": list,
    "synth.noise_sigmas": list,
    "synth.spoof_periods": list,
    "meta.switch_iteration": int,
}


def _type_ok(key: str, value, default) -> bool:
    if value is None:
        return key in _NULLABLE
    if key in _NULLABLE and default is None:
        expected = _NULLABLE[key]
        return isinstance(value, expected) and not isinstance(value, bool)
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


class RunConfig(dict):
    """Fully resolved configuration; every key has a documented default."""

    @classmethod
    def resolve(cls, path: str | Path | None = None, overrides: dict | None = None) -> "RunConfig":
        raw: dict = {}
        problems = []
        if path is not None:
            try:
                loaded = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
            if not isinstance(loaded, dict):
                raise ConfigError([f"config {path} must be a JSON object of dotted keys"])
            raw.update(loaded)
        raw.update(overrides or {})
        cfg = cls(DEFAULTS)
        for key, value in raw.items():
            if key not in DEFAULTS:
                problems.append(f"unknown key {key!r}")
            elif not _type_ok(key, value, DEFAULTS[key]):
                problems.append(f"bad value for {key!r}: {value!r}")
            else:
                cfg[key] = float(value) if isinstance(DEFAULTS[key], float) else value
        if problems:
            raise ConfigError(problems)
        try:
            cfg.synth_config()
            cfg.net_config()
            cfg.meta_config()
            cfg.loss_weights()
        except (ValueError, TypeError) as exc:
            raise ConfigError([str(exc)]) from exc
        return cfg

    def _pick(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.items() if k.startswith(prefix + ".")}

    def synth_config(self) -> SynthConfig:
        return SynthConfig(seed=self["seed"], **self._pick("synth"))

    def net_config(self) -> NetConfig:
        return NetConfig(**self._pick("model"))

    def meta_config(self) -> MetaConfig:
        return MetaConfig(**self._pick("meta"))

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self._pick("loss"))

    def to_json(self) -> str:
        return json.dumps(dict(sorted(self.items())), indent=1)


def parse_override(text: str) -> tuple[str, object]:
    """`key=value` with the value parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError([f"override {text!r} is not of the form key=value"])
    key, value = text.split("=", 1)
    try:
        return key.strip(), json.loads(value)
    except json.JSONDecodeError:
        return key.strip(), value
