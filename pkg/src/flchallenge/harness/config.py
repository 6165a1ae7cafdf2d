"""Experiment configuration: YAML file plus dotted-path overrides."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from ..aggregate import AggregatorSpec
from ..errors import ConfigError
from ..flcore import RoundConfig
from ..model import ModelSpec
from ..synthdata import (DEFAULT_DIM, DEFAULT_NOISE_SD, DEFAULT_SHIFT_NORM, SiteSpec,
                         default_site_specs, generate_federation, load_federation)

DEFAULTS: dict[str, Any] = {
    "output_dir": "out",
    "data": {"d": DEFAULT_DIM, "noise_sd": DEFAULT_NOISE_SD, "shift_norm": DEFAULT_SHIFT_NORM,
             "scale": 0.01, "path": None, "sites": None},
    "model": {"kind": "MLP", "hidden": 16},
    "rounds": {"n_rounds": 100, "local_epochs": 1, "batch_size": 32, "lr_local": 0.1,
               "aggregator": {"kind": "FedAvg"}},
    "warm_start": None,
    "evaluation": {"split": "Test2", "groupings": ["BySite", "Overall"]},
    "leaderboard": {"n_trials": 1000, "alpha": 0.05, "test": "wilcoxon",
                    "include_image_level": True,
                    "bundles": None},
}


@dataclass(frozen=True)
class DataConfig:
    d: int = DEFAULT_DIM
    noise_sd: float = DEFAULT_NOISE_SD
    shift_norm: float = DEFAULT_SHIFT_NORM
    scale: float = 0.01
    path: str | None = None
    sites: tuple[SiteSpec, ...] | None = None

    def site_specs(self, seed: int) -> list[SiteSpec]:
        if self.sites is not None:
            return list(self.sites)
        return default_site_specs(seed, self.d, self.scale, self.shift_norm)

    def load(self, seed: int):
        if self.path:
            if not Path(self.path).exists():
                raise ConfigError(f"file {self.path} does not exist", "data.path")
            return load_federation(self.path)
        return generate_federation(self.site_specs(seed), self.d, self.noise_sd)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: Path
    data: DataConfig
    model: ModelSpec
    rounds: RoundConfig
    warm_start: Path | None = None
    split: str = "Test2"
    groupings: tuple[str, ...] = ("BySite", "Overall")
    n_trials: int = 1000
    alpha: float = 0.05
    test: str = "wilcoxon"
    include_image_level: bool = True
    bundles: tuple[str, ...] | None = None
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def config_hash(self) -> str:
        """Hash of the experiment settings; where outputs go does not count."""
        settings = {k: v for k, v in self.raw.items() if k != "output_dir"}
        text = json.dumps(settings, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars."""
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", "overrides")
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into {p!r}", key)
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def build_config(raw: dict) -> ExperimentConfig:
    if raw.get("seed") is None:
        raise ConfigError("a seed is required", "seed")
    full = _merge(DEFAULTS, raw)
    try:
        seed = int(full["seed"])
    except (TypeError, ValueError):
        raise ConfigError("must be an integer", "seed") from None

    data_raw = dict(full["data"])
    sites = data_raw.pop("sites", None)
    unknown = set(data_raw) - {"d", "noise_sd", "shift_norm", "scale", "path"}
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", "data")
    data = DataConfig(
        sites=tuple(SiteSpec.from_dict(s) for s in sites) if sites else None, **data_raw)
    if data.d < 2:
        raise ConfigError("must be >= 2", "data.d")
    if data.sites:
        for spec in data.sites:
            spec.validate(data.d)

    model_raw = dict(full["model"])
    model_raw.setdefault("d", data.d)
    model = ModelSpec.from_dict(model_raw)

    rounds_raw = dict(full["rounds"])
    rounds_raw["aggregator"] = AggregatorSpec.from_dict(rounds_raw.get("aggregator") or {})
    private = rounds_raw.get("private_segments")
    if private == "head":
        rounds_raw["private_segments"] = model.head_segments()
    rounds = RoundConfig.from_dict(rounds_raw)

    ev = full["evaluation"]
    lb = full["leaderboard"]
    warm = full.get("warm_start")
    if warm is not None and not Path(warm).exists():
        raise ConfigError(f"file {warm} does not exist", "warm_start")
    return ExperimentConfig(
        seed=seed,
        output_dir=Path(full["output_dir"]),
        data=data,
        model=model,
        rounds=rounds,
        warm_start=Path(warm) if warm else None,
        split=ev.get("split", "Test2"),
        groupings=tuple(ev.get("groupings", ("BySite", "Overall"))),
        n_trials=int(lb.get("n_trials", 1000)),
        alpha=float(lb.get("alpha", 0.05)),
        test=str(lb.get("test", "wilcoxon")),
        include_image_level=bool(lb.get("include_image_level", True)),
        bundles=tuple(lb["bundles"]) if lb.get("bundles") else None,
        raw=full,
    )


def load_config(path=None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(str(exc), "config") from None
        if not isinstance(raw, dict):
            raise ConfigError("top level must be a mapping", "config")
    return build_config(apply_overrides(raw, overrides))
