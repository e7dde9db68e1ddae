"""TOML configuration with ``[train]``, ``[clue]`` and ``[sweep]`` tables.

A top-level ``seed`` applies to all three; ``MOLECLUE_SEED`` overrides it.
"""
from __future__ import annotations

import os
from dataclasses import fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .clue import ClueConfig
from .harness import SweepConfig, _default_train
from .model import TEST_DIMS, Dims
from .training import TrainConfig

SEED_ENV = "MOLECLUE_SEED"


class ConfigError(ValueError):
    pass


def _pick(cls, table: dict, where: str) -> dict:
    known = {f.name for f in fields(cls)}
    extra = set(table) - known
    if extra:
        raise ConfigError(f"[{where}] unknown keys: {sorted(extra)}")
    return dict(table)


def train_config(table: dict, base: TrainConfig | None = None) -> TrainConfig:
    kw = _pick(TrainConfig, table, "train")
    if "dims" in kw:
        kw["dims"] = Dims(**{**TEST_DIMS.to_dict(), **kw["dims"]})
    return replace(base or TrainConfig(), **kw)


def load_config(path: str | Path | None = None, env: dict | None = None) -> SweepConfig:
    env = os.environ if env is None else env
    doc = {}
    if path is not None:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    unknown = set(doc) - {"train", "clue", "sweep", "seed"}
    if unknown:
        raise ConfigError(f"unknown tables: {sorted(unknown)}")
    seed = doc.get("seed")
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    train = train_config(doc.get("train", {}), _default_train())
    clue = ClueConfig(**_pick(ClueConfig, doc.get("clue", {}), "clue"))
    sweep_kw = _pick(SweepConfig, doc.get("sweep", {}), "sweep")
    for k in ("train", "clue"):
        sweep_kw.pop(k, None)
    if seed is not None:
        train, clue = replace(train, seed=seed), replace(clue, seed=seed)
        sweep_kw["seed"] = seed
    return SweepConfig(train=train, clue=clue, **sweep_kw)
