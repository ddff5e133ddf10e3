"""Desk-scale models shared by the empirical tests.

Training is cached per (loss, lambda, seed) so each model is trained once
per session no matter how many tests read it.
"""

from __future__ import annotations

import functools
from dataclasses import replace
from pathlib import Path

from cascadenet.config import build, parse_config_text
from cascadenet.trainer import TrainConfig, train

CONFIG_PATH = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"
SEEDS = (0, 1, 2)
VARIANTS = {"td0": dict(loss="td", lam=0.0), "td1": dict(loss="td", lam=1.0), "ce": dict(loss="ce")}


@functools.lru_cache(maxsize=None)
def base_config() -> TrainConfig:
    return build(TrainConfig, parse_config_text(CONFIG_PATH.read_text()))


def config(variant: str, seed: int) -> TrainConfig:
    return replace(base_config(), seed=seed, **VARIANTS[variant])


@functools.lru_cache(maxsize=None)
def model(variant: str, seed: int):
    """TrainResult for one variant and seed."""
    return train(config(variant, seed))


def val_accuracy(result, t: int) -> float:
    last = max(r[0] for r in result.metrics)
    return next(r[3] for r in result.metrics if r[0] == last and r[1] == t and r[2] == "val")
