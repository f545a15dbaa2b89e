"""Flat TOML experiment configuration with strict schema validation."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .datasets import AugmentSpec, Dataset, SslSplit, make_dataset, split_ssl
from .lipschitz import D_Y_KINDS, AlpConfig
from .net import OptimizerConfig
from .numeric import Rng
from .trainer import MODES, TrainConfig


class ConfigError(ValueError):
    pass


def _pos_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v > 0


def _nonneg_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0


def _num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _nonneg(v):
    return _num(v) and v >= 0


def _pos(v):
    return _num(v) and v > 0


def _unit_open(v):
    return _num(v) and 0 < v < 1


def _bool(v):
    return isinstance(v, bool)


def _one_of(*options):
    return lambda v: v in options


def _int_list(v):
    return isinstance(v, list) and len(v) > 0 and all(_nonneg_int(x) for x in v)


def _num_list(v):
    return isinstance(v, list) and len(v) > 0 and all(_nonneg(x) for x in v)


def _widths(v):
    return isinstance(v, list) and len(v) >= 2 and all(_pos_int(x) for x in v)


# key -> (default, validator, description of the accepted values)
SCHEMA = {
    "dataset": ("two-moons", _one_of("two-moons", "circles", "blobs"), "two-moons | circles | blobs"),
    "n": (2000, _pos_int, "positive integer"),
    "noise": (0.1, _nonneg, "number >= 0"),
    "factor": (0.5, _unit_open, "number in (0, 1)"),
    "centers": (3, _pos_int, "positive integer"),
    "m": (6, _pos_int, "positive integer"),
    "balanced": (True, _bool, "boolean"),
    "holdout_fraction": (0.2, lambda v: _num(v) and 0 <= v < 1, "number in [0, 1)"),
    "out_dir": ("out", lambda v: isinstance(v, str) and v != "", "nonempty string"),
    "repeat_seeds": ([0, 1, 2, 3, 4], _int_list, "nonempty list of integers >= 0"),
    "mode": ("mixup-lr", _one_of(*MODES), " | ".join(MODES)),
    "widths": ([2, 64, 64, 2], _widths, "list of >= 2 positive integers"),
    "activation": ("relu", _one_of("relu", "tanh", "linear"), "relu | tanh | linear"),
    "alpha": (0.75, _pos, "number > 0"),
    "tau": (0.5, _pos, "number > 0"),
    "P": (2, _pos_int, "positive integer"),
    "lambda_u_max": (10.0, _nonneg, "number >= 0"),
    "ramp_steps": (1000, _nonneg_int, "integer >= 0"),
    "zeta": (2.0, _nonneg, "number >= 0"),
    "eps_r": (0.5, _pos, "number > 0"),
    "xi": (1e-6, _pos, "number > 0"),
    "k_iters": (1, _pos_int, "positive integer"),
    "gamma": (0.0, _nonneg, "number >= 0"),
    "d_y": ("kl-softmax", _one_of(*D_Y_KINDS), " | ".join(D_Y_KINDS)),
    "alp_squared": (False, _bool, "boolean"),
    "alp_on_mixed": (False, _bool, "boolean"),
    "gp_target": (0.0, _nonneg, "number >= 0"),
    "jitter_sigma": (0.05, _nonneg, "number >= 0"),
    "rotate_max_degrees": (10.0, _nonneg, "number >= 0"),
    "optimizer": ("adam", _one_of("adam", "sgd"), "adam | sgd"),
    "lr": (2e-3, _pos, "number > 0"),
    "beta1": (0.9, lambda v: _num(v) and 0 <= v < 1, "number in [0, 1)"),
    "beta2": (0.999, lambda v: _num(v) and 0 <= v < 1, "number in [0, 1)"),
    "adam_eps": (1e-8, _pos, "number > 0"),
    "batch_size": (32, _pos_int, "positive integer"),
    "total_steps": (4000, _pos_int, "positive integer"),
    "eval_every": (100, _pos_int, "positive integer"),
    "khat_pairs": (0, _nonneg_int, "integer >= 0"),
    "eval_target": ("holdout", _one_of("holdout", "unlabeled-pool"), "holdout | unlabeled-pool"),
    "median_k": (20, _pos_int, "positive integer"),
    "epsilons": ([0.007, 0.07], _num_list, "nonempty list of numbers >= 0"),
    "zetas": ([0, 1, 2, 3], _num_list, "nonempty list of numbers >= 0"),
    "audit_pairs": (100000, _pos_int, "positive integer"),
    "audit_triples": (10000, _pos_int, "positive integer"),
    "audit_safety": (1.05, lambda v: _num(v) and v >= 1, "number >= 1"),
    "grid_size": (200, lambda v: _pos_int(v) and v >= 2, "integer >= 2"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return from_dict({**self.values, **kw})

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        v = {**self.values, **overrides}
        return TrainConfig(
            mode=v["mode"],
            widths=tuple(v["widths"]),
            activation=v["activation"],
            alpha=float(v["alpha"]),
            tau=float(v["tau"]),
            P=v["P"],
            lambda_u_max=float(v["lambda_u_max"]),
            ramp_steps=v["ramp_steps"],
            zeta=float(v["zeta"]),
            alp=AlpConfig(eps_r=float(v["eps_r"]), xi=float(v["xi"]), k_iters=v["k_iters"],
                          gamma=float(v["gamma"]), d_y_kind=v["d_y"], squared=v["alp_squared"],
                          on_degenerate="keep-random"),
            alp_on_mixed=v["alp_on_mixed"],
            gp_target=float(v["gp_target"]),
            augment=AugmentSpec(float(v["jitter_sigma"]), float(np.deg2rad(v["rotate_max_degrees"]))),
            optimizer=OptimizerConfig(kind=v["optimizer"], lr=float(v["lr"]), beta1=float(v["beta1"]),
                                      beta2=float(v["beta2"]), eps=float(v["adam_eps"])),
            batch_size=v["batch_size"],
            total_steps=v["total_steps"],
            eval_every=v["eval_every"],
            khat_pairs=v["khat_pairs"],
            seed=seed,
            eval_target=v["eval_target"],
        )

    def dataset_and_split(self, seed: int) -> tuple[Dataset, SslSplit]:
        """Per-seed data draw: dataset from stream 1, split from stream 2 of ``Rng(seed)``."""
        root = Rng(seed)
        ds = make_dataset(self.dataset, self.n, float(self.noise), root.child(1),
                          factor=float(self.factor), centers=self.centers)
        sp = split_ssl(ds, self.m, self.balanced, root.child(2), float(self.holdout_fraction))
        return ds, sp


def from_dict(raw: dict) -> ExperimentConfig:
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for key, (default, check, desc) in SCHEMA.items():
        v = raw.get(key, default)
        if isinstance(v, dict):
            raise ConfigError(f"{key}: nested tables are not allowed")
        if not check(v):
            raise ConfigError(f"{key}: expected {desc}, got {v!r}")
        values[key] = v
    if values["widths"][0] != 2:
        raise ConfigError(f"widths: input width must be 2 for {values['dataset']}, got {values['widths'][0]}")
    n_classes = values["centers"] if values["dataset"] == "blobs" else 2
    if values["widths"][-1] != n_classes:
        raise ConfigError(f"widths: output width must equal the class count {n_classes}")
    if values["balanced"] and values["m"] < n_classes:
        raise ConfigError("m: balanced labeling needs at least one label per class")
    if values["m"] >= values["n"] * (1 - values["holdout_fraction"]):
        raise ConfigError("m: labeled count must leave an unlabeled pool")
    if values["eval_target"] == "holdout" and values["holdout_fraction"] == 0:
        raise ConfigError("eval_target: holdout evaluation needs holdout_fraction > 0")
    try:
        # Surfaces cross-field errors (e.g. zeta with an unknown mode) before any compute.
        ExperimentConfig(values).train_config(0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(values)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return from_dict(raw)


def default_config() -> ExperimentConfig:
    return from_dict({})


__all__ = ["ConfigError", "ExperimentConfig", "SCHEMA", "default_config", "from_dict", "load_config"]
