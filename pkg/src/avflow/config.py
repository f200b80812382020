"""Strict JSON run configuration.

Every field is type-checked against a schema, unknown keys are rejected, and
cross-field consistency (patch divisibility, matching condition dimensions)
is validated. All failures raise ConfigError carrying the offending field
path; arbitrary input must never crash the validator with anything else.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .model import ModelConfig
from .sampler import GuidanceSpec
from .toyworld import ToyWorldConfig
from .training import OptimizerHyper, TrainConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.reason = message


# field name -> type tag; tags: int, num, str, bool, int2, int3, cells, strlist
_MODEL_FIELDS = {
    "n_blocks": "int",
    "model_dim": "int",
    "n_heads": "int",
    "head_dim": "int",
    "ffn_mult": "int",
    "patch": "int3",
    "c_video": "int",
    "c_audio": "int",
    "text_dim": "int",
    "text_len": "int",
    "ref_len": "int",
}

_WORLD_FIELDS = {
    "alphabet": "int",
    "frames": "int",
    "height": "int",
    "width": "int",
    "c_video": "int",
    "audio_rate": "int",
    "c_audio": "int",
    "timbre_dim": "int",
    "mouth": "cells",
    "noise_std": "num",
    "text_len": "int",
    "ref_len": "int",
    "ref_frames": "int2",
    "text_dim": "int",
    "bank_seed": "int",
}

_TRAIN_FIELDS = {
    "stage": "int",
    "steps": "int",
    "batch_size": "int",
    "lr": "num",
    "beta1": "num",
    "beta2": "num",
    "eps": "num",
    "weight_decay": "num",
    "clip_norm": "num",
    "cfg_dropout": "num",
    "task_cycle": "strlist",
    "seed": "int",
    "checkpoint_every": "int",
    "metrics_name": "str",
    "checkpoint_name": "str",
}

_SAMPLE_FIELDS = {
    "omega": "num",
    "steps": "int",
    "task": "str",
    "seed": "int",
    "method": "str",
}

_PATHS_FIELDS = {"out_dir": "str"}

_SECTIONS = {
    "model": _MODEL_FIELDS,
    "world": _WORLD_FIELDS,
    "train": _TRAIN_FIELDS,
    "sample": _SAMPLE_FIELDS,
    "paths": _PATHS_FIELDS,
}

_HYPER_KEYS = ("lr", "beta1", "beta2", "eps", "weight_decay", "clip_norm")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    world: ToyWorldConfig = field(default_factory=ToyWorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: GuidanceSpec = field(default_factory=GuidanceSpec)
    out_dir: str = "runs/default"
    bank_seed: int = 0

    def to_dict(self) -> dict:
        train = asdict(self.train)
        hyper = train.pop("hyper")
        train.update(hyper)
        if train["task_cycle"] is not None:
            train["task_cycle"] = list(train["task_cycle"])
        else:
            train.pop("task_cycle")
        world = asdict(self.world)
        world["mouth"] = [list(c) for c in self.world.mouth]
        world["ref_frames"] = list(self.world.ref_frames)
        world["bank_seed"] = self.bank_seed
        model = asdict(self.model)
        model["patch"] = list(self.model.patch)
        return {
            "model": model,
            "world": world,
            "train": train,
            "sample": asdict(self.sample),
            "paths": {"out_dir": self.out_dir},
        }


def _check_type(path: str, value, tag: str):
    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected integer, got {type(value).__name__}")
        return value
    if tag == "num":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected number, got {type(value).__name__}")
        return float(value)
    if tag == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected string, got {type(value).__name__}")
        return value
    if tag == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected boolean, got {type(value).__name__}")
        return value
    if tag in ("int2", "int3"):
        n = int(tag[-1])
        if (
            not isinstance(value, list)
            or len(value) != n
            or any(isinstance(v, bool) or not isinstance(v, int) for v in value)
        ):
            raise ConfigError(path, f"expected a list of {n} integers")
        return tuple(value)
    if tag == "cells":
        if not isinstance(value, list) or not value:
            raise ConfigError(path, "expected a non-empty list of [h, w] pairs")
        cells = []
        for i, cell in enumerate(value):
            if (
                not isinstance(cell, list)
                or len(cell) != 2
                or any(isinstance(v, bool) or not isinstance(v, int) for v in cell)
            ):
                raise ConfigError(f"{path}[{i}]", "expected an [h, w] integer pair")
            cells.append(tuple(cell))
        return tuple(cells)
    if tag == "strlist":
        if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
            raise ConfigError(path, "expected a list of strings")
        return tuple(value)
    raise AssertionError(f"unknown schema tag {tag}")


def _parse_section(name: str, obj, fields: dict) -> dict:
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError(name, "expected an object")
    parsed = {}
    for key, value in obj.items():
        if key not in fields:
            raise ConfigError(f"{name}.{key}", "unknown key")
        parsed[key] = _check_type(f"{name}.{key}", value, fields[key])
    return parsed


def parse_config(obj) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("$", "top level must be an object")
    for key in obj:
        if key not in _SECTIONS:
            raise ConfigError(key, "unknown section")
    sections = {
        name: _parse_section(name, obj.get(name), fields)
        for name, fields in _SECTIONS.items()
    }

    def build(path, factory, kwargs):
        try:
            return factory(**kwargs)
        except (ValueError, TypeError) as err:
            raise ConfigError(path, str(err)) from err

    model = build("model", ModelConfig, sections["model"])

    world_kwargs = dict(sections["world"])
    bank_seed = world_kwargs.pop("bank_seed", 0)
    world = build("world", ToyWorldConfig, world_kwargs)

    train_kwargs = dict(sections["train"])
    hyper_kwargs = {k: train_kwargs.pop(k) for k in _HYPER_KEYS if k in train_kwargs}
    hyper = build("train", OptimizerHyper, hyper_kwargs)
    train = build("train", TrainConfig, {**train_kwargs, "hyper": hyper})

    sample = build("sample", GuidanceSpec, sections["sample"])
    out_dir = sections["paths"].get("out_dir", "runs/default")

    run = RunConfig(
        model=model, world=world, train=train, sample=sample,
        out_dir=out_dir, bank_seed=bank_seed,
    )
    cross_validate(run)
    return run


def cross_validate(run: RunConfig) -> None:
    m, w = run.model, run.world
    pt, ph, pw = m.patch
    if pt < 1 or ph < 1 or pw < 1:
        raise ConfigError("model.patch", "patch extents must be positive")
    if w.frames % pt or w.height % ph or w.width % pw:
        raise ConfigError(
            "model.patch",
            f"patch {m.patch} does not divide world extents "
            f"({w.frames}, {w.height}, {w.width})",
        )
    if m.head_dim % 2:
        raise ConfigError("model.head_dim", "head_dim must be even for rotary embedding")
    for name in ("c_video", "c_audio", "text_dim", "text_len", "ref_len"):
        if getattr(m, name) != getattr(w, name):
            raise ConfigError(
                f"model.{name}",
                f"must match world.{name} ({getattr(m, name)} != {getattr(w, name)})",
            )


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as err:
        raise ConfigError("$", f"cannot read config: {err}") from err
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise ConfigError("$", f"invalid JSON: {err}") from err
    return parse_config(obj)


def config_from_dict(obj: dict) -> RunConfig:
    return parse_config(obj)
