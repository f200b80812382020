import json

import numpy as np
import pytest

from avflow.config import ConfigError, RunConfig, config_from_dict, load_config, parse_config


def valid_config() -> dict:
    return {
        "model": {
            "n_blocks": 2, "model_dim": 32, "n_heads": 4, "head_dim": 8,
            "ffn_mult": 2, "patch": [1, 2, 2],
        },
        "world": {"alphabet": 4, "noise_std": 0.05, "bank_seed": 3},
        "train": {"stage": 1, "steps": 5, "batch_size": 2, "lr": 0.001, "seed": 1},
        "sample": {"omega": 3.0, "steps": 10, "task": "T2AV", "seed": 0},
        "paths": {"out_dir": "runs/test"},
    }


class TestParsing:
    def test_valid_config(self):
        run = parse_config(valid_config())
        assert run.model.model_dim == 32
        assert run.train.hyper.lr == 0.001
        assert run.world.alphabet == 4
        assert run.bank_seed == 3
        assert run.out_dir == "runs/test"

    def test_empty_object_uses_defaults(self):
        run = parse_config({})
        assert run.model.model_dim == 64
        assert run.train.hyper.lr == 1e-5  # reference default

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="optimizer"):
            parse_config({"optimizer": {}})

    def test_unknown_key_with_path(self):
        with pytest.raises(ConfigError, match="world.mouht"):
            parse_config({"world": {"mouht": [[1, 1]]}})

    def test_type_errors_carry_paths(self):
        with pytest.raises(ConfigError, match="train.lr"):
            parse_config({"train": {"lr": "fast"}})
        with pytest.raises(ConfigError, match="model.patch"):
            parse_config({"model": {"patch": [1, 2]}})
        with pytest.raises(ConfigError, match="model.n_blocks"):
            parse_config({"model": {"n_blocks": 1.5}})
        with pytest.raises(ConfigError, match="world.mouth"):
            parse_config({"world": {"mouth": [[1, 2, 3]]}})

    def test_bool_is_not_int(self):
        with pytest.raises(ConfigError, match="train.steps"):
            parse_config({"train": {"steps": True}})

    def test_top_level_must_be_object(self):
        with pytest.raises(ConfigError):
            parse_config([1, 2, 3])


class TestCrossValidation:
    def test_dim_head_mismatch(self):
        cfg = valid_config()
        cfg["model"]["n_heads"] = 3
        with pytest.raises(ConfigError, match="model"):
            parse_config(cfg)

    def test_patch_must_divide_world(self):
        cfg = valid_config()
        cfg["model"]["patch"] = [3, 2, 2]
        with pytest.raises(ConfigError, match="patch"):
            parse_config(cfg)

    def test_condition_dims_must_match(self):
        cfg = valid_config()
        cfg["model"]["text_len"] = 12
        with pytest.raises(ConfigError, match="text_len"):
            parse_config(cfg)

    def test_world_invariants_via_dataclass(self):
        cfg = valid_config()
        cfg["world"]["alphabet"] = 1
        with pytest.raises(ConfigError, match="world"):
            parse_config(cfg)

    def test_stage_validation(self):
        cfg = valid_config()
        cfg["train"]["stage"] = 5
        with pytest.raises(ConfigError, match="train"):
            parse_config(cfg)

    def test_sampler_validation(self):
        cfg = valid_config()
        cfg["sample"]["steps"] = 0
        with pytest.raises(ConfigError, match="sample"):
            parse_config(cfg)


class TestRoundTrip:
    def test_to_dict_parses_back(self):
        run = parse_config(valid_config())
        again = config_from_dict(run.to_dict())
        assert again.to_dict() == run.to_dict()

    def test_default_round_trip(self):
        run = RunConfig()
        again = config_from_dict(run.to_dict())
        assert again.to_dict() == run.to_dict()


class TestLoadConfig:
    def test_load_from_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps(valid_config()))
        run = load_config(path)
        assert run.train.steps == 5

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config(path)


_JUNK = [None, "junk", -1, 1.5, [], {}, True, [1], {"a": 1}, -7, 2.5]


def _mutate(obj, rng):
    """Randomly corrupt a JSON-able object."""
    action = rng.integers(0, 6)
    if isinstance(obj, dict) and obj and action == 0:
        key = list(obj)[rng.integers(0, len(obj))]
        del obj[key]
    elif isinstance(obj, dict) and action == 1:
        obj["x" * int(rng.integers(1, 8))] = float(rng.random())
    elif isinstance(obj, dict) and obj and action == 2:
        key = list(obj)[rng.integers(0, len(obj))]
        obj[key] = _JUNK[rng.integers(0, len(_JUNK))]
    elif isinstance(obj, dict) and obj:
        key = list(obj)[rng.integers(0, len(obj))]
        if isinstance(obj[key], dict):
            _mutate(obj[key], rng)
        else:
            obj[key] = _JUNK[rng.integers(0, len(_JUNK))]
    return obj


def test_fuzz_validation_never_crashes(tmp_path):
    """100 mutated configs: each either validates or raises a clean ConfigError."""
    rng = np.random.default_rng(0)
    base = valid_config()
    ok, rejected = 0, 0
    for i in range(100):
        candidate = json.loads(json.dumps(base))
        for _ in range(int(rng.integers(1, 4))):
            _mutate(candidate, rng)
        path = tmp_path / f"f{i}.json"
        if rng.random() < 0.1:
            path.write_text(json.dumps(candidate)[: int(rng.integers(0, 50))])
        else:
            path.write_text(json.dumps(candidate))
        try:
            load_config(path)
            ok += 1
        except ConfigError as err:
            assert str(err)  # carries a field-path diagnostic
            rejected += 1
    assert ok + rejected == 100
    assert rejected > 0
