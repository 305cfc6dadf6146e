import json

import pytest

from fraug.config import (
    ConfigError,
    ExperimentConfig,
    dump_config,
    env_overrides,
    from_dict,
    load_config,
    replace_path,
    to_dict,
)


def test_defaults_validate_and_roundtrip(tmp_path):
    cfg = ExperimentConfig().validate()
    assert from_dict(to_dict(cfg)) == cfg
    dump_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


def test_precedence_file_env_override(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"rounds": 7, "lr": 0.5}, "strategy": {"name": "fedbn"}}))
    env = {"FRAUG_TRAIN__ROUNDS": "9", "FRAUG_RUN__SEEDS": "[4, 5]", "HOME": "/x"}
    cfg = load_config(path, overrides={"train.lr": 0.25}, environ=env)
    assert cfg.train.rounds == 9
    assert cfg.train.lr == 0.25
    assert cfg.strategy.name == "fedbn"
    assert cfg.run.seeds == (4, 5)


def test_env_parsing():
    env = {"FRAUG_STRATEGY__NAME": "fedavg", "FRAUG_TRAIN__LR": "0.1", "FRAUG_PURE_PYTHON": "1"}
    assert env_overrides(env) == {"strategy.name": "fedavg", "train.lr": 0.1}


@pytest.mark.parametrize(
    "payload,match",
    [
        ({"train": {"roundz": 3}}, "train.roundz: unknown"),
        ({"train": {"rounds": "ten"}}, "train.rounds: expected an integer"),
        ({"train": {"rounds": True}}, "train.rounds: expected an integer"),
        ({"toggles": {"use_stage2": 1}}, "expected true/false"),
        ({"strategy": {"name": "fedmagic"}}, "unknown strategy"),
        ({"run": {"precision": "f16"}}, "precision"),
        ({"run": {"seeds": []}}, "at least one seed"),
        ({"data": {"num_domains": 0}}, "zero clients"),
        ({"train": {"optimizer": "lbfgs"}}, "train.optimizer"),
        ({"train": {"batch_size": 1}}, "batch_size"),
        ({"strategy": {"lambda_proto_max": 0.0}}, "lambda_proto_max"),
        ({"network": []}, "network: expected an object"),
    ],
)
def test_rejections_name_the_path(tmp_path, payload, match):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(payload))
    with pytest.raises(ConfigError, match=match):
        load_config(path)


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(path)


def test_replace_path():
    cfg = replace_path(ExperimentConfig(), network__generator__hidden=8, strategy__name="fedprox")
    assert cfg.network.generator.hidden == 8 and cfg.strategy.name == "fedprox"
    assert ExperimentConfig().network.generator.hidden != 8
    with pytest.raises(ConfigError):
        replace_path(ExperimentConfig(), train__nope=1)


def test_tuples_and_optionals():
    cfg = from_dict({"network": {"classifier": {"hidden": [4, 4]}}, "strategy": {"ramp_syn_steps": None}})
    assert cfg.network.classifier.hidden == (4, 4)
    assert cfg.strategy.ramp_syn_steps is None
    assert from_dict({"strategy": {"alpha": 2}}).strategy.alpha == 2.0
