import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from knse.corpus import SplitMode, SplitSpec
from knse.experiments import ConfigError, ExperimentConfig, require_path


def test_json_round_trip():
    cfg = ExperimentConfig()
    cfg.split = SplitSpec(SplitMode.BY_SYMPTOM, (0.5, 0.25, 0.25), 9)
    cfg.encoder.d = 32
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert again.digest() == cfg.digest()


@given(st.integers(1, 10), st.floats(0, 1), st.integers(0, 2 ** 31), st.sampled_from(["soft", "hard"]))
def test_round_trip_property(window, rate, seed, mode):
    cfg = ExperimentConfig(window=window, swap_rate=rate, model_seed=seed)
    cfg.ssr.prompt_mode = mode
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_digest_tracks_changes():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.digest() == b.digest()
    b.train.learning_rate = 5e-4
    assert a.digest() != b.digest()


def test_unknown_keys_name_the_path():
    with pytest.raises(ValueError, match="unknown field"):
        ExperimentConfig.from_dict({"windw": 5})
    with pytest.raises(ValueError, match=r"^encoder\..*unknown field.*'dd'"):
        ExperimentConfig.from_dict({"encoder": {"dd": 3}})


@pytest.mark.parametrize("change, path", [
    (lambda c: setattr(c.encoder, "heads", 3), "encoder"),
    (lambda c: setattr(c.train, "learning_rate", -1.0), "train"),
    (lambda c: setattr(c.ser_train, "batch_size", 0), "ser_train"),
    (lambda c: setattr(c.ssr, "prompt_mode", "loud"), "ssr"),
    (lambda c: setattr(c, "window", 0), "window"),
    (lambda c: setattr(c, "swap_rate", 2.0), "swap_rate"),
    (lambda c: setattr(c.paths, "corpus_format", "xml"), "paths.corpus_format"),
])
def test_validation_messages_start_with_field(change, path):
    cfg = ExperimentConfig()
    cfg.validate()
    change(cfg)
    with pytest.raises(ValueError) as info:
        cfg.validate()
    assert str(info.value).startswith(path)


def test_require_path(tmp_path):
    with pytest.raises(ConfigError, match="paths.train"):
        require_path(None, "train")
    with pytest.raises(FileNotFoundError):
        require_path(str(tmp_path / "nope"), "train")
    (tmp_path / "x").write_text("")
    assert require_path(str(tmp_path / "x"), "train").exists()
