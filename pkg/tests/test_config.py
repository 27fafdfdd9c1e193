import json

import pytest

from msmatch.config import RunConfig, experiment_config, load_config, save_config
from msmatch.errors import ConfigError


def test_round_trip(tmp_path):
    cfg = experiment_config(seed=7)
    cfg.loss.class_weights[64] = 0.025
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == cfg
    assert isinstance(back.model.encoder_widths, tuple)


def test_partial_file_keeps_defaults(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 3, "train": {"steps": 5}}))
    cfg = load_config(tmp_path / "c.json")
    assert cfg.seed == 3 and cfg.train.steps == 5
    assert cfg.train.batch_size == 32 and cfg.train.lr == 1e-3


@pytest.mark.parametrize("text", ["{bad", json.dumps({"nope": 1}), json.dumps({"train": {"stepz": 1}}),
                                  json.dumps({"train": 3})])
def test_bad_files(tmp_path, text):
    (tmp_path / "c.json").write_text(text)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


def test_validation_wraps_value_errors():
    cfg = RunConfig()
    cfg.fit.reproj_threshold = -1
    with pytest.raises(ConfigError):
        cfg.validate()
    cfg = RunConfig()
    cfg.train.sample.crop_size = 100
    with pytest.raises(ConfigError):
        cfg.validate()


def test_full_scale_defaults():
    cfg = RunConfig()
    assert cfg.train.batch_size == 32 and cfg.train.lr == 1e-3
    assert cfg.adaptation.n_homographies == 100 and cfg.adaptation.window_radius == 2
    assert cfg.fit.reproj_threshold == 2.0 and cfg.eval.pixel_tolerance == 5.0
    assert cfg.match.det_threshold == 0.015
