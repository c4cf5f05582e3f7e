import pytest

from landmark_lab.config import KEY_INDEX, KEYS, ConfigError, RunConfig, help_text
from landmark_lab.training import TrainConfig


def test_defaults_build_valid_objects():
    cfg = RunConfig()
    tc = cfg.train_config()
    assert isinstance(tc, TrainConfig) and tc.loss == "pwc"
    assert cfg.model_spec(10).num_landmarks == 10


def test_head_picks_default_loss():
    cfg = RunConfig.load(overrides=["model.head=distribution"])
    assert cfg.train_config().loss == "dist"


def test_file_then_overrides(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("[train]\nlr = 0.01   # fast\nbatch_size = 4\n[model]\nstage_blocks = 1,1,1,1,1\n")
    cfg = RunConfig.load(path, ["train.lr=0.5"])
    assert cfg["train.lr"] == 0.5 and cfg["train.batch_size"] == 4
    assert cfg["model.stage_blocks"] == (1, 1, 1, 1, 1)


def test_text_roundtrip(tmp_path):
    cfg = RunConfig.load(overrides=["train.augment=false", "model.fc_widths=32,16", "data.synth_seed=9"])
    path = tmp_path / "b.cfg"
    path.write_text(cfg.to_text())
    assert RunConfig.load(path).values == cfg.values


@pytest.mark.parametrize("item", ["train.lr", "nope.key=1", "train.batch_size=2.5", "train.augment=maybe",
                                  "model.fc_widths=a,b"])
def test_bad_overrides(item):
    with pytest.raises(ConfigError):
        RunConfig.load(overrides=[item])


def test_invalid_values_surface_as_config_errors():
    with pytest.raises(ConfigError, match="train"):
        RunConfig.load(overrides=["model.head=direct", "train.loss=pwc"]).train_config()
    with pytest.raises(ConfigError, match="model"):
        RunConfig.load(overrides=["model.scale=0"]).model_spec(10)


def test_unknown_key_reports_line(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("[data]\nsource = synthetic\n\n[eval]\nsplits = val\n")
    with pytest.raises(ConfigError, match=r"c\.cfg:5: unknown key 'eval\.splits'"):
        RunConfig.load(path)


def test_help_has_every_key():
    text = help_text()
    assert len(KEY_INDEX) == len(KEYS)
    for key in KEYS:
        assert key.dotted in text and key.doc in text
