import pytest

from flowfill.config import ConfigError, RunConfig, parse_text
from flowfill.model import ModelConfig
from flowfill.synth import SynthSpec
from flowfill.training import TrainConfig


def test_parse_types_and_comments():
    v = parse_text("# header\nlr = 1e-4  # inline\nhidden_channels=8\nuse_ld = false\ndetour_weights = 0.5, 1\n\n")
    assert v == {"lr": 1e-4, "hidden_channels": 8, "use_ld": False, "detour_weights": (0.5, 1.0)}


@pytest.mark.parametrize("text", ["lr 1e-4", "hidden_chanels = 8", "hidden_channels = 8.5", "use_ld = maybe"])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_text(text)


def test_overrides_beat_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("lr = 1e-4\nnum_layers = 3\n")
    cfg = RunConfig.load(p, {"lr": "2e-4"})
    assert cfg.train().lr == 2e-4
    assert cfg.model().num_layers == 3
    with pytest.raises(ConfigError):
        RunConfig.load(p, {"nope": "1"})


def test_builders_wrap_validation_errors():
    with pytest.raises(ConfigError):
        RunConfig.load(overrides={"missing_fraction": "1.5"}).synth()
    with pytest.raises(ConfigError):
        RunConfig.load(overrides={"kernel_size": "4"}).model()


def test_profile_sets_patience_unless_given():
    assert RunConfig.load(overrides={"profile": "kitti"}).train().patience == 400
    assert RunConfig.load(overrides={"profile": "kitti", "patience": "700"}).train().patience == 700
    with pytest.raises(ConfigError):
        RunConfig.load(overrides={"profile": "imagenet"})


def test_train_defaults_yield_to_values():
    cfg = RunConfig.load(overrides={"lr": "3e-4"})
    assert cfg.train(lr=1e-6, patience=200).lr == 3e-4
    assert cfg.train(lr=1e-6, patience=200).patience == 200


def test_resolved_text_parses_back_to_same_objects(tmp_path):
    cfg = RunConfig.load(overrides={"hidden_channels": "5", "lr": "1e-3", "checkpoint_every": "10", "use_edges": "0"})
    objs = (cfg.model(), cfg.train(), cfg.synth())
    path = cfg.write_resolved(tmp_path, *objs)
    back = RunConfig(parse_text(path.read_text()))
    assert (back.model(), back.train(), back.synth()) == objs
    assert back.get("checkpoint_every") == 10
    assert isinstance(objs[0], ModelConfig) and isinstance(objs[1], TrainConfig) and isinstance(objs[2], SynthSpec)
