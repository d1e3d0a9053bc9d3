import pytest

from moddrop_pp.config import RunConfig, format_config, load_config, parse_config_text
from moddrop_pp.errors import ConfigError
from moddrop_pp.experiments import trend_config


def test_round_trip_defaults():
    cfg = RunConfig()
    assert parse_config_text(format_config(cfg)) == cfg


def test_round_trip_trend():
    cfg = trend_config()
    assert parse_config_text(format_config(cfg)) == cfg


def test_typed_parsing():
    cfg = parse_config_text("""
        # comment line
        synth.size=24            # trailing comment
        synth.lesions=1,3
        synth.contrast=0.1,0.2,0.3,0.4
        synth.normalize=off
        train.lr0=1e-3
        train.code=0101
        loss.c1=0.5
    """)
    assert cfg.synth.size == 24 and cfg.synth.lesions == (1, 3)
    assert cfg.synth.contrast == [0.1, 0.2, 0.3, 0.4]
    assert cfg.synth.normalize is False
    assert cfg.train.lr0 == 1e-3 and cfg.train.code == "0101"
    assert cfg.loss.c1 == 0.5
    assert parse_config_text("loss.c1=none", cfg).loss.c1 is None


@pytest.mark.parametrize("text", ["synth.bogus=1", "nosection=1", "bogus.size=3", "synth.size=abc",
                                  "synth.normalize=maybe", "train.lr0=nan", "just text"])
def test_rejects(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_error_names_line():
    with pytest.raises(ConfigError, match="cfg:3"):
        parse_config_text("synth.size=32\n\nsynth.nope=1\n", source="cfg")


def test_sync_propagates_k():
    cfg = parse_config_text("synth.k=3\nsynth.slices=5\nsynth.contrast=1,1,1\n"
                            "synth.distractor_amplitude=0,0,0\nsynth.tissue_level=1,1,1")
    cfg.validate()
    assert cfg.model.k == 3 and cfg.model.slices_per_modality == 5
    assert cfg.drop.k == 3 and len(cfg.drop.p) == 3


@pytest.mark.parametrize("key,value", [("synth.k", "0"), ("eval.threshold", "1.0"), ("eval.subjects", "1"),
                                       ("train.regime", "nope"), ("model.kernel", "2"),
                                       ("loss.alpha", "-1"), ("synth.slices", "2")])
def test_validate_rejects(key, value):
    cfg = RunConfig()
    cfg.set(key, value)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_load_config(tmp_path):
    (tmp_path / "a.cfg").write_text("train.epochs=7\ntrain.decay_start_epoch=3\n")
    cfg = load_config(tmp_path / "a.cfg")
    assert cfg.train.epochs == 7
    cfg.validate()


def test_committed_trend_config_matches():
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "configs" / "trend.cfg"
    assert load_config(path) == trend_config()
