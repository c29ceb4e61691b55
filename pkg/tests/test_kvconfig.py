import pytest

from guidedrep.experiments import ExperimentConfig
from guidedrep.kvconfig import apply_kv, dump_kv, parse_overrides, read_kv, write_kv
from guidedrep.synthdata import GeneratorConfig
from guidedrep.trainloop import TrainConfig


def test_roundtrip_every_config(tmp_path):
    for cfg in (GeneratorConfig(n_train=7, nucleus_rgb_pos=(0.1, 0.2, 0.3)), ExperimentConfig(dense_widths=(5,)),
                TrainConfig(pos_weight=0.25)):
        path = tmp_path / "x.cfg"
        write_kv(path, cfg)
        assert apply_kv(type(cfg)(), read_kv(path)) == cfg


def test_comments_blank_lines_and_types(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("# header\n\nlr = 0.5  # trailing\ntransductive=yes\ndense_widths=4, 3\n")
    cfg = apply_kv(ExperimentConfig(), read_kv(path))
    assert cfg.lr == 0.5 and cfg.transductive is True and cfg.dense_widths == (4, 3)


def test_optional_fields():
    assert apply_kv(TrainConfig(), {"pos_weight": "none"}).pos_weight is None
    assert apply_kv(TrainConfig(), {"pos_weight": "0.3"}).pos_weight == 0.3


def test_errors(tmp_path):
    with pytest.raises(KeyError, match="bogus"):
        apply_kv(ExperimentConfig(), {"bogus": "1"})
    assert apply_kv(ExperimentConfig(), {"bogus": "1"}, strict=False) == ExperimentConfig()
    with pytest.raises(ValueError):
        apply_kv(ExperimentConfig(), {"transductive": "maybe"})
    with pytest.raises(ValueError):
        apply_kv(GeneratorConfig(), {"background_rgb": "0.1,0.2"})
    bad = tmp_path / "bad.cfg"
    bad.write_text("lr 0.1\n")
    with pytest.raises(ValueError, match="bad.cfg:1"):
        read_kv(bad)
    with pytest.raises(ValueError):
        parse_overrides(["novalue"])


def test_dump_is_stable():
    text = dump_kv(ExperimentConfig())
    assert text == dump_kv(ExperimentConfig()) and "lr=0.01\n" in text
    assert parse_overrides(["a=1", "b = x=y"]) == {"a": "1", "b": "x=y"}
