import pytest

from pcomplete import config


def test_parse_types_and_comments():
    cfg = config.parse_config("""
        # a comment
        model.preset = desk
        model.encoder_widths1 = [16, 32]   # trailing comment
        train.lr = 0.001
        train.init_ae2_from_ae1 = true
        data.mode = "c3d"
    """)
    assert cfg == {"model": {"preset": "desk", "encoder_widths1": [16, 32]},
                   "train": {"lr": 0.001, "init_ae2_from_ae1": True}, "data": {"mode": "c3d"}}


@pytest.mark.parametrize("text", ["train.lr 0.1", "lr = 0.1", ".lr = 1", "train. = 1"])
def test_malformed_names_line(text):
    with pytest.raises(ValueError, match=":1:"):
        config.parse_config(text)


def test_overrides_win():
    cfg = config.apply_overrides(config.parse_config("train.lr = 0.1"), ["train.lr=0.5", "model.code_dim=64"])
    assert cfg == {"train": {"lr": 0.5}, "model": {"code_dim": 64}}
    with pytest.raises(ValueError):
        config.apply_overrides({}, ["train.lr"])


def test_dump_round_trip_and_sorted():
    cfg = {"train": {"lr": 0.001, "stage": 2}, "model": {"mirror_plane": "xy", "widths": (8, 16),
                                                         "odd": "123", "flag": False, "none": None}}
    text = config.dump_config(cfg)
    assert text.splitlines()[0].startswith("model.")
    back = config.parse_config(text)
    assert back["model"]["widths"] == [8, 16] and back["model"]["odd"] == "123"
    assert back["model"]["flag"] is False and back["model"]["none"] is None
    assert config.dump_config(back) == text


def test_load_config_reports_path(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("train.lr = 1\nbroken\n")
    with pytest.raises(ValueError, match="run.cfg:2"):
        config.load_config(p)
