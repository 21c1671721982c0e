import pytest

from ltreweight.config import OUTPUT_ENV, ConfigError, load_config, parse_config

BASE = """
[data]
num_classes = 4
dims = 5
imbalance_factor = 10
base_count = 60
class_separation = 3.0

[train]
lr = 0.05
meta_lr = 10
stage1_epochs = 2
stage2_epochs = 1.5
batch_size = 20
lr_schedule = 1:0.1
schedule_unit = epochs
"""


def test_parse_and_resolve_epochs():
    cfg = parse_config(BASE)
    assert cfg.train.mode == "ours" and cfg.data.synthetic
    resolved = cfg.resolve([60, 30, 10, 6])  # 106 examples -> 5 steps per epoch
    assert resolved.stage1_steps == 10 and resolved.stage2_steps == 8
    assert resolved.lr_schedule == ((5, 0.1),)


def test_missing_keys_are_each_named():
    text = "[data]\nnum_classes = 4\n[train]\nstage1_steps = 1\n"
    with pytest.raises(ConfigError) as err:
        parse_config(text, "x.ini")
    msg = str(err.value)
    for key in ("[data] dims", "[data] base_count", "[train] lr", "[train] stage2_steps"):
        assert key in msg


def test_invalid_mode_and_values():
    with pytest.raises(ConfigError, match="mode"):
        parse_config(BASE + "mode = fancy\n")
    with pytest.raises(ConfigError, match="lr"):
        parse_config(BASE.replace("lr = 0.05", "lr = fast"))
    with pytest.raises(ConfigError, match="loss"):
        parse_config(BASE + "loss = hinge\n")


def test_hash_ignores_layout_comments_and_output_section():
    a = parse_config(BASE)
    reordered = BASE.replace("lr = 0.05\n", "") + "lr = 0.05   # same value\n[output]\ndir = somewhere\n"
    b = parse_config(reordered)
    assert a.config_hash == b.config_hash
    assert parse_config(BASE.replace("meta_lr = 10", "meta_lr = 11")).config_hash != a.config_hash


def test_ldam_margins_follow_training_counts():
    cfg = parse_config(BASE + "loss = ldam\nldam_scale = 5\n")
    loss = cfg.resolve([60, 30, 10, 6]).loss
    assert loss.name == "ldam" and loss.class_counts == (60, 30, 10, 6) and loss.scale == 5.0


def test_output_dir_env_override(monkeypatch, tmp_path):
    p = tmp_path / "c.ini"
    p.write_text(BASE + "[output]\ndir = from_file\n")
    assert load_config(p).output_dir == "from_file"
    monkeypatch.setenv(OUTPUT_ENV, "from_env")
    assert load_config(p).output_dir == "from_env"


def test_missing_file():
    with pytest.raises(ConfigError, match="does not exist"):
        load_config("/nonexistent/config.ini")
