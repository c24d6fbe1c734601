"""Configuration registry and parser tests."""

import numpy as np
import pytest

from sardino import config as cf
from sardino.errors import ConfigError


def test_parse_round_trip_through_dump():
    """The emitted defaults file must parse back to exactly the defaults."""
    text = cf.dump_defaults()
    parsed = cf.parse_config_text(text)
    resolved = cf.resolve(parsed)
    assert resolved == cf.resolve({})


def test_dump_defaults_surfaces_training_recipe():
    text = cf.dump_defaults()
    for needle in ("0.99", "192", "768", "0.000001", "0.03", "0.001", "0.01",
                   "5", "0.996"):
        assert needle in text, f"missing {needle} in dumped defaults"


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        cf.parse_config_text("dino.learning_rate = 0.1")
    with pytest.raises(ConfigError):
        cf.resolve({"nope.nope": 1})


def test_type_errors_are_config_errors():
    with pytest.raises(ConfigError):
        cf.parse_value("dino.lr", "fast")
    with pytest.raises(ConfigError):
        cf.parse_value("data.num_tiles", "3.5")
    with pytest.raises(ConfigError):
        cf.parse_value("dino.centering", "maybe")
    with pytest.raises(ConfigError):
        cf.parse_value("dino.global_scale", "0.4")


def test_choice_validation():
    with pytest.raises(ConfigError):
        cf.parse_value("vit.preset", "giant")
    with pytest.raises(ConfigError):
        cf.parse_value("finetune.mode", "fcn")


def test_comments_blanks_and_duplicates():
    text = """
# a comment
data.num_tiles = 7   # trailing comment

dino.lr = 0.001
"""
    parsed = cf.parse_config_text(text)
    assert parsed == {"data.num_tiles": 7, "dino.lr": 0.001}
    with pytest.raises(ConfigError, match="duplicate"):
        cf.parse_config_text("data.seed = 1\ndata.seed = 2")
    with pytest.raises(ConfigError, match="key = value"):
        cf.parse_config_text("data.seed 5")


def test_optional_int_and_pair_parsing():
    assert cf.parse_value("dino.max_steps", "none") is None
    assert cf.parse_value("dino.max_steps", "200") == 200
    assert cf.parse_value("dino.global_scale", "0.5, 0.9") == (0.5, 0.9)


def test_builders_produce_validated_configs():
    values = cf.resolve({"vit.preset": "desk", "dino.lr": 0.001,
                         "finetune.mode": "attn_unet"})
    vit = cf.build_vit_config(values)
    assert vit.embed_dim == 64 and vit.image_size == 32
    dino = cf.build_dino_config(values)
    assert dino.lr == 0.001 and dino.center_momentum == 0.99
    ft = cf.build_finetune_config(values)
    assert ft.mode == "attn_unet"
    synth = cf.build_synth_config(values)
    assert synth.tile_size == 64


def test_vit_overrides_apply_on_top_of_preset():
    values = cf.resolve({"vit.preset": "desk", "vit.image_size": 64,
                         "vit.patch_size": 16})
    vit = cf.build_vit_config(values)
    assert vit.image_size == 64 and vit.patch_size == 16
    assert vit.embed_dim == 64  # preset value retained


def test_snapshot_round_trip():
    values = cf.resolve({"dino.lr": 0.0005, "dino.max_steps": 123,
                         "finetune.freeze_backbone": False})
    snap = cf.snapshot(values)
    assert all(isinstance(v, str) for v in snap.values())
    restored = cf.from_snapshot(snap)
    assert restored == values


def test_format_value():
    assert cf.format_value(1e-6) == "0.000001"
    assert cf.format_value(True) == "true"
    assert cf.format_value(None) == "none"
    assert cf.format_value((0.4, 1.0)) == "0.4,1"
