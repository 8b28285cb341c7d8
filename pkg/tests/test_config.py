"""Config file parsing: key set, coercion, overrides, consistency checks."""

import pytest

from gaitage.config import (apply_overrides, config_echo, parse_config_text,
                            RunConfig)
from gaitage.errors import ConfigError

DESK = """
# desk-scale ordinal run
synth.n = 200
synth.seed = 7
synth.height = 32
synth.width = 22
synth.noise = 0.1
rank.min = 2
rank.eta = 4
rank.count = 23
model.input_h = 32
model.input_w = 22
model.crop_rows = 6,12,14
model.conv_channels = 4,8,8
model.conv_kernels = 7,5,3
model.fc_width = 32
model.dropout = 0.0
optim.lr = 0.001
train.epochs = 3
train.batch_size = 16
train.seed = 5
train.out_dir = runs/t
"""


def test_full_config_parses():
    cfg = parse_config_text(DESK)
    assert cfg.synth.n_samples == 200
    assert cfg.rank.k_minus_1 == 22
    assert cfg.model.k_minus_1 == 22
    assert cfg.model.crop_rows == (6, 12, 14)
    assert cfg.optim.lr == 0.001
    assert cfg.epochs == 3
    assert cfg.out_dir == "runs/t"
    assert cfg.loss_kind == "odl" and cfg.lam == 10.0


def test_unknown_key_is_hard_error():
    with pytest.raises(ConfigError, match="unknown key 'model.widht'"):
        parse_config_text(DESK + "\nmodel.widht = 10\n")


def test_bad_value_reports_line():
    with pytest.raises(ConfigError, match=":3:"):
        parse_config_text("synth.n = 10\nrank.count = 23\nrank.eta = fast\n")


def test_missing_equals_rejected():
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("synth.n 10\n")


def test_comments_and_blanks_ignored():
    cfg = parse_config_text(DESK + "\n# trailing comment\n\n")
    assert cfg.synth.n_samples == 200


def test_requires_exactly_one_data_source(tmp_path):
    with pytest.raises(ConfigError, match="data source"):
        parse_config_text("train.epochs = 1\n")
    both = DESK + "\ndata.manifest = some.csv\n"
    with pytest.raises(ConfigError, match="data source"):
        parse_config_text(both)


def test_classifier_width_follows_rank_grid():
    """The config file has no model.k_minus_1 key; the rank grid decides."""
    cfg = parse_config_text(DESK.replace("rank.count = 23", "rank.count = 12"))
    assert cfg.model.k_minus_1 == 11


def test_rank_model_mismatch_rejected_programmatically():
    from dataclasses import replace

    from gaitage.ordinal import RankSpec

    cfg = parse_config_text(DESK)
    bad = replace(cfg, rank=RankSpec(2, 8, 12))
    with pytest.raises(ConfigError, match="disagrees"):
        bad.validate()


def test_scalar_loss_requires_scalar_head():
    with pytest.raises(ConfigError, match="head_mode"):
        parse_config_text(DESK + "\nloss.kind = euclidean\n")
    cfg = parse_config_text(DESK + "\nloss.kind = euclidean\n"
                            "model.head_mode = scalar_regression\n")
    assert cfg.model.head_mode == "scalar_regression"


def test_overrides():
    cfg = parse_config_text(DESK)
    out = apply_overrides(cfg, seed=9, out_dir="elsewhere", loss="ce",
                          lam=2.5, gender_weight=0.5, lr_decay=True)
    assert out.seed == 9
    assert out.out_dir == "elsewhere"
    assert out.loss_kind == "ce"
    assert out.lam == 2.5
    assert out.gender_weight == 0.5
    assert out.optim.lr_decay is True
    # original untouched
    assert cfg.seed == 5 and cfg.optim.lr_decay is False


def test_echo_omits_out_dir_but_keeps_seeds():
    cfg = parse_config_text(DESK)
    echo = config_echo(cfg)
    assert "out_dir" not in str(echo)
    assert echo["seed"] == 5
    assert echo["shuffle_seed"] == 5
    assert echo["synth"]["seed"] == 7


def test_shuffle_seed_defaults_to_seed():
    cfg = parse_config_text(DESK)
    assert cfg.effective_shuffle_seed == 5
    cfg2 = parse_config_text(DESK + "\ntrain.shuffle_seed = 77\n")
    assert cfg2.effective_shuffle_seed == 77


def test_default_runconfig_validates():
    cfg = RunConfig(manifest="x.csv")
    cfg.validate()
    assert cfg.rank.k_minus_1 == 88
    assert cfg.model.k_minus_1 == 88
    assert cfg.optim.lr == 1e-4
    assert cfg.optim.beta1 == 0.5
    assert cfg.optim.weight_decay == 1e-5
    assert cfg.lam == 10.0
