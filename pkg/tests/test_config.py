import dataclasses

import pytest

from config import (PRESETS, RunConfig, TrainConfig, config_from_dict, config_hash, dump_config, load_config,
                    parse_config_text)
from errors import ConfigError


def test_parse_skips_comments_and_blanks():
    text = "# run\nlam = 0.5\n\narch = recurrent  # inline note\n   # indented comment\n"
    assert parse_config_text(text) == {"lam": "0.5", "arch": "recurrent"}


def test_parse_rejects_garbage():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("lam = 1\njust words\n")


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="lamda"):
        config_from_dict({"lamda": "0.1"})


def test_coercion():
    cfg = config_from_dict({"split_ratios": "0.7, 0.2, 0.1", "norm_data": "yes", "finetune_batch_size": "none",
                            "n_samples": "4", "attribute_values": "$, $$, $$$", "synth_probs": "0.2,0.3,0.5",
                            "synth_mean_length": "5,6,7", "synth_mean_features": "1,1,1"})
    assert cfg.split_ratios == (0.7, 0.2, 0.1)
    assert cfg.norm_data is True and cfg.finetune_batch_size is None and cfg.n_samples == 4
    assert cfg.attribute_values == ("$", "$$", "$$$")
    with pytest.raises(ConfigError, match="n_samples"):
        config_from_dict({"n_samples": "three"})
    with pytest.raises(ConfigError):
        config_from_dict({"norm_data": "maybe"})


def test_preset_then_explicit_keys():
    cfg = config_from_dict({"preset": "recurrent/games", "arch": "recurrent"})
    assert (cfg.lam, cfg.eta, cfg.lambda_d) == (0.3, 0.5, 0.5)
    cfg = config_from_dict({"preset": "recurrent/games", "lam": "0.9"})
    assert cfg.lam == 0.9 and cfg.eta == PRESETS["recurrent/games"]["eta"]
    with pytest.raises(ConfigError):
        config_from_dict({"preset": "lstm/books"})


def test_load_config_with_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 1\nout_dir = first\n", encoding="utf-8")
    cfg = load_config(path, {"seed": 3, "out_dir": None})
    assert cfg.seed == 3 and cfg.out_dir == "first"
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_dump_roundtrip():
    cfg = RunConfig(lam=0.35, merge_values=("$$$$:$$$",), eval_measures=("L",), arch="recurrent", tag="x")
    assert config_from_dict(parse_config_text(dump_config(cfg))) == cfg


def test_hash_ignores_output_location():
    cfg = RunConfig()
    assert config_hash(cfg) == config_hash(dataclasses.replace(cfg, out_dir="elsewhere", tag="t"))
    assert config_hash(cfg) != config_hash(dataclasses.replace(cfg, lam=0.3))


@pytest.mark.parametrize("bad", [
    dict(split_ratios=(0.5, 0.2, 0.2)),
    dict(split_ratios=(1.2, -0.1, -0.1)),
    dict(eta=1.5),
    dict(lam=-0.1),
    dict(n_samples=0),
    dict(arch="cnn"),
    dict(baseline="fancy"),
    dict(eval_measures=("L", "BLEU")),
    dict(attribute_values=("male",), synth_probs=(1.0,), synth_mean_length=(5.0,), synth_mean_features=(1.0,)),
    dict(merge_values=("no-colon",)),
    dict(schedule_z=0),
    dict(grad_clip=-1.0),
    dict(finetune_grad_clip=0.0),
])
def test_invalid_runs(bad):
    with pytest.raises(ConfigError):
        RunConfig(**bad)


def test_train_config_validates():
    with pytest.raises(ConfigError):
        TrainConfig(top_k=0)
    with pytest.raises(ConfigError):
        TrainConfig(quality="BLEU")


def test_finetune_clip_is_off_unless_set():
    assert TrainConfig().finetune_grad_clip is None
    assert config_from_dict({"finetune_grad_clip": "0.5"}).finetune_grad_clip == 0.5
    assert config_from_dict({"finetune_grad_clip": "none"}).finetune_grad_clip is None


def test_finetune_batch_defaults():
    assert RunConfig().effective_finetune_batch == 8
    assert RunConfig(arch="recurrent", batch_size=32).effective_finetune_batch == 32
    assert RunConfig(finetune_batch_size=4).effective_finetune_batch == 4


def test_merge_map_and_tag():
    cfg = RunConfig(merge_values=("$$$$ : $$$",))
    assert cfg.merge_map() == {"$$$$": "$$$"}
    assert cfg.run_tag == "coffee-transformer-L"
    assert RunConfig(tag="mine").run_tag == "mine"
