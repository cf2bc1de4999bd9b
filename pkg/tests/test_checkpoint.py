import pytest
import torch

from checkpoint import MAGIC, load_checkpoint, read_manifest, save_checkpoint
from conftest import params_equal
from corpus import build_vocab
from disentangle import build_discriminator
from errors import ArtifactMissingError, ConfigError, ParseError
from models import make_batch, sample_batch


@pytest.mark.parametrize("arch", ["transformer", "recurrent"])
def test_roundtrip(tmp_path, make_model, tiny_vocab, tiny_index, arch):
    model = make_model(arch, seed=5)
    disc = build_discriminator(16, 2, seed=2)
    path = save_checkpoint(tmp_path / "m.cffe", model, tiny_vocab, tiny_index, config_hash="abc", step=42, disc=disc)
    ckpt = load_checkpoint(path, expect_config_hash="abc", expect_vocab=tiny_vocab)
    assert params_equal(ckpt.model, model)
    assert ckpt.model.cfg == model.cfg
    assert ckpt.vocab == tiny_vocab
    assert ckpt.index.user_index == tiny_index.user_index and ckpt.index.item_index == tiny_index.item_index
    assert ckpt.index.attribute_space == tiny_index.attribute_space
    assert (ckpt.step, ckpt.config_hash) == (42, "abc")
    restored = build_discriminator(16, 2, seed=9)
    restored.load_state_dict(ckpt.disc_state)
    assert params_equal(restored, disc)


def test_checkpoint_without_discriminator(tmp_path, make_model, tiny_vocab, tiny_index):
    path = save_checkpoint(tmp_path / "m.cffe", make_model("transformer"), tiny_vocab, tiny_index)
    ckpt = load_checkpoint(path)
    assert ckpt.disc_state == {} and ckpt.meta["disc"] is None


def test_same_model_same_bytes(tmp_path, make_model, tiny_vocab, tiny_index):
    model = make_model("recurrent")
    a = save_checkpoint(tmp_path / "a.cffe", model, tiny_vocab, tiny_index, step=3)
    b = save_checkpoint(tmp_path / "b.cffe", model, tiny_vocab, tiny_index, step=3)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[:4] == MAGIC


def test_bad_files(tmp_path, make_model, tiny_vocab, tiny_index):
    with pytest.raises(ArtifactMissingError):
        load_checkpoint(tmp_path / "nope.cffe")
    truncated = tmp_path / "short.cffe"
    truncated.write_bytes(b"CF")
    with pytest.raises(ParseError):
        read_manifest(truncated)
    good = save_checkpoint(tmp_path / "m.cffe", make_model("transformer"), tiny_vocab, tiny_index)
    forged = tmp_path / "forged.cffe"
    forged.write_bytes(b"XXXX" + good.read_bytes()[4:])
    with pytest.raises(ParseError, match="magic"):
        load_checkpoint(forged)


def test_mismatches_are_config_errors(tmp_path, make_model, tiny_vocab, tiny_index):
    path = save_checkpoint(tmp_path / "m.cffe", make_model("transformer"), tiny_vocab, tiny_index, config_hash="abc")
    with pytest.raises(ConfigError):
        load_checkpoint(path, expect_config_hash="def")
    other = build_vocab([["completely", "different", "words"]], 50)
    with pytest.raises(ConfigError):
        load_checkpoint(path, expect_vocab=other)


def test_loaded_model_generates_identically(tmp_path, make_model, tiny_dataset, tiny_vocab, tiny_index):
    model = make_model("transformer", seed=8)
    ckpt = load_checkpoint(save_checkpoint(tmp_path / "m.cffe", model, tiny_vocab, tiny_index))
    batch = make_batch(tiny_dataset.split_records("test"), tiny_vocab, tiny_index, 20)
    assert sample_batch(ckpt.model, batch, k=3, max_len=8, seed=1) == sample_batch(model, batch, k=3, max_len=8, seed=1)
    with torch.no_grad():
        assert torch.equal(ckpt.model.eval()(batch).word_logits, model.eval()(batch).word_logits)
