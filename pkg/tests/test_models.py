import copy
import math

import pytest
import torch
from torch.func import functional_call

from config import TrainConfig
from conftest import make_record, params_equal
from corpus import BOS_ID, EOS_ID, PAD_ID
from errors import ConfigError, ContractError, DomainError, NumericError
from models import (ModelConfig, block_attribute_attention, build, compute_losses, context_loss,
                    counterfactual_batch, counterfactual_view, evaluate_loss, forward_logits, make_batch,
                    model_config_for, nll_loss, peter_mask, pretrain, rating_loss, sample, sample_batch,
                    sequence_log_probs, teacher_forced_batch)
from numerics import grad_check, log_softmax

ARCHS = ["transformer", "recurrent"]


@pytest.fixture
def batch(tiny_dataset, tiny_vocab, tiny_index):
    return make_batch(tiny_dataset.split_records("train")[:4], tiny_vocab, tiny_index, 20)


# =========================
# mask
# =========================
def test_peter_mask_rows():
    m = peter_mask(3, 2).int()
    assert m[3].tolist() == [1, 1, 1, 1, 0]
    assert m[0].tolist() == [1, 1, 1, 0, 0]
    assert m[4].tolist() == [1, 1, 1, 1, 1]


def test_peter_mask_no_words():
    assert bool(peter_mask(3, 0).all()) and peter_mask(3, 0).shape == (3, 3)


def test_peter_mask_word_block_lower_triangular():
    m = peter_mask(3, 6)
    assert torch.equal(m[3:, 3:], torch.tril(torch.ones(6, 6, dtype=torch.bool)))


def test_block_attribute_column():
    m = block_attribute_attention(peter_mask(3, 4), 0)
    assert m[:, 0].tolist() == [True] + [False] * 6
    assert torch.equal(block_attribute_attention(m, 0), m)


# =========================
# build
# =========================
def test_full_dims():
    t = model_config_for("transformer", "full")
    assert (t.emb_dim, t.ffn_dim, t.n_layers, t.n_heads, t.dropout) == (512, 2048, 2, 2, 0.2)
    r = model_config_for("recurrent", "full")
    assert (r.emb_dim, r.hidden_dim, r.attr_dim, r.dropout) == (300, 400, 100, 0.1)


def test_zero_dims_rejected():
    with pytest.raises(ConfigError):
        build(ModelConfig(vocab_size=0, n_users=3, n_items=3), seed=0)


@pytest.mark.parametrize("arch", ARCHS)
def test_build_deterministic_and_bounded(make_model, arch):
    a, b = make_model(arch, seed=3), make_model(arch, seed=3)
    assert params_equal(a, b)
    assert not params_equal(a, make_model(arch, seed=4))
    assert float(a.user_emb.weight.abs().max()) <= 0.1


def test_raw_model_has_no_attribute_table(make_model):
    assert make_model("transformer", use_attribute=False).attr_emb is None
    assert make_model("recurrent", use_attribute=False).attr_emb is None


# =========================
# forward / losses
# =========================
@pytest.mark.parametrize("arch", ARCHS)
@pytest.mark.parametrize("use_attribute", [True, False])
def test_forward_shapes(make_model, batch, tiny_vocab, arch, use_attribute):
    out = forward_logits(make_model(arch, use_attribute=use_attribute), batch)
    B, T = batch.words.shape
    assert out.word_logits.shape == (B, T, len(tiny_vocab))
    assert out.rating.shape == (B,)
    assert out.context_logits.shape == (B, len(tiny_vocab))


@pytest.mark.parametrize("arch", ARCHS)
def test_zero_weights_give_uniform_nll(make_model, batch, tiny_vocab, arch):
    model = make_model(arch)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    out = model(batch)
    probs = torch.softmax(out.word_logits, dim=-1)
    assert torch.allclose(probs, torch.full_like(probs, 1 / len(tiny_vocab)), atol=1e-15)
    assert abs(float(nll_loss(out.word_logits, batch.targets)) - math.log(len(tiny_vocab))) < 1e-9
    assert abs(float(context_loss(out.context_logits, batch.targets)) - math.log(len(tiny_vocab))) < 1e-9


def test_nll_perfect_prediction():
    targets = torch.tensor([[4, 5, PAD_ID]])
    logits = torch.zeros(1, 3, 8)
    logits[0, 0, 4] = 60.0
    logits[0, 1, 5] = 60.0
    assert float(nll_loss(logits, targets)) < 1e-12


def test_rating_mse_hand_value():
    assert float(rating_loss(torch.tensor([3.0, 4.0]), torch.tensor([3.0, 2.0]))) == 2.0


@pytest.mark.parametrize("arch", ARCHS)
def test_loss_breakdown_sums(make_model, batch, arch):
    parts = compute_losses(make_model(arch)(batch), batch)
    assert float(parts.total) == pytest.approx(float(parts.nll + parts.context + parts.rating_mse), abs=1e-12)
    no_rating = compute_losses(make_model(arch)(batch), batch, include_rating=False)
    assert float(no_rating.total) == pytest.approx(float(no_rating.nll + no_rating.context), abs=1e-12)
    assert all(v >= 0 for v in parts.as_floats().values())


def test_future_words_do_not_leak(make_model, batch):
    model = make_model("transformer").eval()
    base = model(batch).word_logits
    words = batch.words.clone()
    words[:, 2] = (words[:, 2] + 1) % model.cfg.vocab_size
    out = model(type(batch)(batch.attr, batch.user, batch.item, words, batch.targets, batch.ratings,
                            batch.lengths)).word_logits
    assert torch.allclose(out[:, :2], base[:, :2], atol=1e-12, rtol=0)
    assert not torch.allclose(out[:, 2], base[:, 2])


@pytest.mark.parametrize("arch", ARCHS)
def test_full_loss_gradient_check(make_model, batch, arch):
    model = make_model(arch).eval()

    def loss_of(item_table):
        out = functional_call(model, {"item_emb.weight": item_table}, (batch,))
        return compute_losses(out, batch).total

    assert grad_check(loss_of, model.item_emb.weight.detach().clone()) < 1e-5


def test_length_over_max_is_contract_error(make_model, tiny_vocab, tiny_index, tiny_dataset):
    model = make_model("transformer", max_len=20)
    r = tiny_dataset.records[0]
    long_rec = make_record(30, attribute=r.attribute, user=r.user_id, item=r.item_id)
    with pytest.raises(ContractError):
        model(make_batch([long_rec], tiny_vocab, tiny_index, 40))


# =========================
# counterfactual view
# =========================
@pytest.mark.parametrize("arch", ARCHS)
def test_counterfactual_same_value_is_identity(make_model, batch, arch):
    model = make_model(arch).eval()
    assert torch.equal(counterfactual_view(model, batch, batch.attr).word_logits, model(batch).word_logits)


@pytest.mark.parametrize("arch", ARCHS)
def test_counterfactual_only_through_attribute_row(make_model, batch, arch):
    model = make_model(arch).eval()
    before = copy.deepcopy(model.state_dict())
    flipped = 1 - batch.attr
    assert not torch.allclose(counterfactual_view(model, batch, flipped).word_logits, model(batch).word_logits)
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    with torch.no_grad():
        model.attr_emb.weight[1] = model.attr_emb.weight[0]
    assert torch.equal(counterfactual_view(model, batch, flipped).word_logits, model(batch).word_logits)


def test_counterfactual_domain_errors(make_model, batch):
    with pytest.raises(DomainError):
        counterfactual_batch(make_model("transformer"), batch, 2)
    with pytest.raises(DomainError):
        counterfactual_batch(make_model("recurrent", use_attribute=False), batch, 0)
    with pytest.raises(DomainError):
        make_model("transformer")(batch.with_attr(torch.full_like(batch.attr, 7)))


# =========================
# decoding
# =========================
@pytest.mark.parametrize("arch", ARCHS)
def test_k1_is_greedy(make_model, batch, arch):
    model = make_model(arch)
    a = sample_batch(model, batch, k=1, max_len=6, seed=1)
    assert a == sample_batch(model, batch, k=1, max_len=6, seed=2)
    with torch.no_grad():
        logits, _ = model.eval().step(batch, model.init_state(batch))
    assert [s[0] for s in a] == logits.argmax(dim=-1).tolist()


@pytest.mark.parametrize("arch", ARCHS)
def test_forced_token_is_emitted(make_model, batch, arch):
    model = make_model(arch)
    head = model.lm_head if arch == "transformer" else model.out_proj
    with torch.no_grad():
        head.bias[EOS_ID] = 1e9
    assert sample_batch(model, batch, k=5, max_len=6, seed=0) == [[EOS_ID]] * len(batch)


@pytest.mark.parametrize("arch", ARCHS)
def test_sampling_deterministic(make_model, tiny_dataset, tiny_vocab, tiny_index, arch):
    model = make_model(arch)
    rec = tiny_dataset.split_records("test")[0]
    a = sample(model, rec, tiny_vocab, tiny_index, k=5, max_len=8, seed=5)
    assert a == sample(model, rec, tiny_vocab, tiny_index, k=5, max_len=8, seed=5)
    assert len(a) <= 8


def test_sampling_needs_k(make_model, batch):
    with pytest.raises(ConfigError):
        sample_batch(make_model("transformer"), batch, k=0)


@pytest.mark.parametrize("arch", ARCHS)
def test_sequence_log_probs_matches_first_step(make_model, batch, arch):
    model = make_model(arch).eval()
    lp = sequence_log_probs(model, batch, [[EOS_ID]] * len(batch))
    with torch.no_grad():
        logits, _ = model.step(batch, model.init_state(batch))
    expected = log_softmax(logits, axis=-1)[:, EOS_ID]
    assert torch.allclose(lp.detach(), expected, atol=1e-12)


def test_teacher_forced_batch_layout(batch):
    tf = teacher_forced_batch(batch, [[5, 6, EOS_ID], [7]] + [[EOS_ID]] * (len(batch) - 2))
    assert tf.words[0].tolist() == [BOS_ID, 5, 6]
    assert tf.targets[0].tolist() == [5, 6, EOS_ID]
    assert tf.targets[1].tolist() == [7, PAD_ID, PAD_ID]
    assert tf.lengths[:2].tolist() == [3, 1]


# =========================
# pretrain
# =========================
def test_pretrain_zero_epochs_keeps_model(make_model, tiny_dataset, tiny_vocab, tiny_index):
    model = make_model("transformer")
    before = copy.deepcopy(model)
    result = pretrain(model, tiny_dataset, tiny_vocab, tiny_index, TrainConfig(max_epochs=0))
    assert params_equal(result.model, before)
    assert result.curve.empty and result.steps == 0


@pytest.mark.parametrize("arch", ARCHS)
def test_pretrain_reduces_nll(make_model, tiny_dataset, tiny_vocab, tiny_index, arch):
    model = make_model(arch)
    train = tiny_dataset.split_records("train")
    start = evaluate_loss(model, train, tiny_vocab, tiny_index)["nll"]
    cfg = TrainConfig(lr_pretrain=3e-3, batch_size=8, max_epochs=8, patience=8, seed=1)
    result = pretrain(model, tiny_dataset, tiny_vocab, tiny_index, cfg, start_step=100)
    assert evaluate_loss(result.model, train, tiny_vocab, tiny_index)["nll"] < start
    assert list(result.curve.columns) == ["epoch", "step", "train_nll", "train_context", "train_rating_mse",
                                          "train_total", "valid_total"]
    assert result.steps == 100 + 8 * math.ceil(len(train) / 8)
    assert 1 <= result.best_epoch <= 8


def test_pretrain_nan_aborts(make_model, tiny_dataset, tiny_vocab, tiny_index):
    model = make_model("transformer")
    with torch.no_grad():
        model.lm_head.weight[0, 0] = float("nan")
    with pytest.raises(NumericError):
        pretrain(model, tiny_dataset, tiny_vocab, tiny_index, TrainConfig(max_epochs=1))
