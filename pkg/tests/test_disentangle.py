import copy
import math

import pytest
import torch

from config import TrainConfig
from conftest import params_equal
from disentangle import (AdversarialTrainer, AlternationSchedule, Discriminator, adversarial_loss,
                         alternate_train, build_discriminator, chance_level, classifier_accuracy, disc_forward,
                         owner_embeddings, probe_accuracy)
from errors import ConfigError, ContractError
from models import make_batch, pretrain
from numerics import backward, make_generator


def _zeroed(disc):
    with torch.no_grad():
        for p in disc.parameters():
            p.zero_()
    return disc


# =========================
# discriminator
# =========================
def test_zero_discriminator_is_uniform():
    disc = _zeroed(Discriminator(4, 2, hidden=3))
    assert torch.allclose(disc_forward(disc, torch.randn(5, 4)), torch.full((5, 2), 0.5), atol=1e-15)


def test_discriminator_hand_weights():
    disc = Discriminator(1, 2, hidden=1)
    with torch.no_grad():
        disc.net[0].weight.fill_(1.0)
        disc.net[0].bias.zero_()
        disc.net[2].weight.copy_(torch.tensor([[1.0], [-1.0]]))
        disc.net[2].bias.zero_()
    p = disc_forward(disc, torch.tensor([[2.0], [-3.0]]))
    assert p[0, 0].item() == pytest.approx(math.exp(4) / (1 + math.exp(4)), abs=1e-12)
    assert torch.allclose(p[1], torch.tensor([0.5, 0.5]), atol=1e-15)


def test_discriminator_dim_mismatch():
    with pytest.raises(ContractError):
        build_discriminator(4, 2)(torch.ones(2, 5))


def test_discriminator_bad_dims():
    with pytest.raises(ConfigError):
        Discriminator(4, 1)


def test_adversarial_loss_at_chance():
    disc = _zeroed(build_discriminator(3, 2))
    loss = adversarial_loss(disc, torch.randn(6, 3), torch.tensor([0, 1, 0, 1, 1, 0]), 0.5)
    assert loss.item() == pytest.approx(0.5 * math.log(0.5), abs=1e-12)
    with pytest.raises(ConfigError):
        adversarial_loss(disc, torch.randn(2, 3), torch.tensor([0, 1]), -1.0)


def test_floor_stops_rows_already_at_chance():
    disc = build_discriminator(3, 2, seed=0)
    with torch.no_grad():
        disc.net[2].bias.copy_(torch.tensor([3.0, -3.0]))
    attr = torch.tensor([0, 1, 0, 1])
    r = torch.randn(4, 3, generator=make_generator(5), requires_grad=True)

    floored = adversarial_loss(disc, r, attr, 1.0, floor=True)
    logp = torch.log_softmax(disc(r), dim=-1).gather(1, attr.view(-1, 1)).squeeze(1)
    assert floored.item() == pytest.approx(float(logp.clamp(min=math.log(0.5)).mean()), abs=1e-12)
    backward(floored)
    assert torch.all(r.grad[[1, 3]] == 0)
    assert torch.all(r.grad[[0, 2]].abs().sum(dim=1) > 0)

    r.grad = None
    backward(adversarial_loss(disc, r, attr, 1.0))
    assert torch.all(r.grad.abs().sum(dim=1) > 0)


def test_build_discriminator_seeded():
    a, b = build_discriminator(8, 2, seed=4), build_discriminator(8, 2, seed=4)
    assert params_equal(a, b)
    assert a.hidden == 64 and build_discriminator(8, 2, hidden=512).hidden == 512


# =========================
# schedule
# =========================
def test_schedule_validation():
    with pytest.raises(ConfigError):
        AlternationSchedule(1, 0)
    with pytest.raises(ConfigError):
        AlternationSchedule(1, 1, "minute")


def test_batch_schedule_counts(make_model, tiny_dataset, tiny_vocab, tiny_index):
    cfg = TrainConfig(lambda_d=0.5, schedule_x=2, schedule_z=1, schedule_granularity="batch", batch_size=8)
    model = make_model("transformer")
    trainer = AdversarialTrainer(model, build_discriminator(16, 2), tiny_vocab, tiny_index, cfg,
                                 tiny_dataset.split_records("train"))
    for count in range(1, 7):
        trainer.on_generator_unit(count)
    assert trainer.disc_steps == 3
    assert len(trainer.history) == 3


# =========================
# gradient routing
# =========================
@pytest.mark.parametrize("arch", ["transformer", "recurrent"])
def test_phases_touch_only_their_side(make_model, tiny_dataset, tiny_vocab, tiny_index, train_cfg, arch):
    model = make_model(arch)
    disc = build_discriminator(16, 2, seed=1)
    train = tiny_dataset.split_records("train")
    trainer = AdversarialTrainer(model, disc, tiny_vocab, tiny_index, train_cfg, train)

    batch = make_batch(train[:4], tiny_vocab, tiny_index, 20)
    term = trainer.generator_term(model, batch)
    assert term.item() >= 0.5 * math.log(0.5) - 1e-12
    backward(term + adversarial_loss(disc, model.preference_embedding(batch), batch.attr, 0.5))
    assert all(p.grad is None for p in disc.parameters())
    assert float(model.user_emb.weight.grad.abs().sum()) > 0

    model.zero_grad(set_to_none=True)
    before_model, before_disc = copy.deepcopy(model), copy.deepcopy(disc)
    trainer.disc_batch(train[:4])
    assert all(p.grad is None for p in model.parameters())
    assert params_equal(model, before_model)
    assert not params_equal(disc, before_disc)


def test_zero_lambda_d_is_plain_pretraining(make_model, tiny_dataset, tiny_vocab, tiny_index):
    cfg = TrainConfig(lambda_d=0.0, lr_pretrain=1e-3, batch_size=8, max_epochs=2, seed=2)
    disc = build_discriminator(16, 2)
    disc_before = copy.deepcopy(disc)
    adv, _ = alternate_train(make_model("transformer"), disc, tiny_dataset, tiny_vocab, tiny_index, cfg)
    plain = pretrain(make_model("transformer"), tiny_dataset, tiny_vocab, tiny_index, cfg)
    assert params_equal(adv.model, plain.model)
    assert adv.curve.equals(plain.curve)
    assert params_equal(disc, disc_before)


def test_adversarial_training_updates_discriminator(make_model, tiny_dataset, tiny_vocab, tiny_index, train_cfg):
    disc = build_discriminator(16, 2)
    disc_before = copy.deepcopy(disc)
    result, out = alternate_train(make_model("transformer"), disc, tiny_dataset, tiny_vocab, tiny_index, train_cfg)
    assert out is disc and not params_equal(disc, disc_before)
    assert len(result.curve) >= 1


# =========================
# probe
# =========================
def test_probe_separates_labelled_clusters():
    gen = make_generator(0)
    attr = torch.tensor([0, 1] * 20)
    emb = torch.randn(40, 6, generator=gen) * 0.1
    emb[:, 0] += 1.0 - 2.0 * attr
    assert probe_accuracy(emb, attr, 2, seed=0) >= 0.9


def test_probe_needs_two_rows():
    with pytest.raises(ContractError):
        probe_accuracy(torch.ones(1, 3), torch.tensor([0]), 2)


def test_chance_level():
    assert chance_level(torch.tensor([0, 0, 0, 1]), 2) == 0.75
    assert chance_level(torch.tensor([], dtype=torch.long), 2) == 0.5


def test_classifier_accuracy_empty():
    assert math.isnan(classifier_accuracy(build_discriminator(3, 2), torch.zeros(0, 3),
                                          torch.tensor([], dtype=torch.long)))


def test_owner_embeddings_one_row_per_user(make_model, tiny_dataset, tiny_index):
    model = make_model("transformer")
    emb, attr = owner_embeddings(model, tiny_dataset, tiny_index)
    assert emb.shape == (len(tiny_dataset.user_ids()), 16)
    first = {}
    for r in tiny_dataset.records:
        first.setdefault(r.user_id, r.attribute)
    expected = [tiny_dataset.attribute_space.index(first[u]) for u in sorted(first)]
    assert attr.tolist() == expected
