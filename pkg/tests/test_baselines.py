import dataclasses

import pytest
import torch

from baselines import NormSpec, nattr_transform, norm_preprocess, resolve_baseline
from config import RunConfig
from conftest import make_record
from corpus import AttributeSpace
from errors import ConfigError, ContractError, DomainError, ValidationError
from models import make_batch
from quality import make_oracle

LENGTH = NormSpec(make_oracle("L"), threshold=0.1)


def _records(spec):
    return [make_record(n, attribute=attr, user=f"u{i}") for i, (attr, n) in enumerate(spec)]


# =========================
# NORM
# =========================
def test_norm_worked_example(space):
    records = _records([("male", 6), ("male", 4), ("female", 5), ("female", 1), ("female", 3)])
    result = norm_preprocess(records, space, LENGTH)
    assert result.removed == [3, 4]
    assert result.original_gap == 2.0 and result.final_gap == 0.0
    assert [len(r.explanation) for r in result.records] == [6, 4, 5]
    assert result.manifest(records)["attribute"].tolist() == ["female", "female"]


def test_norm_noop_when_means_equal(space):
    records = _records([("male", 6), ("male", 2), ("female", 4), ("female", 4)])
    result = norm_preprocess(records, space, LENGTH)
    assert result.removed == [] and result.records == records
    assert result.manifest(records).empty


def test_norm_three_groups():
    space = AttributeSpace("age", ("young", "mid", "old"))
    spec = [("young", 5)] * 6 + [("mid", 5)] * 6 + [("old", 5)] * 9 + [("old", 15)]
    records = _records(spec)
    result = norm_preprocess(records, space, LENGTH)
    assert result.removed == [21]
    assert result.original_gap == pytest.approx(1.0) and result.final_gap == 0.0


def test_norm_removes_only_from_larger_group(space):
    spec = [("male", n) for n in (9, 3, 7, 8, 2, 6)] + [("female", n) for n in (4, 4, 5)]
    records = _records(spec)
    result = norm_preprocess(records, space, NormSpec(make_oracle("L"), threshold=0.5))
    assert result.removed
    assert {records[i].attribute for i in result.removed} == {"male"}
    assert result.final_gap <= 0.5 * result.original_gap


def test_norm_refuses_to_empty_a_group(space):
    with pytest.raises(ContractError):
        norm_preprocess(_records([("male", 1), ("female", 5), ("female", 5)]), space, LENGTH)


def test_norm_input_checks(space):
    with pytest.raises(DomainError):
        norm_preprocess(_records([("male", 1), ("male", 5)]), space, LENGTH)
    with pytest.raises(ValidationError):
        norm_preprocess(_records([("male", 1), ("other", 5)]), space, LENGTH)
    with pytest.raises(ConfigError):
        NormSpec(make_oracle("L"), threshold=0.0)


# =========================
# NATTR
# =========================
@pytest.fixture
def batch(tiny_dataset, tiny_vocab, tiny_index):
    return make_batch(tiny_dataset.split_records("train")[:4], tiny_vocab, tiny_index, 20)


def test_nattr_transformer_hides_attribute(make_model, batch):
    model = make_model("transformer")
    view = nattr_transform(model)
    mask = view.attention_mask(3)
    assert mask[:, 0].tolist() == [True] + [False] * 5
    assert model.attend_to_attribute and not view.attend_to_attribute
    assert torch.equal(view(batch).word_logits, view(batch.with_attr(1 - batch.attr)).word_logits)
    again = nattr_transform(view)
    assert torch.equal(again.attention_mask(3), mask)


def test_nattr_recurrent_redraws_attribute_rows(make_model):
    model = make_model("recurrent")
    before = {k: v.clone() for k, v in model.state_dict().items()}
    view = nattr_transform(model, seed=3)
    w = view.attr_emb.weight
    assert float(w.abs().max()) <= 1.0 and not torch.equal(w, before["attr_emb.weight"])
    state = view.state_dict()
    assert all(torch.equal(state[k], v) for k, v in before.items() if k != "attr_emb.weight")
    assert all(torch.equal(model.state_dict()[k], v) for k, v in before.items())


def test_nattr_needs_attribute_table(make_model):
    with pytest.raises(DomainError):
        nattr_transform(make_model("recurrent", use_attribute=False))


# =========================
# baseline identities
# =========================
@pytest.mark.parametrize("name,use_attribute,lam,lambda_d,finetune", [
    ("raw", False, 0.0, 0.0, False),
    ("attr", True, 0.0, 0.0, True),
    ("adv", False, 0.0, 0.5, False),
    ("norm", False, 0.0, 0.0, False),
    ("nattr", True, 0.0, 0.0, False),
    ("coffee", True, 0.3, 0.5, True),
])
def test_resolve_baseline(name, use_attribute, lam, lambda_d, finetune):
    resolved, plan = resolve_baseline(RunConfig(baseline=name, lam=0.3, lambda_d=0.5))
    assert (plan.use_attribute, plan.lam, plan.lambda_d, plan.finetune) == (use_attribute, lam, lambda_d, finetune)
    assert resolved.use_attribute == use_attribute
    assert plan.norm_data == (name == "norm")
    assert plan.nattr_inference == (name == "nattr")


def test_adv_needs_positive_lambda_d():
    with pytest.raises(ConfigError):
        resolve_baseline(RunConfig(baseline="adv", lambda_d=0.0))


def test_resolve_keeps_other_fields():
    cfg = RunConfig(baseline="raw", eta=0.3, top_k=7)
    resolved, _ = resolve_baseline(cfg)
    assert dataclasses.replace(resolved, use_attribute=True, lam=cfg.lam, lambda_d=cfg.lambda_d) == cfg
