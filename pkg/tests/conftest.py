import pytest
import torch

from config import RunConfig, TrainConfig
from corpus import AttributeSpace, Record, SynthesisSpec, build_vocab, split, synthesize
from models import ContextIndex, build, model_config_for

FEATURES = ("graphics", "story", "controller", "price", "sound")


@pytest.fixture
def space():
    return AttributeSpace("gender", ("male", "female"))


@pytest.fixture
def tiny_spec():
    return SynthesisSpec(
        n_users=8, n_items=5, n_records=60,
        attribute_probs={"male": 0.5, "female": 0.5},
        mean_length={"male": 10.0, "female": 4.0},
        mean_features={"male": 2.0, "female": 1.0},
        max_len=16, features=FEATURES, features_per_item=2,
    )


@pytest.fixture
def tiny_dataset(tiny_spec):
    return split(synthesize(tiny_spec, seed=3), (0.8, 0.1, 0.1), seed=3)


@pytest.fixture
def tiny_vocab(tiny_dataset):
    return build_vocab((r.explanation for r in tiny_dataset.split_records("train")), 200, FEATURES)


@pytest.fixture
def tiny_index(tiny_dataset):
    return ContextIndex.from_dataset(tiny_dataset)


@pytest.fixture
def make_model(tiny_vocab, tiny_index):
    """Desk-sized generator factory; dropout off so forward passes are deterministic."""

    def _make(arch="transformer", use_attribute=True, seed=0, max_len=20):
        cfg = model_config_for(
            arch, "desk", emb_dim=16, ffn_dim=32, n_heads=2, hidden_dim=16, attr_dim=4, dropout=0.0,
            vocab_size=len(tiny_vocab), n_users=len(tiny_index.user_index), n_items=len(tiny_index.item_index),
            n_attributes=2, max_len=max_len, use_attribute=use_attribute,
        )
        return build(cfg, seed)

    return _make


@pytest.fixture
def train_cfg():
    return TrainConfig(lam=0.2, eta=0.6, n_samples=2, lambda_d=0.5, lr_pretrain=1e-3, lr_finetune=1e-4,
                       batch_size=8, finetune_batch_size=8, max_decode_len=10, top_k=3, seed=0,
                       max_epochs=2, patience=5)


@pytest.fixture
def run_cfg(tmp_path):
    return RunConfig(
        data_path=str(tmp_path / "corpus.jsonl"), lexicon_path=str(tmp_path / "features.txt"),
        out_dir=str(tmp_path / "out"), emb_dim=16, ffn_dim=32, hidden_dim=16, attr_dim=4, dropout=0.0,
        max_decode_len=16, n_samples=1, top_k=3, batch_size=8, max_epochs=1,
        synth_users=6, synth_items=4, synth_records=80, synth_mean_length=(8.0, 4.0),
        eval_measures=("L", "F"),
    )


def make_record(n_tokens, attribute="male", user="u0", item="i0", rating=4.0, token="w"):
    return Record(user, item, attribute, rating, tuple([token] * n_tokens))


def params_equal(a: torch.nn.Module, b: torch.nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)
