# models.py
"""
Personalized explanation generators with a disentangled attribute token.

- TransformerGenerator: sequence [attr, user, item, w_1..w_T] with a partial
  causal mask (special tokens see each other, words see specials + the past).
  The user-token output predicts the rating, the item-token output predicts
  the bag of explanation words (context loss).
- RecurrentGenerator: GRU decoder seeded by tanh(W [r_a, r_u, r_i]); rating
  from a 2-layer perceptron on the same concatenation.
"""
import copy
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from config import TrainConfig
from corpus import BOS_ID, EOS_ID, PAD_ID, AttributeSpace, Dataset, Record, Vocabulary
from errors import ConfigError, ContractError, DomainError, NumericError
from numerics import adam_step, backward, gather_rows, log_softmax, make_adam, make_generator, seed_everything

LOG = logging.getLogger("fairgen.models")

# =========================
# KONFIG DIMENSI
# =========================
FULL_DIMS = {
    "transformer": {"emb_dim": 512, "ffn_dim": 2048, "n_layers": 2, "n_heads": 2, "dropout": 0.2},
    "recurrent": {"emb_dim": 300, "hidden_dim": 400, "attr_dim": 100, "dropout": 0.1},
}
DESK_DIMS = {
    "transformer": {"emb_dim": 64, "ffn_dim": 128, "n_layers": 2, "n_heads": 2, "dropout": 0.2},
    "recurrent": {"emb_dim": 64, "hidden_dim": 64, "attr_dim": 16, "dropout": 0.1},
}
INIT_RANGE = 0.1


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "transformer"
    vocab_size: int = 0
    n_users: int = 0
    n_items: int = 0
    n_attributes: int = 2
    emb_dim: int = 64
    ffn_dim: int = 128
    n_layers: int = 2
    n_heads: int = 2
    hidden_dim: int = 64
    attr_dim: int = 16
    dropout: float = 0.2
    max_len: int = 128
    use_attribute: bool = True
    attribute_side: str = "user"

    def validate(self) -> None:
        if self.arch not in ("transformer", "recurrent"):
            raise ConfigError(f"unknown architecture '{self.arch}'")
        dims = [self.vocab_size, self.n_users, self.n_items, self.emb_dim, self.max_len]
        dims += [self.ffn_dim, self.n_layers, self.n_heads] if self.arch == "transformer" else [self.hidden_dim, self.attr_dim]
        if any(d <= 0 for d in dims):
            raise ConfigError(f"model dimensions must be positive: {self}")
        if self.use_attribute and self.n_attributes < 2:
            raise ConfigError("attribute table needs at least 2 values")
        if self.arch == "transformer" and self.emb_dim % self.n_heads:
            raise ConfigError(f"emb_dim {self.emb_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(dataclasses.asdict(self), sort_keys=True).encode()).hexdigest()


def model_config_for(arch: str, dims: str = "desk", **overrides) -> ModelConfig:
    base = dict((FULL_DIMS if dims == "full" else DESK_DIMS)[arch])
    base.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig(arch=arch, **base)


# =========================
# BATCH
# =========================
@dataclass(frozen=True)
class ContextIndex:
    """Maps raw ids to embedding rows."""
    user_index: Dict[str, int]
    item_index: Dict[str, int]
    attribute_space: AttributeSpace

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "ContextIndex":
        return cls({u: i for i, u in enumerate(dataset.user_ids())},
                   {it: i for i, it in enumerate(dataset.item_ids())},
                   dataset.attribute_space)

    @classmethod
    def from_lists(cls, users: Sequence[str], items: Sequence[str], space: AttributeSpace) -> "ContextIndex":
        return cls({u: i for i, u in enumerate(users)}, {it: i for i, it in enumerate(items)}, space)

    def attribute_id(self, value: str) -> int:
        if value not in self.attribute_space:
            raise DomainError(f"attribute value '{value}' not in {list(self.attribute_space.values)}")
        return self.attribute_space.index(value)


@dataclass(frozen=True)
class SequenceBatch:
    attr: torch.Tensor       # (B,)
    user: torch.Tensor       # (B,)
    item: torch.Tensor       # (B,)
    words: torch.Tensor      # (B, T) inputs  [bos, e_1 .. e_n, pad..]
    targets: torch.Tensor    # (B, T) targets [e_1 .. e_n, eos, pad..]
    ratings: torch.Tensor    # (B,)
    lengths: torch.Tensor    # (B,) number of target positions

    def __len__(self) -> int:
        return int(self.user.shape[0])

    def with_attr(self, attr: torch.Tensor) -> "SequenceBatch":
        return dataclasses.replace(self, attr=attr)


def make_batch(records: Sequence[Record], vocab: Vocabulary, index: ContextIndex, max_len: int) -> SequenceBatch:
    seqs = [vocab.encode(r.explanation)[: max_len - 1] for r in records]
    T = max((len(s) + 1 for s in seqs), default=1)
    words = torch.full((len(records), T), PAD_ID, dtype=torch.long)
    targets = torch.full((len(records), T), PAD_ID, dtype=torch.long)
    for b, s in enumerate(seqs):
        words[b, : len(s) + 1] = torch.tensor([BOS_ID] + s, dtype=torch.long)
        targets[b, : len(s) + 1] = torch.tensor(s + [EOS_ID], dtype=torch.long)
    return SequenceBatch(
        attr=torch.tensor([index.attribute_id(r.attribute) for r in records], dtype=torch.long),
        user=torch.tensor([index.user_index[r.user_id] for r in records], dtype=torch.long),
        item=torch.tensor([index.item_index[r.item_id] for r in records], dtype=torch.long),
        words=words,
        targets=targets,
        ratings=torch.tensor([float(r.rating) for r in records]),
        lengths=torch.tensor([len(s) + 1 for s in seqs], dtype=torch.long),
    )


def teacher_forced_batch(ctx: SequenceBatch, sequences: Sequence[Sequence[int]]) -> SequenceBatch:
    """Batch whose targets are the given (sampled) id sequences, same contexts."""
    T = max((len(s) for s in sequences), default=1) or 1
    B = len(sequences)
    words = torch.full((B, T), PAD_ID, dtype=torch.long)
    targets = torch.full((B, T), PAD_ID, dtype=torch.long)
    for b, s in enumerate(sequences):
        s = list(s)
        if s:
            words[b, : len(s)] = torch.tensor([BOS_ID] + s[:-1], dtype=torch.long)
            targets[b, : len(s)] = torch.tensor(s, dtype=torch.long)
    return dataclasses.replace(ctx, words=words, targets=targets,
                               lengths=torch.tensor([len(s) for s in sequences], dtype=torch.long))


# =========================
# MASK
# =========================
def peter_mask(n_special: int = 3, n_words: int = 0) -> torch.Tensor:
    """allowed[i, j] = position i may attend to position j."""
    S = n_special + n_words
    allowed = torch.zeros(S, S, dtype=torch.bool)
    allowed[:n_special, :n_special] = True
    allowed[n_special:, :n_special] = True
    allowed[n_special:, n_special:] = torch.tril(torch.ones(n_words, n_words, dtype=torch.bool))
    return allowed


def block_attribute_attention(allowed: torch.Tensor, attr_pos: int = 0) -> torch.Tensor:
    """No position but the attribute itself may attend to the attribute position."""
    out = allowed.clone()
    out[:, attr_pos] = False
    out[attr_pos, attr_pos] = True
    return out


# =========================
# OUTPUTS / LOSSES
# =========================
@dataclass
class ModelOutput:
    word_logits: torch.Tensor     # (B, T, V)
    rating: torch.Tensor          # (B,)
    context_logits: torch.Tensor  # (B, V)


@dataclass
class LossBreakdown:
    nll: torch.Tensor
    context: torch.Tensor
    rating_mse: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("nll", "context", "rating_mse", "total")}


def nll_loss(word_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean -log p(token) over non-pad target positions."""
    logp = log_softmax(word_logits, axis=-1)
    return F.nll_loss(logp.reshape(-1, logp.shape[-1]), targets.reshape(-1), ignore_index=PAD_ID)


def context_loss(context_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Order-free: mean over explanation words of -log p_context(word)."""
    logp = log_softmax(context_logits, axis=-1)                     # (B, V)
    keep = (targets != PAD_ID) & (targets != EOS_ID)
    picked = torch.gather(logp, 1, targets.clamp(min=0))           # (B, T)
    n = keep.sum()
    if int(n) == 0:
        return context_logits.sum() * 0.0
    return -(picked * keep).sum() / n


def rating_loss(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(pred, truth.to(pred.dtype))


def compute_losses(out: ModelOutput, batch: SequenceBatch,
                   weights: Sequence[float] = (1.0, 1.0, 1.0), include_rating: bool = True) -> LossBreakdown:
    nll = nll_loss(out.word_logits, batch.targets)
    ctx = context_loss(out.context_logits, batch.targets)
    mse = rating_loss(out.rating, batch.ratings)
    w_nll, w_ctx, w_rating = weights
    total = w_nll * nll + w_ctx * ctx
    if include_rating:
        total = total + w_rating * mse
    return LossBreakdown(nll, ctx, mse, total)


# =========================
# MODEL
# =========================
class GeneratorModel(nn.Module):
    """Shared embedding tables and heads; subclasses define the sequence model."""

    def __init__(self, cfg: ModelConfig, attr_dim: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.emb_dim
        self.user_emb = nn.Embedding(cfg.n_users, d)
        self.item_emb = nn.Embedding(cfg.n_items, d)
        self.word_emb = nn.Embedding(cfg.vocab_size, d)
        self.attr_emb = nn.Embedding(cfg.n_attributes, attr_dim) if cfg.use_attribute else None
        self.drop = nn.Dropout(cfg.dropout)

    @property
    def arch(self) -> str:
        return self.cfg.arch

    def embedding_tables(self) -> List[nn.Embedding]:
        tables = [self.user_emb, self.item_emb]
        if self.attr_emb is not None:
            tables.append(self.attr_emb)
        return tables

    def freeze_embeddings(self) -> None:
        for t in self.embedding_tables():
            t.weight.requires_grad_(False)

    def embeddings_frozen(self) -> bool:
        return all(not t.weight.requires_grad for t in self.embedding_tables())

    def preference_embedding(self, batch: SequenceBatch) -> torch.Tensor:
        """Input embedding of the side carrying the protected attribute (r_u or r_i)."""
        if self.cfg.attribute_side == "item":
            return gather_rows(self.item_emb.weight, batch.item)
        return gather_rows(self.user_emb.weight, batch.user)

    def _check_ids(self, batch: SequenceBatch) -> None:
        for name, ids, n in (("user", batch.user, self.cfg.n_users), ("item", batch.item, self.cfg.n_items),
                             ("word", batch.words, self.cfg.vocab_size)):
            if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= n):
                raise IndexError(f"{name} id out of range [0, {n})")
        if self.attr_emb is not None and batch.attr.numel():
            if int(batch.attr.min()) < 0 or int(batch.attr.max()) >= self.cfg.n_attributes:
                raise DomainError("attribute id outside the attribute space")
        if batch.words.shape[1] > self.cfg.max_len:
            raise ContractError(f"sequence length {batch.words.shape[1]} exceeds max_len {self.cfg.max_len}")

    # subclasses: forward(batch) -> ModelOutput, init_state(batch), step(state, tokens) -> (logits, state)


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        B, S, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(B, S, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        scores = scores.masked_fill(~allowed, float("-inf"))
        att = self.drop(torch.softmax(scores, dim=-1))
        return self.proj((att @ v).transpose(1, 2).reshape(B, S, d))


class TransformerBlock(nn.Module):
    def __init__(self, d: int, ffn: int, n_heads: int, dropout: float):
        super().__init__()
        self.attn = SelfAttention(d, n_heads, dropout)
        self.ff = nn.Sequential(nn.Linear(d, ffn), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ffn, d))
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.drop(self.attn(x, allowed)))
        return self.norm2(x + self.drop(self.ff(x)))


class TransformerGenerator(GeneratorModel):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg, attr_dim=cfg.emb_dim)
        d = cfg.emb_dim
        self.n_special = 3 if cfg.use_attribute else 2
        self.pos_emb = nn.Embedding(self.n_special + cfg.max_len, d)
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.ffn_dim, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_layers))
        self.lm_head = nn.Linear(d, cfg.vocab_size)
        self.context_head = nn.Linear(d, cfg.vocab_size)
        self.rating_head = nn.Sequential(nn.Linear(d, d), nn.Tanh(), nn.Linear(d, 1))
        # NATTR view flips this at inference
        self.attend_to_attribute = True

    @property
    def user_pos(self) -> int:
        return self.n_special - 2

    @property
    def item_pos(self) -> int:
        return self.n_special - 1

    def attention_mask(self, n_words: int) -> torch.Tensor:
        allowed = peter_mask(self.n_special, n_words)
        if self.cfg.use_attribute and not self.attend_to_attribute:
            allowed = block_attribute_attention(allowed, 0)
        return allowed

    def _hidden(self, batch: SequenceBatch) -> torch.Tensor:
        self._check_ids(batch)
        specials = [self.attr_emb(batch.attr)] if self.cfg.use_attribute else []
        specials += [self.user_emb(batch.user), self.item_emb(batch.item)]
        x = torch.cat([torch.stack(specials, dim=1), self.word_emb(batch.words)], dim=1)
        x = x + self.pos_emb(torch.arange(x.shape[1]))
        x = self.drop(x)
        allowed = self.attention_mask(batch.words.shape[1])
        for blk in self.blocks:
            x = blk(x, allowed)
        return x

    def forward(self, batch: SequenceBatch) -> ModelOutput:
        h = self._hidden(batch)
        return ModelOutput(
            word_logits=self.lm_head(h[:, self.n_special:]),
            rating=self.rating_head(h[:, self.user_pos]).squeeze(-1),
            context_logits=self.context_head(h[:, self.item_pos]),
        )

    def predict_ratings(self, batch: SequenceBatch) -> torch.Tensor:
        return self.forward(batch).rating

    # decoding re-runs the whole prefix each step
    def init_state(self, batch: SequenceBatch):
        return torch.full((len(batch), 1), BOS_ID, dtype=torch.long)

    def step(self, batch: SequenceBatch, state: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self._hidden(dataclasses.replace(batch, words=state))
        return self.lm_head(h[:, -1]), state

    def advance(self, state: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        return torch.cat([state, tokens.unsqueeze(1)], dim=1)


class RecurrentGenerator(GeneratorModel):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg, attr_dim=cfg.attr_dim)
        d, H = cfg.emb_dim, cfg.hidden_dim
        ctx_dim = 2 * d + (cfg.attr_dim if cfg.use_attribute else 0)
        self.init_proj = nn.Linear(ctx_dim, H)
        self.gru = nn.GRU(d, H, num_layers=1, batch_first=True)
        self.out_proj = nn.Linear(H, cfg.vocab_size)
        self.context_head = nn.Linear(H, cfg.vocab_size)
        self.rating_head = nn.Sequential(nn.Linear(ctx_dim, H), nn.Tanh(), nn.Linear(H, 1))

    def context_vector(self, batch: SequenceBatch) -> torch.Tensor:
        parts = [self.attr_emb(batch.attr)] if self.cfg.use_attribute else []
        parts += [self.user_emb(batch.user), self.item_emb(batch.item)]
        return torch.cat(parts, dim=-1)

    def forward(self, batch: SequenceBatch) -> ModelOutput:
        self._check_ids(batch)
        ctx = self.context_vector(batch)
        h0 = torch.tanh(self.init_proj(ctx))
        out, _ = self.gru(self.drop(self.word_emb(batch.words)), h0.unsqueeze(0).contiguous())
        return ModelOutput(
            word_logits=self.out_proj(self.drop(out)),
            rating=self.rating_head(ctx).squeeze(-1),
            context_logits=self.context_head(h0),
        )

    def predict_ratings(self, batch: SequenceBatch) -> torch.Tensor:
        self._check_ids(batch)
        return self.rating_head(self.context_vector(batch)).squeeze(-1)

    def init_state(self, batch: SequenceBatch):
        self._check_ids(batch)
        h0 = torch.tanh(self.init_proj(self.context_vector(batch)))
        return (h0.unsqueeze(0).contiguous(), torch.full((len(batch),), BOS_ID, dtype=torch.long))

    def step(self, batch: SequenceBatch, state) -> Tuple[torch.Tensor, tuple]:
        h, last = state
        out, h_new = self.gru(self.word_emb(last).unsqueeze(1), h)
        return self.out_proj(out[:, -1]), (h_new, last)

    def advance(self, state, tokens: torch.Tensor):
        return (state[0], tokens)


# =========================
# BUILD
# =========================
def build(cfg: ModelConfig, seed: int) -> GeneratorModel:
    """Weights uniform in [-0.1, 0.1] from `seed`; biases 0, layer norms identity."""
    cfg.validate()
    model = TransformerGenerator(cfg) if cfg.arch == "transformer" else RecurrentGenerator(cfg)
    gen = make_generator(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias") or "bias_" in name:
                p.zero_()
            else:
                p.uniform_(-INIT_RANGE, INIT_RANGE, generator=gen)
    LOG.info(f"Built {cfg.arch} generator: {sum(p.numel() for p in model.parameters()):,} parameters")
    return model


def build_for_dataset(run_cfg, vocab: Vocabulary, index: ContextIndex, seed: int) -> GeneratorModel:
    cfg = model_config_for(
        run_cfg.arch, run_cfg.dims,
        emb_dim=run_cfg.emb_dim, ffn_dim=run_cfg.ffn_dim, n_layers=run_cfg.n_layers, n_heads=run_cfg.n_heads,
        hidden_dim=run_cfg.hidden_dim, attr_dim=run_cfg.attr_dim, dropout=run_cfg.dropout,
        vocab_size=len(vocab), n_users=len(index.user_index), n_items=len(index.item_index),
        n_attributes=len(index.attribute_space.values), max_len=run_cfg.max_decode_len,
        use_attribute=run_cfg.use_attribute, attribute_side=index.attribute_space.side,
    )
    return build(cfg, seed)


# =========================
# FORWARD HELPERS
# =========================
def forward_logits(model: GeneratorModel, batch: SequenceBatch) -> ModelOutput:
    return model(batch)


def counterfactual_batch(model: GeneratorModel, batch: SequenceBatch, attr_ids) -> SequenceBatch:
    """Same contexts with only the attribute token replaced."""
    if model.attr_emb is None:
        raise DomainError("model has no attribute table")
    attr = torch.as_tensor(attr_ids, dtype=torch.long)
    if attr.dim() == 0:
        attr = attr.expand(len(batch)).clone()
    if attr.numel() and (int(attr.min()) < 0 or int(attr.max()) >= model.cfg.n_attributes):
        raise DomainError("counterfactual attribute outside the attribute space")
    return batch.with_attr(attr)


def counterfactual_view(model: GeneratorModel, batch: SequenceBatch, attr_ids) -> ModelOutput:
    """Forward pass in the world where the attribute token is a'; weights untouched."""
    return model(counterfactual_batch(model, batch, attr_ids))


def sequence_log_probs(model: GeneratorModel, ctx: SequenceBatch, sequences: Sequence[Sequence[int]]) -> torch.Tensor:
    """sum_t log p(y_t) under the full softmax, one value per sequence (differentiable)."""
    tf = teacher_forced_batch(ctx, sequences)
    # same (dropout-free) policy the samples were drawn from
    was_training = model.training
    model.eval()
    try:
        logits = model(tf).word_logits
    finally:
        model.train(was_training)
    logp = log_softmax(logits, axis=-1)
    picked = torch.gather(logp, 2, tf.targets.unsqueeze(-1)).squeeze(-1)
    mask = torch.arange(tf.targets.shape[1]).unsqueeze(0) < tf.lengths.unsqueeze(1)
    return (picked * mask).sum(dim=1)


# =========================
# DECODING
# =========================
def sample_noise(seeds: Sequence[int], max_len: int) -> torch.Tensor:
    """Row b = uniform noise stream of seed b. Same seed -> same stream in every world."""
    if not len(seeds):
        return torch.zeros(0, max_len)
    return torch.stack([torch.rand(max_len, generator=make_generator(s)) for s in seeds])


@torch.no_grad()
def sample_batch(model: GeneratorModel, ctx: SequenceBatch, k: int = 5, max_len: int = 128,
                 noise: Optional[torch.Tensor] = None, seed: int = 0) -> List[List[int]]:
    """
    Top-k sampling by inverse CDF on per-step uniform noise. Returned ids
    include the end marker when it was emitted.
    """
    if k < 1:
        raise ConfigError(f"top-k needs k >= 1, got {k}")
    B = len(ctx)
    if noise is None:
        noise = sample_noise([seed * 1_000_003 + b for b in range(B)], max_len)
    was_training = model.training
    model.eval()
    state = model.init_state(ctx)
    out: List[List[int]] = [[] for _ in range(B)]
    done = torch.zeros(B, dtype=torch.bool)
    try:
        for t in range(max_len):
            logits, state = model.step(ctx, state)
            kk = min(k, logits.shape[-1])
            top_val, top_idx = torch.topk(logits, kk, dim=-1)
            probs = torch.softmax(top_val, dim=-1)
            cdf = torch.cumsum(probs, dim=-1)
            choice = (cdf < noise[:, t:t + 1]).sum(dim=-1).clamp(max=kk - 1)
            tokens = top_idx.gather(1, choice.unsqueeze(1)).squeeze(1)
            for b in range(B):
                if not done[b]:
                    out[b].append(int(tokens[b]))
            done |= tokens == EOS_ID
            if bool(done.all()):
                break
            state = model.advance(state, tokens)
    finally:
        model.train(was_training)
    return out


def sample(model: GeneratorModel, record: Record, vocab: Vocabulary, index: ContextIndex,
           k: int = 5, max_len: int = 128, seed: int = 0) -> List[str]:
    ctx = make_batch([record], vocab, index, model.cfg.max_len)
    ids = sample_batch(model, ctx, k, max_len, noise=sample_noise([seed], max_len))[0]
    return vocab.decode(ids)


# =========================
# TRAINING
# =========================
def iterate_batches(records: Sequence[Record], batch_size: int, gen: Optional[torch.Generator] = None):
    order = torch.randperm(len(records), generator=gen).tolist() if gen is not None else list(range(len(records)))
    for start in range(0, len(order), batch_size):
        yield [records[i] for i in order[start:start + batch_size]]


@torch.no_grad()
def evaluate_loss(model: GeneratorModel, records: Sequence[Record], vocab: Vocabulary, index: ContextIndex,
                  batch_size: int = 64, weights: Sequence[float] = (1.0, 1.0, 1.0),
                  include_rating: bool = True) -> Dict[str, float]:
    was_training = model.training
    model.eval()
    sums = {"nll": 0.0, "context": 0.0, "rating_mse": 0.0, "total": 0.0}
    n = 0
    for chunk in iterate_batches(records, batch_size):
        batch = make_batch(chunk, vocab, index, model.cfg.max_len)
        parts = compute_losses(model(batch), batch, weights, include_rating).as_floats()
        for key in sums:
            sums[key] += parts[key] * len(chunk)
        n += len(chunk)
    model.train(was_training)
    return {k: (v / n if n else float("nan")) for k, v in sums.items()}


@dataclass
class PretrainResult:
    model: GeneratorModel
    curve: pd.DataFrame
    best_epoch: int
    steps: int


def pretrain(model: GeneratorModel, dataset: Dataset, vocab: Vocabulary, index: ContextIndex, cfg: TrainConfig,
             extra_loss: Optional[Callable[[GeneratorModel, SequenceBatch], torch.Tensor]] = None,
             batch_hook: Optional[Callable[[int], None]] = None,
             epoch_hook: Optional[Callable[[int], None]] = None,
             start_step: int = 0, train_records: Optional[Sequence[Record]] = None) -> PretrainResult:
    """
    Minimize LossBreakdown.total (+ extra_loss). Keeps the epoch whose
    validation total is not beaten in the next `patience` epochs.
    """
    train = list(train_records) if train_records is not None else dataset.split_records("train")
    valid = dataset.split_records("valid")
    if not train:
        raise ContractError("pretraining needs a non-empty train split")
    seed_everything(cfg.seed)
    shuffle_gen = make_generator(cfg.seed + 17)
    opt = make_adam(model.parameters(), cfg.lr_pretrain)
    best_state = copy.deepcopy(model.state_dict())
    best_val, best_epoch, bad_epochs = float("inf"), 0, 0
    rows, step = [], start_step

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        sums = np.zeros(4)
        n = 0
        bar = tqdm(list(iterate_batches(train, cfg.batch_size, shuffle_gen)), desc=f"Epoch {epoch}/{cfg.max_epochs}",
                   leave=False, disable=not LOG.isEnabledFor(logging.INFO))
        for chunk in bar:
            batch = make_batch(chunk, vocab, index, model.cfg.max_len)
            parts = compute_losses(model(batch), batch, cfg.loss_weights)
            loss = parts.total if extra_loss is None else parts.total + extra_loss(model, batch)
            if not torch.isfinite(loss):
                raise NumericError(f"loss diverged (NaN/inf) at epoch {epoch}, step {step}")
            opt.zero_grad()
            backward(loss)
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            adam_step(opt)
            step += 1
            vals = parts.as_floats()
            sums += np.array([vals["nll"], vals["context"], vals["rating_mse"], vals["total"]]) * len(chunk)
            n += len(chunk)
            if batch_hook is not None:
                batch_hook(step)
        if epoch_hook is not None:
            epoch_hook(epoch)

        val = evaluate_loss(model, valid or train, vocab, index, weights=cfg.loss_weights)["total"]
        if not np.isfinite(val):
            raise NumericError(f"validation loss diverged at epoch {epoch}")
        train_avg = sums / max(n, 1)
        rows.append({"epoch": epoch, "step": step, "train_nll": train_avg[0], "train_context": train_avg[1],
                     "train_rating_mse": train_avg[2], "train_total": train_avg[3], "valid_total": val})
        LOG.info(f"Epoch {epoch}: train {train_avg[3]:.4f} | valid {val:.4f}")
        if val < best_val:
            best_val, best_epoch, bad_epochs = val, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                LOG.info(f"Early stop: no improvement for {cfg.patience} epochs, keeping epoch {best_epoch}")
                break

    model.load_state_dict(best_state)
    curve = pd.DataFrame(rows, columns=["epoch", "step", "train_nll", "train_context", "train_rating_mse",
                                        "train_total", "valid_total"])
    return PretrainResult(model, curve, best_epoch, step)
