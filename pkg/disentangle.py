# disentangle.py
"""
Adversarial scrubbing of the protected attribute from preference embeddings.

Generator phase: D frozen, generator minimizes L_gen + lambda_D * log D(r, a).
Discriminator phase: generator untouched (embeddings detached), D minimizes
-log D(r, a). Phases alternate X / Z units (epochs or batches).
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from config import GRANULARITIES, TrainConfig
from corpus import Dataset, Record, Vocabulary
from errors import ConfigError, ContractError
from models import (ContextIndex, GeneratorModel, PretrainResult, SequenceBatch, iterate_batches,
                    make_batch, pretrain)
from numerics import adam_step, backward, log_softmax, make_adam, make_generator, softmax

LOG = logging.getLogger("fairgen.disentangle")

DISC_HIDDEN_FULL = 512
DISC_HIDDEN_DESK = 64
DISC_LR = 1e-3


# =========================
# DISCRIMINATOR
# =========================
class Discriminator(nn.Module):
    """2-layer perceptron r -> logits over the attribute values."""

    def __init__(self, in_dim: int, n_values: int, hidden: int = DISC_HIDDEN_DESK):
        super().__init__()
        if in_dim <= 0 or hidden <= 0 or n_values < 2:
            raise ConfigError(f"bad discriminator dims: in={in_dim} hidden={hidden} out={n_values}")
        self.in_dim = in_dim
        self.n_values = n_values
        self.hidden = hidden
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, n_values))

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        if r.shape[-1] != self.in_dim:
            raise ContractError(f"discriminator expects dim {self.in_dim}, got {r.shape[-1]}")
        return self.net(r)


def build_discriminator(in_dim: int, n_values: int, hidden: Optional[int] = None, seed: int = 0) -> Discriminator:
    disc = Discriminator(in_dim, n_values, hidden or DISC_HIDDEN_DESK)
    gen = make_generator(seed + 101)
    with torch.no_grad():
        for name, p in disc.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                p.uniform_(-0.1, 0.1, generator=gen)
    return disc


def disc_forward(disc: Discriminator, r: torch.Tensor) -> torch.Tensor:
    """Probability vector over the attribute values, one row per embedding."""
    return softmax(disc(r), axis=-1)


def adversarial_loss(disc: Discriminator, r: torch.Tensor, attr: torch.Tensor, lambda_d: float,
                     floor: bool = False) -> torch.Tensor:
    """
    lambda_D * mean log D(r, a). The generator descends this term.

    With floor=True each row stops at log(1/|A|): once D is at chance for a
    row, that row stops contributing gradient.
    """
    if lambda_d < 0:
        raise ConfigError(f"lambda_d must be >= 0, got {lambda_d}")
    logp = log_softmax(disc(r), axis=-1).gather(1, attr.view(-1, 1))
    if floor:
        logp = logp.clamp(min=-math.log(disc.n_values))
    return lambda_d * logp.mean()


def discriminator_loss(disc: Discriminator, r: torch.Tensor, attr: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(disc(r), attr)


# =========================
# SCHEDULE
# =========================
@dataclass(frozen=True)
class AlternationSchedule:
    x: int = 1
    z: int = 1
    granularity: str = "batch"

    def __post_init__(self):
        if self.x < 1 or self.z < 1:
            raise ConfigError(f"alternation schedule needs X >= 1 and Z >= 1, got X={self.x} Z={self.z}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}, got '{self.granularity}'")

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AlternationSchedule":
        return cls(cfg.schedule_x, cfg.schedule_z, cfg.schedule_granularity)


def set_trainable(module: nn.Module, flag: bool) -> Dict[str, bool]:
    """Toggle requires_grad, returning the previous flags for restore_trainable."""
    before = {name: p.requires_grad for name, p in module.named_parameters()}
    for p in module.parameters():
        p.requires_grad_(flag)
    return before


def restore_trainable(module: nn.Module, flags: Dict[str, bool]) -> None:
    for name, p in module.named_parameters():
        p.requires_grad_(flags.get(name, True))


# =========================
# PHASES
# =========================
class AdversarialTrainer:
    """Holds D, its optimizer and the discriminator-phase record stream."""

    def __init__(self, model: GeneratorModel, disc: Discriminator, vocab: Vocabulary, index: ContextIndex,
                 cfg: TrainConfig, records: Sequence[Record]):
        self.model = model
        self.disc = disc
        self.vocab = vocab
        self.index = index
        self.cfg = cfg
        self.records = list(records)
        self.schedule = AlternationSchedule.from_config(cfg)
        self.opt = make_adam(disc.parameters(), cfg.disc_lr or DISC_LR)
        self._gen = make_generator(cfg.seed + 29)
        self._stream = iter(())
        self.disc_steps = 0
        self.history: List[float] = []

    def generator_term(self, model: GeneratorModel, batch: SequenceBatch) -> torch.Tensor:
        """Extra generator loss; D's parameters stay out of the graph's leaves."""
        set_trainable(self.disc, False)
        return adversarial_loss(self.disc, model.preference_embedding(batch), batch.attr, self.cfg.lambda_d,
                                floor=True)

    def _next_chunk(self) -> List[Record]:
        chunk = next(self._stream, None)
        if chunk is None:
            self._stream = iterate_batches(self.records, self.cfg.batch_size, self._gen)
            chunk = next(self._stream)
        return chunk

    def disc_batch(self, chunk: Sequence[Record]) -> float:
        batch = make_batch(chunk, self.vocab, self.index, self.model.cfg.max_len)
        with torch.no_grad():
            r = self.model.preference_embedding(batch)
        set_trainable(self.disc, True)
        self.disc.train()
        loss = discriminator_loss(self.disc, r, batch.attr)
        self.opt.zero_grad()
        backward(loss)
        adam_step(self.opt)
        set_trainable(self.disc, False)
        self.disc_steps += 1
        return float(loss.detach())

    def disc_epoch(self) -> float:
        losses = [self.disc_batch(chunk) for chunk in iterate_batches(self.records, self.cfg.batch_size, self._gen)]
        return float(np.mean(losses)) if losses else float("nan")

    def discriminator_phase(self) -> None:
        if self.schedule.granularity == "epoch":
            losses = [self.disc_epoch() for _ in range(self.schedule.z)]
        else:
            losses = [self.disc_batch(self._next_chunk()) for _ in range(self.schedule.z)]
        self.history.append(float(np.mean(losses)))
        LOG.debug(f"Discriminator phase: loss {self.history[-1]:.4f} (step {self.disc_steps})")

    def on_generator_unit(self, count: int) -> None:
        if count % self.schedule.x == 0:
            self.discriminator_phase()


def alternate_train(model: GeneratorModel, disc: Discriminator, dataset: Dataset, vocab: Vocabulary,
                    index: ContextIndex, cfg: TrainConfig, train_records: Optional[Sequence[Record]] = None,
                    start_step: int = 0) -> Tuple[PretrainResult, Discriminator]:
    """
    Pretraining with the adversarial term. With lambda_D = 0 this is plain
    pretraining: D is neither consulted nor trained.
    """
    if cfg.lambda_d == 0:
        LOG.info("lambda_D = 0, adversarial term disabled")
        return pretrain(model, dataset, vocab, index, cfg, train_records=train_records, start_step=start_step), disc

    records = list(train_records) if train_records is not None else dataset.split_records("train")
    trainer = AdversarialTrainer(model, disc, vocab, index, cfg, records)
    hooks = {"epoch_hook" if trainer.schedule.granularity == "epoch" else "batch_hook": trainer.on_generator_unit}
    LOG.info(f"Adversarial training: lambda_D={cfg.lambda_d}, X={trainer.schedule.x}, Z={trainer.schedule.z} "
             f"{trainer.schedule.granularity}(s)")
    result = pretrain(model, dataset, vocab, index, cfg, extra_loss=trainer.generator_term,
                      train_records=train_records, start_step=start_step, **hooks)
    LOG.info(f"Discriminator ran {trainer.disc_steps} steps")
    return result, disc


# =========================
# LEAKAGE PROBE
# =========================
def owner_embeddings(model: GeneratorModel, dataset: Dataset, index: ContextIndex) -> Tuple[torch.Tensor, torch.Tensor]:
    """One (r, attribute id) row per user (or item, for item-side attributes)."""
    side = dataset.attribute_space.side
    label: Dict[str, str] = {}
    for r in dataset.records:
        label.setdefault(r.user_id if side == "user" else r.item_id, r.attribute)
    table = model.user_emb.weight if side == "user" else model.item_emb.weight
    rows = index.user_index if side == "user" else index.item_index
    owners = sorted(o for o in label if o in rows)
    with torch.no_grad():
        emb = table[torch.tensor([rows[o] for o in owners], dtype=torch.long)].clone()
    attr = torch.tensor([dataset.attribute_space.index(label[o]) for o in owners], dtype=torch.long)
    return emb, attr


@torch.no_grad()
def classifier_accuracy(disc: Discriminator, emb: torch.Tensor, attr: torch.Tensor) -> float:
    if not len(attr):
        return float("nan")
    return float((disc(emb).argmax(dim=-1) == attr).double().mean())


def probe_accuracy(emb: torch.Tensor, attr: torch.Tensor, n_values: int, seed: int = 0,
                   epochs: int = 200, lr: float = 1e-2, holdout: float = 0.3) -> float:
    """
    Held-out accuracy of a fresh classifier trained on frozen embeddings.
    Independent of the adversary, so it measures what is left to leak.
    """
    n = len(attr)
    if n < 2:
        raise ContractError("probe needs at least 2 embeddings")
    perm = torch.randperm(n, generator=make_generator(seed + 7))
    n_test = max(1, int(round(holdout * n)))
    test, train = perm[:n_test], perm[n_test:]
    probe = build_discriminator(emb.shape[1], n_values, hidden=32, seed=seed)
    opt = make_adam(probe.parameters(), lr)
    x = emb.detach()
    for _ in range(epochs):
        loss = discriminator_loss(probe, x[train], attr[train])
        opt.zero_grad()
        backward(loss)
        adam_step(opt)
    return classifier_accuracy(probe, x[test], attr[test])


def chance_level(attr: torch.Tensor, n_values: int) -> float:
    """Majority-class rate."""
    if not len(attr):
        return 1.0 / n_values
    return float(torch.bincount(attr, minlength=n_values).max()) / len(attr)
