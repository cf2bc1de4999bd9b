# coffee.py
"""
Counterfactual-fairness fine-tuning.

For every user-item pair the current policy samples N explanations with the
observed attribute token a (factual world) and N with a' (counterfactual
world), paired noise per sample index. Quality gap
    delta = mean Q(factual) - mean Q(counterfactual)
turns into per-sample rewards
    r = -sgn(delta) Q / N  (factual),   r = +sgn(delta) Q / N  (counterfactual)
which are re-weighted towards the lower-quality world (eta), mean-centred per
world, and used as REINFORCE coefficients on sum_t log G(y_t).
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from tqdm import tqdm

from config import TrainConfig
from corpus import AttributeSpace, Dataset, Vocabulary
from errors import ContractError, DomainError, NumericError
from io_utils import write_csv_atomic
from models import (ContextIndex, GeneratorModel, SequenceBatch, compute_losses, counterfactual_batch,
                    iterate_batches, make_batch, sample_batch, sample_noise, sequence_log_probs)
from numerics import adam_step, backward, grad_norm, make_adam, make_generator, seed_everything

__all__ = [
    "TrainConfig", "RewardBatch", "compute_delta", "rewards_unweighted", "quality_weight", "rewards_weighted",
    "rewards_advantage", "make_reward_batch", "choose_counterfactual", "sample_two_worlds",
    "fairness_surrogate", "fairness_gradient_step", "finetune", "FinetuneResult", "STEP_LOG_COLUMNS",
]

LOG = logging.getLogger("fairgen.coffee")

STEP_LOG_COLUMNS = ["step", "pair", "delta", "l_gen", "l_fair", "grad_norm", "lam", "eta"]


# =========================
# REWARD ALGEBRA
# =========================
def compute_delta(q_real: Sequence[float], q_cf: Sequence[float]) -> Tuple[float, int]:
    """(delta, sgn(delta)) with sgn(0) = 0."""
    q_real = np.asarray(q_real, dtype=np.float64)
    q_cf = np.asarray(q_cf, dtype=np.float64)
    if q_real.shape != q_cf.shape or q_real.size == 0:
        raise ContractError(f"worlds need equal non-zero sample counts, got {q_real.size} and {q_cf.size}")
    delta = float(q_real.mean() - q_cf.mean())
    return delta, int(np.sign(delta))


def rewards_unweighted(q_real: Sequence[float], q_cf: Sequence[float], delta: float) -> Tuple[np.ndarray, np.ndarray]:
    q_real = np.asarray(q_real, dtype=np.float64)
    q_cf = np.asarray(q_cf, dtype=np.float64)
    s = float(np.sign(delta))
    n = len(q_real)
    return -s * q_real / n, s * q_cf / n


def quality_weight(delta: float, eta: float) -> float:
    """w(delta): factual-world scale. The lower-quality world always gets eta."""
    if not 0.0 <= eta <= 1.0:
        raise DomainError(f"eta must be in [0, 1], got {eta}")
    h = (np.sign(delta) + 1.0) / 2.0
    return float(h * (1.0 - eta) + (1.0 - h) * eta)


def rewards_weighted(r_real: np.ndarray, r_cf: np.ndarray, delta: float, eta: float) -> Tuple[np.ndarray, np.ndarray]:
    w = quality_weight(delta, eta)
    return np.asarray(r_real) * w, np.asarray(r_cf) * (1.0 - w)


def rewards_advantage(r_w: np.ndarray) -> np.ndarray:
    r_w = np.asarray(r_w, dtype=np.float64)
    if r_w.size == 0:
        raise ContractError("advantage needs at least one sample")
    return r_w - r_w.mean()


@dataclass(frozen=True)
class RewardBatch:
    """Reward bookkeeping for one user-item pair."""
    pair: str
    attr: int
    cf_attr: int
    q_real: np.ndarray
    q_cf: np.ndarray
    delta: float
    sign: int
    w: float
    r_real: np.ndarray
    r_cf: np.ndarray
    rw_real: np.ndarray
    rw_cf: np.ndarray
    adv_real: np.ndarray
    adv_cf: np.ndarray

    @property
    def n(self) -> int:
        return len(self.q_real)

    @property
    def mean_rw_real(self) -> float:
        return float(self.rw_real.mean())

    @property
    def mean_rw_cf(self) -> float:
        return float(self.rw_cf.mean())

    @property
    def l_fair(self) -> float:
        """Sampled |delta|, equal to minus the sum of unweighted rewards."""
        return abs(self.delta)


def make_reward_batch(q_real: Sequence[float], q_cf: Sequence[float], eta: float,
                      pair: str = "", attr: int = 0, cf_attr: int = 1) -> RewardBatch:
    delta, sign = compute_delta(q_real, q_cf)
    r_real, r_cf = rewards_unweighted(q_real, q_cf, delta)
    rw_real, rw_cf = rewards_weighted(r_real, r_cf, delta, eta)
    return RewardBatch(
        pair=pair, attr=attr, cf_attr=cf_attr,
        q_real=np.asarray(q_real, dtype=np.float64), q_cf=np.asarray(q_cf, dtype=np.float64),
        delta=delta, sign=sign, w=quality_weight(delta, eta),
        r_real=r_real, r_cf=r_cf, rw_real=rw_real, rw_cf=rw_cf,
        adv_real=rewards_advantage(rw_real), adv_cf=rewards_advantage(rw_cf),
    )


# =========================
# TWO WORLDS
# =========================
def choose_counterfactual(space: AttributeSpace, attr_ids: Sequence[int], rng: np.random.Generator) -> List[int]:
    """a' uniform over the attribute values other than a, one draw per pair."""
    n = len(space.values)
    if n < 2:
        raise DomainError(f"attribute '{space.name}' has a single value, no counterfactual exists")
    out = []
    for a in attr_ids:
        others = [v for v in range(n) if v != int(a)]
        out.append(others[int(rng.integers(len(others)))])
    return out


def expand_batch(ctx: SequenceBatch, n: int) -> SequenceBatch:
    """Repeat every row n times (pair-major)."""
    return SequenceBatch(*(t.repeat_interleave(n, dim=0) for t in
                           (ctx.attr, ctx.user, ctx.item, ctx.words, ctx.targets, ctx.ratings, ctx.lengths)))


def pair_seeds(seed: int, step: int, n_pairs: int, n: int) -> List[int]:
    base = (int(seed) * 1_000_003 + int(step)) * 65_537
    return [base + p * n + i for p in range(n_pairs) for i in range(n)]


def sample_two_worlds(model: GeneratorModel, ctx: SequenceBatch, cf_attr, n: int, seeds: Sequence[int],
                      k: int = 5, max_len: int = 128) -> Tuple[List[List[int]], List[List[int]]]:
    """
    N samples per pair in each world. Sample i of pair p uses the noise
    stream of seeds[p * N + i] in both worlds.
    """
    if model.attr_emb is None or model.cfg.n_attributes < 2:
        raise DomainError("two-world sampling needs an attribute table with >= 2 values")
    cf = counterfactual_batch(model, ctx, cf_attr)
    if bool((cf.attr == ctx.attr).any()):
        raise DomainError("counterfactual value must differ from the factual one")
    if len(seeds) != len(ctx) * n:
        raise ContractError(f"need {len(ctx) * n} seeds, got {len(seeds)}")
    noise = sample_noise(seeds, max_len)
    real = sample_batch(model, expand_batch(ctx, n), k, max_len, noise=noise)
    counter = sample_batch(model, expand_batch(cf, n), k, max_len, noise=noise)
    return real, counter


def score(oracle: Callable[[Sequence[str]], float], vocab: Vocabulary, samples: Sequence[Sequence[int]]) -> np.ndarray:
    return np.array([oracle(vocab.decode(ids)) for ids in samples], dtype=np.float64)


# =========================
# POLICY GRADIENT
# =========================
def fairness_surrogate(logp_real: torch.Tensor, logp_cf: torch.Tensor,
                       adv_real, adv_cf) -> torch.Tensor:
    """-sum_k [log G(y_k) r_adv,k + log G(y'_k) r'_adv,k]; its gradient is the REINFORCE estimate."""
    adv_real = torch.as_tensor(np.asarray(adv_real), dtype=logp_real.dtype)
    adv_cf = torch.as_tensor(np.asarray(adv_cf), dtype=logp_cf.dtype)
    return -(logp_real * adv_real).sum() - (logp_cf * adv_cf).sum()


def fairness_gradient_step(model: GeneratorModel, optimizer: torch.optim.Optimizer, gen_loss: torch.Tensor,
                           surrogate: Optional[torch.Tensor], lam: float, grad_clip: Optional[float] = None) -> float:
    """One update on L_gen + lambda * L_fair. Returns the pre-clip gradient norm; no clipping by default."""
    if not model.embeddings_frozen():
        raise ContractError("user/item/attribute embeddings must be frozen during fine-tuning")
    loss = gen_loss if (surrogate is None or lam == 0) else gen_loss + lam * surrogate
    if not torch.isfinite(loss):
        raise NumericError("fine-tuning loss is not finite")
    optimizer.zero_grad()
    backward(loss)
    norm = grad_norm(p for p in model.parameters() if p.requires_grad)
    if grad_clip:
        nn.utils.clip_grad_norm_([p for p in model.parameters() if p.requires_grad], grad_clip)
    adam_step(optimizer)
    return norm


# =========================
# FINETUNE
# =========================
@dataclass
class FinetuneResult:
    model: GeneratorModel
    log: pd.DataFrame
    steps: int


def finetune(model: GeneratorModel, dataset: Dataset, vocab: Vocabulary, index: ContextIndex, cfg: TrainConfig,
             oracle: Callable[[Sequence[str]], float], batch_size: Optional[int] = None,
             log_path: Optional[Path] = None, start_step: int = 0) -> FinetuneResult:
    """
    Freeze r_u / r_i / r_a, drop the rating term and run `finetune_epochs`
    epochs of L_gen + lambda * L_fair on the train split. L_gen and the
    fairness term share each batch.
    """
    if model.attr_emb is None:
        raise DomainError("fine-tuning needs a model with an attribute table")
    train = dataset.split_records("train")
    if not train:
        raise ContractError("fine-tuning needs a non-empty train split")
    batch_size = batch_size or cfg.finetune_batch_size or cfg.batch_size
    seed_everything(cfg.seed)
    model.freeze_embeddings()
    opt = make_adam(model.parameters(), cfg.lr_finetune)
    shuffle_gen = make_generator(cfg.seed + 23)
    cf_rng = np.random.default_rng(cfg.seed + 31)
    rows, step = [], start_step
    LOG.info(f"Fine-tuning: lambda={cfg.lam}, eta={cfg.eta}, N={cfg.n_samples}, batch={batch_size}, "
             f"{cfg.finetune_epochs} epoch(s)")

    for epoch in range(1, cfg.finetune_epochs + 1):
        chunks = list(iterate_batches(train, batch_size, shuffle_gen))
        for chunk in tqdm(chunks, desc=f"Finetune {epoch}/{cfg.finetune_epochs}", leave=False,
                          disable=not LOG.isEnabledFor(logging.INFO)):
            model.train()
            batch = make_batch(chunk, vocab, index, model.cfg.max_len)
            gen_loss = compute_losses(model(batch), batch, cfg.loss_weights, include_rating=False).total

            cf_attr = torch.tensor(choose_counterfactual(dataset.attribute_space, batch.attr.tolist(), cf_rng),
                                   dtype=torch.long)
            seeds = pair_seeds(cfg.seed, step, len(chunk), cfg.n_samples)
            real, counter = sample_two_worlds(model, batch, cf_attr, cfg.n_samples, seeds,
                                              cfg.top_k, cfg.max_decode_len)
            q_real, q_cf = score(oracle, vocab, real), score(oracle, vocab, counter)
            n = cfg.n_samples
            rewards = [make_reward_batch(q_real[p * n:(p + 1) * n], q_cf[p * n:(p + 1) * n], cfg.eta,
                                         pair=f"{rec.user_id}|{rec.item_id}", attr=int(batch.attr[p]),
                                         cf_attr=int(cf_attr[p]))
                       for p, rec in enumerate(chunk)]

            surrogate = None
            if cfg.lam > 0:
                ctx = expand_batch(batch, n)
                logp_real = sequence_log_probs(model, ctx, real)
                logp_cf = sequence_log_probs(model, ctx.with_attr(cf_attr.repeat_interleave(n)), counter)
                adv_real = np.concatenate([rb.adv_real for rb in rewards])
                adv_cf = np.concatenate([rb.adv_cf for rb in rewards])
                # mean over the pairs of the batch
                surrogate = fairness_surrogate(logp_real, logp_cf, adv_real, adv_cf) / len(chunk)

            norm = fairness_gradient_step(model, opt, gen_loss, surrogate, cfg.lam, cfg.finetune_grad_clip)
            step += 1
            l_gen = float(gen_loss.detach())
            for rb in rewards:
                rows.append({"step": step, "pair": rb.pair, "delta": rb.delta, "l_gen": l_gen,
                             "l_fair": rb.l_fair, "grad_norm": norm, "lam": cfg.lam, "eta": cfg.eta})
        LOG.info(f"Finetune epoch {epoch}: mean |delta| "
                 f"{np.mean([r['l_fair'] for r in rows]) if rows else float('nan'):.4f} over {step - start_step} steps")

    log = pd.DataFrame(rows, columns=STEP_LOG_COLUMNS)
    if log_path is not None:
        write_csv_atomic(log, log_path)
        LOG.info(f"Step log written: {log_path}")
    return FinetuneResult(model, log, step)
