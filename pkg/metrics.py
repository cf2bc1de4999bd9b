# metrics.py
"""
Fairness metrics over sampled explanations (Ind-CF, Grp-CF, DDP) and text /
rating metrics (BLEU-1/4, ROUGE-1/2/L, RMSE), plus the evaluation pass that
produces a FairnessReport.

Scores are kept as an array q[pair, world, sample]: world v is generation
with attribute token v, so the factual world of pair p is q[p, attr[p]].
"""
import itertools
import json
import logging
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from config import RunConfig
from corpus import Dataset, Record, Vocabulary, length_histogram
from errors import ContractError, DomainError
from io_utils import write_csv_atomic, write_text_atomic
from models import ContextIndex, GeneratorModel, make_batch, sample_batch, sample_noise
from quality import make_oracle

LOG = logging.getLogger("fairgen.metrics")

THREADS_ENV = "FAIRGEN_THREADS"
PAIRS_PER_TASK = 32
NOT_COMPUTED = "not computed"
# rendering of metrics that do not apply to a model (no counterfactual world)
NOT_APPLICABLE = "-"
REPORT_COLUMNS = ["model", "dataset", "measure", "ind_cf", "grp_cf", "ddp", "bleu1", "bleu4",
                  "rouge1", "rouge2", "rougeL", "bertscore", "rmse", "n_samples", "seed"]


# =========================
# FAIRNESS (dari skor)
# =========================
def _world_means(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 3:
        raise ContractError(f"scores must be (pairs, worlds, samples), got shape {q.shape}")
    return q.mean(axis=2)


def ind_cf_from_scores(q: np.ndarray, attr: Sequence[int]) -> float:
    """Mean over pairs (and over a' != a) of |E[Q | a] - E[Q | a']|."""
    means = _world_means(q)
    if not len(means):
        return float("nan")
    per_pair = []
    for p, a in enumerate(attr):
        gaps = [abs(means[p, a] - means[p, b]) for b in range(means.shape[1]) if b != a]
        per_pair.append(np.mean(gaps))
    return float(np.mean(per_pair))


def grp_cf_from_scores(q: np.ndarray, attr: Sequence[int]) -> float:
    """
    1/(|A|(|A|-1)) sum_a sum_{a' != a} |sum_{D_a} E[Q|a] - sum_{D_a} E[Q|a']| / |D_a|.
    Empty groups are skipped and the normaliser shrinks with them.
    """
    means = _world_means(q)
    n_values = means.shape[1]
    attr = np.asarray(attr)
    total, terms = 0.0, 0
    for a in range(n_values):
        rows = np.flatnonzero(attr == a)
        if not len(rows):
            LOG.warning(f"Grp-CF: attribute value #{a} has no test pairs, skipped")
            continue
        for b in range(n_values):
            if b == a:
                continue
            total += abs(means[rows, a].sum() - means[rows, b].sum()) / len(rows)
            terms += 1
    return total / terms if terms else float("nan")


def ddp_from_means(group_means: Dict[str, float]) -> float:
    """Mean |gap| over unordered pairs of non-empty groups."""
    vals = [v for v in group_means.values() if v is not None and not math.isnan(v)]
    if len(vals) < 2:
        raise DomainError("DDP needs at least 2 non-empty groups")
    return float(np.mean([abs(x - y) for x, y in itertools.combinations(vals, 2)]))


def factual_group_means(q: np.ndarray, attr: Sequence[int], values: Sequence[str]) -> Dict[str, float]:
    means = _world_means(q)
    out = {}
    for a, name in enumerate(values):
        rows = [p for p, x in enumerate(attr) if x == a]
        out[name] = float(np.mean([means[p, a] for p in rows])) if rows else float("nan")
    return out


def counterfactual_group_means(q: np.ndarray, attr: Sequence[int], values: Sequence[str]) -> Dict[str, float]:
    """Group D_a's mean quality when its pairs are generated under every a' != a."""
    means = _world_means(q)
    out = {}
    for a, name in enumerate(values):
        cells = [means[p, b] for p, x in enumerate(attr) if x == a for b in range(len(values)) if b != a]
        out[name] = float(np.mean(cells)) if cells else float("nan")
    return out


def ddp_from_scores(q: np.ndarray, attr: Sequence[int], values: Sequence[str]) -> float:
    return ddp_from_means(factual_group_means(q, attr, values))


def _report_ddp(group_means: Dict[str, float]) -> float:
    try:
        return ddp_from_means(group_means)
    except DomainError:
        LOG.warning("DDP: fewer than 2 groups in the test split, reported as NaN")
        return float("nan")


# =========================
# TEXT METRICS
# =========================
def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]], n: int = 4) -> float:
    """Corpus BLEU-n: clipped precisions, geometric mean over 1..n, brevity penalty. No smoothing."""
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates vs {len(references)} references")
    if not 1 <= n <= 4:
        raise DomainError(f"BLEU order must be in 1..4, got {n}")
    matched = np.zeros(n)
    possible = np.zeros(n)
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for k in range(1, n + 1):
            c_ng, r_ng = _ngrams(cand, k), _ngrams(ref, k)
            matched[k - 1] += sum(min(cnt, r_ng[g]) for g, cnt in c_ng.items())
            possible[k - 1] += max(len(cand) - k + 1, 0)
    if c_len == 0 or np.any(matched == 0):
        return 0.0
    log_p = np.mean(np.log(matched / possible))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return float(bp * math.exp(log_p))


def _f1(overlap: float, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 2 * p * r / (p + r)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge(candidate: Sequence[str], reference: Sequence[str], variant: str = "L") -> float:
    """ROUGE F1; variant '1', '2' (n-gram overlap) or 'L' (LCS)."""
    variant = str(variant).upper()
    if variant == "L":
        return _f1(lcs_length(candidate, reference), len(candidate), len(reference))
    if variant not in ("1", "2"):
        raise DomainError(f"ROUGE variant must be 1, 2 or L, got '{variant}'")
    n = int(variant)
    c_ng, r_ng = _ngrams(candidate, n), _ngrams(reference, n)
    overlap = sum((c_ng & r_ng).values())
    return _f1(overlap, sum(c_ng.values()), sum(r_ng.values()))


def rouge_corpus(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]], variant: str) -> float:
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        return 0.0
    return float(np.mean([rouge(c, r, variant) for c, r in zip(candidates, references)]))


def rmse(predicted: Sequence[float], truth: Sequence[float]) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape:
        raise ContractError(f"rating vectors differ in length: {predicted.shape} vs {truth.shape}")
    if predicted.size == 0:
        raise ContractError("RMSE of an empty vector")
    return float(np.sqrt(np.mean((predicted - truth) ** 2)))


# =========================
# GENERATION
# =========================
@dataclass
class WorldSamples:
    """tokens[p][v][i]: sample i of pair p generated with attribute token v."""
    attr: List[int]
    tokens: List[List[List[List[str]]]]

    @property
    def n_worlds(self) -> int:
        return len(self.tokens[0]) if self.tokens else 0

    def world_of(self, p: int) -> int:
        """Index of pair p's factual world (0 when the model has no attribute token)."""
        return self.attr[p] if self.n_worlds > 1 else 0

    def factual(self, i: int = 0) -> List[List[str]]:
        return [self.tokens[p][self.world_of(p)][i] for p in range(len(self.attr))]

    def scores(self, oracle: Callable[[Sequence[str]], float]) -> np.ndarray:
        return np.array([[[oracle(y) for y in world] for world in pair] for pair in self.tokens], dtype=np.float64)


def eval_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw)) if raw else min(4, os.cpu_count() or 1)
    except ValueError:
        LOG.warning(f"{THREADS_ENV}={raw!r} is not an integer, using 1 thread")
        return 1


def generate_worlds(model: GeneratorModel, records: Sequence[Record], vocab: Vocabulary, index: ContextIndex,
                    n: int = 3, seed: int = 0, k: int = 5, max_len: int = 128,
                    threads: Optional[int] = None) -> WorldSamples:
    """
    N samples per pair under every attribute value. Sample i of pair p uses
    the same noise stream in every world. Chunks run on a thread pool against
    the frozen model; results land by chunk index.
    """
    if n < 1:
        raise DomainError(f"N must be >= 1, got {n}")
    n_values = model.cfg.n_attributes if model.attr_emb is not None else 1
    model.eval()
    chunks = [list(range(s, min(s + PAIRS_PER_TASK, len(records)))) for s in range(0, len(records), PAIRS_PER_TASK)]

    def run_chunk(rows: List[int]) -> List[List[List[List[str]]]]:
        ctx = make_batch([records[p] for p in rows], vocab, index, model.cfg.max_len)
        ctx = type(ctx)(*(t.repeat_interleave(n, dim=0) for t in
                          (ctx.attr, ctx.user, ctx.item, ctx.words, ctx.targets, ctx.ratings, ctx.lengths)))
        noise = sample_noise([seed * 1_000_003 + p * n + i for p in rows for i in range(n)], max_len)
        per_world = []
        for v in range(n_values):
            batch = ctx.with_attr(torch.full_like(ctx.attr, v)) if model.attr_emb is not None else ctx
            ids = sample_batch(model, batch, k, max_len, noise=noise)
            per_world.append([vocab.decode(y) for y in ids])
        return [[per_world[v][j * n:(j + 1) * n] for v in range(n_values)] for j in range(len(rows))]

    results: List[Optional[list]] = [None] * len(chunks)
    with ThreadPoolExecutor(max_workers=threads or eval_threads()) as executor:
        futures = {executor.submit(run_chunk, rows): c for c, rows in enumerate(chunks)}
        for future, c in futures.items():
            results[c] = future.result()
    tokens = [pair for chunk in results for pair in chunk]
    attr = [index.attribute_id(r.attribute) for r in records]
    return WorldSamples(attr, tokens)


# =========================
# MODEL-LEVEL METRICS
# =========================
def ind_cf(model: GeneratorModel, records: Sequence[Record], vocab: Vocabulary, index: ContextIndex,
           oracle: Callable[[Sequence[str]], float], n: int = 3, seed: int = 0, k: int = 5, max_len: int = 128) -> float:
    worlds = generate_worlds(model, records, vocab, index, n, seed, k, max_len)
    return ind_cf_from_scores(worlds.scores(oracle), worlds.attr)


def grp_cf(model: GeneratorModel, records: Sequence[Record], vocab: Vocabulary, index: ContextIndex,
           oracle: Callable[[Sequence[str]], float], n: int = 3, seed: int = 0, k: int = 5, max_len: int = 128) -> float:
    worlds = generate_worlds(model, records, vocab, index, n, seed, k, max_len)
    return grp_cf_from_scores(worlds.scores(oracle), worlds.attr)


def ddp(model: GeneratorModel, records: Sequence[Record], vocab: Vocabulary, index: ContextIndex,
        oracle: Callable[[Sequence[str]], float], n: int = 3, seed: int = 0, k: int = 5, max_len: int = 128) -> float:
    worlds = generate_worlds(model, records, vocab, index, n, seed, k, max_len)
    return ddp_from_scores(worlds.scores(oracle), worlds.attr, index.attribute_space.values)


@torch.no_grad()
def predict_ratings(model: GeneratorModel, records: Sequence[Record], vocab: Vocabulary, index: ContextIndex,
                    batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for s in range(0, len(records), batch_size):
        batch = make_batch(records[s:s + batch_size], vocab, index, model.cfg.max_len)
        out.append(model.predict_ratings(batch).numpy())
    return np.concatenate(out) if out else np.zeros(0)


def _nan_to_none(obj):
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


# =========================
# REPORT
# =========================
@dataclass
class FairnessReport:
    model: str
    dataset: str
    n_samples: int
    seed: int
    fairness: Dict[str, Dict[str, float]]        # measure -> {ind_cf, grp_cf, ddp}
    bleu1: float
    bleu4: float
    rouge1: float
    rouge2: float
    rougeL: float
    rmse: float
    bertscore: str = NOT_COMPUTED
    group_means: Dict[str, Dict[str, Dict[str, float]]] = field(default_factory=dict)

    def rows(self) -> pd.DataFrame:
        out = []
        for measure, vals in self.fairness.items():
            out.append({"model": self.model, "dataset": self.dataset, "measure": measure, **vals,
                        "bleu1": self.bleu1, "bleu4": self.bleu4, "rouge1": self.rouge1, "rouge2": self.rouge2,
                        "rougeL": self.rougeL, "bertscore": self.bertscore, "rmse": self.rmse,
                        "n_samples": self.n_samples, "seed": self.seed})
        return pd.DataFrame(out, columns=REPORT_COLUMNS)

    def to_json(self) -> str:
        return json.dumps(_nan_to_none(asdict(self)), indent=2, sort_keys=True)


def evaluate(model: GeneratorModel, dataset: Dataset, vocab: Vocabulary, index: ContextIndex, cfg: RunConfig,
             lexicon: Sequence[str] = (), tag: str = "", dataset_name: str = "",
             threads: Optional[int] = None) -> Tuple[FairnessReport, pd.DataFrame]:
    """
    One sampling pass over the test split; every configured quality measure
    is scored on the same explanations. Returns the report and the
    factual/counterfactual length histogram.
    """
    test = dataset.split_records("test")
    if not test:
        raise ContractError("evaluation needs a non-empty test split")
    values = dataset.attribute_space.values
    LOG.info(f"Evaluating {len(test)} test pairs, N={cfg.n_samples}, measures {list(cfg.eval_measures)}")
    worlds = generate_worlds(model, test, vocab, index, cfg.n_samples, cfg.seed, cfg.top_k, cfg.max_decode_len, threads)
    attr = [values.index(r.attribute) for r in test]

    fairness, group_means = {}, {}
    for measure in cfg.eval_measures:
        q = worlds.scores(make_oracle(measure, lexicon, tuple(cfg.quality_weights)))
        if model.attr_emb is None:
            # no attribute token: there is no counterfactual world to compare against
            fact = {name: float(np.mean([q[p, 0].mean() for p, a in enumerate(attr) if a == v]))
                    if any(a == v for a in attr) else float("nan") for v, name in enumerate(values)}
            fairness[measure] = {"ind_cf": float("nan"), "grp_cf": float("nan"), "ddp": _report_ddp(fact)}
            group_means[measure] = {"factual": fact, "counterfactual": fact}
            continue
        fact = factual_group_means(q, attr, values)
        fairness[measure] = {"ind_cf": ind_cf_from_scores(q, attr), "grp_cf": grp_cf_from_scores(q, attr),
                             "ddp": _report_ddp(fact)}
        group_means[measure] = {"factual": fact, "counterfactual": counterfactual_group_means(q, attr, values)}
        LOG.info(f"[{measure}] Ind-CF {fairness[measure]['ind_cf']:.4f} | Grp-CF {fairness[measure]['grp_cf']:.4f} "
                 f"| DDP {fairness[measure]['ddp']:.4f}")

    cands = worlds.factual(0)
    refs = [list(r.explanation) for r in test]
    report = FairnessReport(
        model=tag, dataset=dataset_name, n_samples=cfg.n_samples, seed=cfg.seed, fairness=fairness,
        bleu1=100 * bleu(cands, refs, 1), bleu4=100 * bleu(cands, refs, 4),
        rouge1=100 * rouge_corpus(cands, refs, "1"), rouge2=100 * rouge_corpus(cands, refs, "2"),
        rougeL=100 * rouge_corpus(cands, refs, "L"),
        rmse=rmse(predict_ratings(model, test, vocab, index), [r.rating for r in test]),
        group_means=group_means,
    )
    return report, world_histogram(worlds, values)


def world_histogram(worlds: WorldSamples, values: Sequence[str]) -> pd.DataFrame:
    """Length counts per group, factual samples vs samples under every a' != a."""
    frames = []
    for world in ("factual", "counterfactual"):
        toks, groups = [], []
        for p, a in enumerate(worlds.attr):
            for v in range(worlds.n_worlds):
                if (v == worlds.world_of(p)) == (world == "factual"):
                    toks += worlds.tokens[p][v]
                    groups += [values[a]] * len(worlds.tokens[p][v])
        if toks:
            frames.append(length_histogram(toks, groups).assign(world=world))
    if not frames:
        return pd.DataFrame(columns=["world", "attribute", "length", "count"])
    return pd.concat(frames, ignore_index=True)[["world", "attribute", "length", "count"]]


def write_report(report: FairnessReport, histogram: pd.DataFrame, out_dir) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {"csv": out_dir / "report.csv", "json": out_dir / "report.json", "lengths": out_dir / "lengths.csv"}
    write_csv_atomic(report.rows(), paths["csv"], na_rep=NOT_APPLICABLE)
    write_text_atomic(paths["json"], report.to_json() + "\n")
    write_csv_atomic(histogram, paths["lengths"])
    LOG.info(f"Report written to {out_dir}")
    return paths
