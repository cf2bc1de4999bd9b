# baselines.py
"""
Reference methods.

- NORM  : trim the training data until group-mean quality gaps shrink below
          a fraction of the original gap.
- NATTR : inference-time view that hides the attribute token.
- RAW / ATTR / ADV : pure configurations, see resolve_baseline.
"""
import copy
import dataclasses
import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import pandas as pd
import torch

from config import RunConfig
from corpus import AttributeSpace, Record
from errors import ConfigError, ContractError, DomainError, ValidationError
from models import GeneratorModel, TransformerGenerator
from numerics import make_generator

LOG = logging.getLogger("fairgen.baselines")


# =========================
# NORM
# =========================
@dataclass(frozen=True)
class NormSpec:
    oracle: Callable[[Sequence[str]], float]
    threshold: float = 0.10

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"NORM threshold must be in (0, 1), got {self.threshold}")


@dataclass
class NormResult:
    records: List[Record]
    removed: List[int]          # positions in the input list, in removal order
    original_gap: float
    final_gap: float

    def manifest(self, records: Sequence[Record]) -> pd.DataFrame:
        return pd.DataFrame([{"index": i, "user": records[i].user_id, "item": records[i].item_id,
                              "attribute": records[i].attribute} for i in self.removed],
                            columns=["index", "user", "item", "attribute"])


def _max_gap(means: Dict[str, float]) -> Tuple[float, Tuple[str, str]]:
    best, pair = -1.0, ("", "")
    for a, b in itertools.combinations(means, 2):
        gap = abs(means[a] - means[b])
        if gap > best:
            best, pair = gap, (a, b)
    return best, pair


def norm_preprocess(records: Sequence[Record], space: AttributeSpace, spec: NormSpec) -> NormResult:
    """
    Remove one record at a time from the larger group of the current max-gap
    pair (its best record if that group is ahead, else its worst) until every
    pairwise gap is within threshold x original max gap.
    """
    q = [float(spec.oracle(r.explanation)) for r in records]
    groups: Dict[str, List[int]] = {v: [] for v in space.values}
    for i, r in enumerate(records):
        if r.attribute not in groups:
            raise ValidationError(f"record {i} has attribute '{r.attribute}' outside {list(space.values)}")
        groups[r.attribute].append(i)
    groups = {v: idx for v, idx in groups.items() if idx}
    if len(groups) < 2:
        raise DomainError("NORM needs at least 2 non-empty groups")

    sums = {v: sum(q[i] for i in idx) for v, idx in groups.items()}

    def means() -> Dict[str, float]:
        return {v: sums[v] / len(groups[v]) for v in groups}

    original, _ = _max_gap(means())
    start_size = {v: len(idx) for v, idx in groups.items()}
    target = spec.threshold * original
    removed: List[int] = []
    gap, (a, b) = _max_gap(means())
    while gap > target:
        m = means()
        # larger group now; ties -> originally larger, then the one behind
        big = max((a, b), key=lambda v: (len(groups[v]), start_size[v], -m[v]))
        other = b if big == a else a
        if len(groups[big]) <= 1:
            raise ContractError(f"NORM would empty group '{big}' before reaching the target gap "
                                f"({gap:.4f} > {target:.4f})")
        # ties -> earliest record
        if m[big] > m[other]:
            victim = max(groups[big], key=lambda i: (q[i], -i))
        else:
            victim = min(groups[big], key=lambda i: (q[i], i))
        groups[big].remove(victim)
        sums[big] -= q[victim]
        removed.append(victim)
        gap, (a, b) = _max_gap(means())

    keep = sorted(i for idx in groups.values() for i in idx)
    LOG.info(f"NORM removed {len(removed)} of {len(records)} records, max gap {original:.4f} -> {gap:.4f}")
    return NormResult([records[i] for i in keep], removed, original, max(gap, 0.0))


# =========================
# NATTR
# =========================
def nattr_transform(model: GeneratorModel, seed: int = 0) -> GeneratorModel:
    """
    Inference-only copy. Transformer: nothing may attend to the attribute
    position. Recurrent: attribute rows redrawn from U[-1, 1].
    """
    if model.attr_emb is None:
        raise DomainError("NATTR needs a model with an attribute table")
    view = copy.deepcopy(model)
    if isinstance(view, TransformerGenerator):
        view.attend_to_attribute = False
    else:
        with torch.no_grad():
            view.attr_emb.weight.uniform_(-1.0, 1.0, generator=make_generator(seed + 97))
    view.eval()
    return view


# =========================
# CONFIG IDENTITIES
# =========================
@dataclass(frozen=True)
class BaselinePlan:
    name: str
    use_attribute: bool
    lam: float
    lambda_d: float
    norm_data: bool
    nattr_inference: bool
    finetune: bool


def resolve_baseline(cfg: RunConfig) -> Tuple[RunConfig, BaselinePlan]:
    """Map the baseline selector onto model / training switches."""
    name = cfg.baseline
    if name == "raw":
        changes = dict(use_attribute=False, lam=0.0, lambda_d=0.0, norm_data=False, nattr_inference=False)
    elif name == "attr":
        changes = dict(use_attribute=True, lam=0.0, lambda_d=0.0, norm_data=False, nattr_inference=False)
    elif name == "adv":
        if cfg.lambda_d <= 0:
            raise ConfigError("ADV baseline needs lambda_d > 0")
        changes = dict(use_attribute=False, lam=0.0, norm_data=False, nattr_inference=False)
    elif name == "norm":
        changes = dict(use_attribute=False, lam=0.0, lambda_d=0.0, norm_data=True, nattr_inference=False)
    elif name == "nattr":
        changes = dict(use_attribute=True, lam=0.0, lambda_d=0.0, norm_data=False, nattr_inference=True)
    elif name == "coffee":
        changes = dict(use_attribute=True, norm_data=False, nattr_inference=False)
    else:
        raise ConfigError(f"unknown baseline '{name}'")
    resolved = dataclasses.replace(cfg, **changes)
    plan = BaselinePlan(name, resolved.use_attribute, resolved.lam, resolved.lambda_d,
                        resolved.norm_data, resolved.nattr_inference,
                        finetune=name in ("attr", "coffee"))
    LOG.debug(f"Baseline {name}: {plan}")
    return resolved, plan
