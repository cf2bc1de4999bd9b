# corpus.py
"""
Review corpus: records, attribute spaces, vocabulary, synthesis of
bias-controlled data, explanation extraction, splitting and JSONL storage.
"""
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import hashlib
import numpy as np
import pandas as pd

from errors import ConfigError, ParseError, SpecError, ValidationError
from io_utils import atomic_path

# =========================
# KONSTANTA
# =========================
BOS, EOS, UNK, PAD = "<bos>", "<eos>", "<unk>", "<pad>"
SPECIAL_TOKENS = (BOS, EOS, UNK, PAD)
BOS_ID, EOS_ID, UNK_ID, PAD_ID = 0, 1, 2, 3

DEFAULT_VOCAB_SIZE = 20000
DEFAULT_MAX_LEN = 128
SPLIT_NAMES = ("train", "valid", "test")
RECORD_FIELDS = ("user", "item", "attribute", "rating", "explanation")

PUNCTUATION = ".,!?'\"()"
SENTENCE_END = {".", "!", "?"}
_PUNCT_RE = re.compile(r"([.,!?'\"()])")

LOG = logging.getLogger("fairgen.corpus")


# =========================
# TYPES
# =========================
@dataclass(frozen=True)
class AttributeSpace:
    name: str
    values: Tuple[str, ...]
    side: str = "user"

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if len(self.values) < 2:
            raise ConfigError(f"attribute '{self.name}' needs at least 2 values")
        if len(set(self.values)) != len(self.values):
            raise ConfigError(f"attribute '{self.name}' has duplicate values")
        if self.side not in ("user", "item"):
            raise ConfigError(f"attribute side must be user or item, got '{self.side}'")

    def index(self, value: str) -> int:
        return self.values.index(value)

    def __contains__(self, value) -> bool:
        return value in self.values


@dataclass(frozen=True)
class Record:
    user_id: str
    item_id: str
    attribute: str
    rating: float
    explanation: Tuple[str, ...]


def validate_record(rec: Record, space: AttributeSpace) -> Record:
    if rec.attribute not in space:
        raise ValidationError(f"attribute value '{rec.attribute}' not in {list(space.values)}")
    if not 1.0 <= float(rec.rating) <= 5.0:
        raise ValidationError(f"rating {rec.rating} outside [1, 5]")
    if not rec.explanation:
        raise ValidationError("explanation is empty")
    return rec


class Vocabulary:
    """token <-> id table. Ids 0-3 are always <bos>, <eos>, <unk>, <pad>."""

    def __init__(self, tokens: Sequence[str], feature_lexicon: Iterable[str] = ()):
        self.id_to_token: List[str] = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.token_to_id: Dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValidationError("duplicate tokens in vocabulary")
        self.feature_lexicon: FrozenSet[str] = frozenset(t for t in feature_lexicon if t in self.token_to_id)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token
                and self.feature_lexicon == other.feature_lexicon)

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> List[str]:
        out = []
        for i in ids:
            tok = self.id_to_token[int(i)]
            if strip and tok == EOS:
                break
            if strip and tok in (BOS, PAD):
                continue
            out.append(tok)
        return out

    def to_json(self) -> str:
        return json.dumps({"tokens": self.id_to_token[len(SPECIAL_TOKENS):],
                           "features": sorted(self.feature_lexicon)}, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        obj = json.loads(text)
        return cls(obj["tokens"], obj.get("features", ()))

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Dataset:
    records: Tuple[Record, ...]
    attribute_space: AttributeSpace
    splits: Mapping[str, Tuple[int, ...]] = field(default_factory=dict)

    def split_records(self, name: str) -> List[Record]:
        return [self.records[i] for i in self.splits.get(name, ())]

    def groups(self, indices: Optional[Sequence[int]] = None) -> Dict[str, List[int]]:
        """D_a per attribute value (over `indices`, default all records)."""
        indices = range(len(self.records)) if indices is None else indices
        out = {v: [] for v in self.attribute_space.values}
        for i in indices:
            out[self.records[i].attribute].append(i)
        return out

    def user_ids(self) -> List[str]:
        return sorted({r.user_id for r in self.records})

    def item_ids(self) -> List[str]:
        return sorted({r.item_id for r in self.records})


@dataclass(frozen=True)
class SynthesisSpec:
    n_users: int = 200
    n_items: int = 100
    n_records: int = 4000
    attribute: str = "gender"
    side: str = "user"
    attribute_probs: Mapping[str, float] = field(default_factory=lambda: {"male": 0.5, "female": 0.5})
    mean_length: Mapping[str, float] = field(default_factory=lambda: {"male": 20.0, "female": 8.0})
    mean_features: Mapping[str, float] = field(default_factory=lambda: {"male": 2.0, "female": 1.0})
    rating_probs: Tuple[float, ...] = (0.05, 0.1, 0.2, 0.35, 0.3)
    max_len: int = DEFAULT_MAX_LEN
    features: Tuple[str, ...] = ("graphics", "story", "controller", "price", "sound",
                                 "gameplay", "battery", "screen", "design", "multiplayer")
    features_per_item: int = 3


# =========================
# TOKENISASI
# =========================
def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace, punctuation . , ! ? ' " ( ) as own tokens."""
    if not text:
        return []
    return _PUNCT_RE.sub(r" \1 ", str(text).lower()).split()


def split_sentences(tokens: Sequence[str]) -> List[List[str]]:
    sentences, cur = [], []
    for tok in tokens:
        cur.append(tok)
        if tok in SENTENCE_END:
            sentences.append(cur)
            cur = []
    if cur:
        sentences.append(cur)
    return sentences


def extract_explanation(review: str, feature_lexicon: FrozenSet[str]) -> Optional[List[str]]:
    """Keep the sentences mentioning at least one feature word; None if nothing kept."""
    kept = [s for s in split_sentences(tokenize(review)) if any(t in feature_lexicon for t in s)]
    if not kept:
        return None
    return [t for s in kept for t in s]


def extract_explanations(raw_reviews: Iterable[str], feature_lexicon: Iterable[str]) -> List[Tuple[int, List[str]]]:
    """(review index, explanation tokens) for every review that keeps a sentence."""
    lexicon = frozenset(feature_lexicon)
    if not lexicon:
        raise ValidationError("feature lexicon is empty")
    out = []
    for i, review in enumerate(raw_reviews):
        exp = extract_explanation(review, lexicon)
        if exp is not None:
            out.append((i, exp))
    return out


def load_lexicon(path) -> FrozenSet[str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"feature lexicon not found: {path}")
    words = {line.strip().lower() for line in path.read_text(encoding="utf-8").splitlines()}
    words.discard("")
    if not words:
        raise ValidationError(f"feature lexicon {path} is empty")
    return frozenset(words)


# =========================
# VOCAB
# =========================
def build_vocab(token_streams: Iterable[Iterable[str]], max_size: int = DEFAULT_VOCAB_SIZE,
                feature_lexicon: Iterable[str] = ()) -> Vocabulary:
    """Most frequent tokens first, ties broken lexicographically."""
    if max_size <= len(SPECIAL_TOKENS):
        raise ConfigError(f"max vocabulary size must exceed {len(SPECIAL_TOKENS)}, got {max_size}")
    counts = Counter()
    for stream in token_streams:
        counts.update(t for t in stream if t not in SPECIAL_TOKENS)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    tokens = [t for t, _ in ranked[: max_size - len(SPECIAL_TOKENS)]]
    return Vocabulary(tokens, feature_lexicon)


# =========================
# SINTESIS DATA BIAS
# =========================
_ADJ = {
    "pos": ("great", "excellent", "sharp", "smooth", "fantastic", "solid"),
    "neu": ("okay", "decent", "average", "fine"),
    "neg": ("poor", "weak", "clunky", "disappointing"),
}
_FILLER = (
    ("i", "played", "it", "a", "lot"),
    ("overall", "worth", "it"),
    ("my", "kids", "enjoy", "it"),
    ("arrived", "on", "time"),
    ("would", "buy", "again"),
    ("it", "does", "the", "job"),
    ("took", "a", "while", "to", "learn"),
)


def validate_spec(spec: SynthesisSpec) -> None:
    values = list(spec.attribute_probs)
    if abs(sum(spec.attribute_probs.values()) - 1.0) > 1e-9:
        raise SpecError("attribute probabilities must sum to 1")
    if abs(sum(spec.rating_probs) - 1.0) > 1e-9 or len(spec.rating_probs) != 5:
        raise SpecError("rating distribution needs 5 probabilities summing to 1")
    for v in values:
        if v not in spec.mean_length or v not in spec.mean_features:
            raise SpecError(f"missing mean length/feature count for '{v}'")
        mu = spec.mean_length[v]
        if not 3 <= mu <= spec.max_len:
            raise SpecError(f"mean length {mu} for '{v}' outside [3, {spec.max_len}]")
        if spec.mean_features[v] < 0:
            raise SpecError(f"mean feature count for '{v}' is negative")
    if spec.n_users < 1 or spec.n_items < 1 or spec.n_records < 1:
        raise SpecError("n_users, n_items and n_records must be positive")
    if spec.features_per_item < 1 or spec.features_per_item > len(spec.features):
        raise SpecError("features_per_item must be within the feature list")


def _render_explanation(rng: np.random.Generator, length: int, n_feat: int,
                        item_features: Sequence[str], polarity: str) -> List[str]:
    n_feat = min(n_feat, len(item_features), length // 4)
    chosen = rng.choice(len(item_features), size=n_feat, replace=False) if n_feat else []
    tokens: List[str] = []
    for k in chosen:
        adj = _ADJ[polarity][rng.integers(len(_ADJ[polarity]))]
        tokens += ["the", item_features[k], "is", adj]
    while len(tokens) < length:
        tokens += list(_FILLER[rng.integers(len(_FILLER))])
    return tokens[:length]


def synthesize(spec: SynthesisSpec, seed: int) -> Dataset:
    """
    Template corpus whose per-group explanation length / feature count follow
    the spec. Lengths ~ Poisson(mu_a) clipped to [3, max_len].
    """
    validate_spec(spec)
    rng = np.random.default_rng(seed)
    values = list(spec.attribute_probs)
    probs = np.array([spec.attribute_probs[v] for v in values])
    space = AttributeSpace(spec.attribute, tuple(values), spec.side)

    n_owner = spec.n_users if spec.side == "user" else spec.n_items
    owner_attr = [values[i] for i in rng.choice(len(values), size=n_owner, p=probs)]
    item_feats = [tuple(spec.features[j] for j in rng.choice(len(spec.features), size=spec.features_per_item, replace=False))
                  for _ in range(spec.n_items)]

    records = []
    for _ in range(spec.n_records):
        u = int(rng.integers(spec.n_users))
        i = int(rng.integers(spec.n_items))
        a = owner_attr[u] if spec.side == "user" else owner_attr[i]
        rating = float(rng.choice(5, p=np.asarray(spec.rating_probs)) + 1)
        polarity = "pos" if rating >= 4 else ("neg" if rating <= 2 else "neu")
        length = int(np.clip(rng.poisson(spec.mean_length[a]), 3, spec.max_len))
        n_feat = int(rng.poisson(spec.mean_features[a]))
        exp = _render_explanation(rng, length, n_feat, item_feats[i], polarity)
        records.append(Record(f"u{u}", f"i{i}", a, rating, tuple(exp)))
    LOG.info(f"Synthesized {len(records)} records ({spec.attribute}: {', '.join(values)})")
    return Dataset(tuple(records), space)


def group_summary(dataset: Dataset, feature_lexicon: Iterable[str]) -> pd.DataFrame:
    """Per-group record count, mean explanation length and mean distinct features."""
    from quality import q_feat, q_len

    lexicon = frozenset(feature_lexicon)
    rows = []
    for value, idx in dataset.groups().items():
        recs = [dataset.records[i] for i in idx]
        rows.append({
            "attribute": value,
            "records": len(recs),
            "mean_length": float(np.mean([q_len(r.explanation) for r in recs])) if recs else float("nan"),
            "mean_features": float(np.mean([q_feat(r.explanation, lexicon) for r in recs])) if recs else float("nan"),
        })
    return pd.DataFrame(rows)


def length_histogram(token_lists: Sequence[Sequence[str]], groups: Sequence[str]) -> pd.DataFrame:
    """Token-length counts per group: columns attribute, length, count."""
    from quality import q_len

    if len(token_lists) != len(groups):
        raise ValidationError(f"{len(token_lists)} token lists but {len(groups)} group labels")
    frame = pd.DataFrame({"attribute": list(groups), "length": [int(q_len(t)) for t in token_lists]})
    out = frame.groupby(["attribute", "length"]).size().reset_index(name="count")
    return out.sort_values(["attribute", "length"]).reset_index(drop=True)


# =========================
# SPLIT
# =========================
def split(dataset: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> Dataset:
    """
    Random train/valid/test split, then move valid/test records into train
    until every user and item has at least one train record.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be 3 non-negative values summing to 1, got {list(ratios)}")
    n = len(dataset.records)
    perm = np.random.default_rng(seed).permutation(n).tolist()
    n_train = int(round(ratios[0] * n))
    n_valid = min(int(round(ratios[1] * n)), n - n_train)
    train = perm[:n_train]
    valid = perm[n_train:n_train + n_valid]
    test = perm[n_train + n_valid:]

    users = {dataset.records[i].user_id for i in train}
    items = {dataset.records[i].item_id for i in train}
    moved = set()
    for i in sorted(valid + test):
        rec = dataset.records[i]
        if rec.user_id not in users or rec.item_id not in items:
            moved.add(i)
            users.add(rec.user_id)
            items.add(rec.item_id)
    if moved:
        LOG.info(f"Split repair moved {len(moved)} records into train")
    splits = {
        "train": tuple(sorted(train + sorted(moved))),
        "valid": tuple(sorted(i for i in valid if i not in moved)),
        "test": tuple(sorted(i for i in test if i not in moved)),
    }
    return Dataset(dataset.records, dataset.attribute_space, splits)


# =========================
# LOAD / SAVE (JSONL)
# =========================
def save(dataset: Dataset, path) -> Path:
    split_of = {i: name for name, idx in dataset.splits.items() for i in idx}
    with atomic_path(path) as tmp, open(tmp, "w", encoding="utf-8") as fh:
        for i, r in enumerate(dataset.records):
            row = {"user": r.user_id, "item": r.item_id, "attribute": r.attribute,
                   "rating": r.rating, "explanation": " ".join(r.explanation)}
            if i in split_of:
                row["split"] = split_of[i]
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return Path(path)


def load(path, attribute_space: AttributeSpace, merge_values: Optional[Mapping[str, str]] = None) -> Dataset:
    """
    One JSON object per line. `merge_values` folds sparse attribute values
    into a neighbour (e.g. '$$$$' -> '$$$') before validation.
    """
    path = Path(path)
    merge_values = dict(merge_values or {})
    records, splits = [], {name: [] for name in SPLIT_NAMES}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"malformed JSON ({e.msg})", line_no) from e
            if not isinstance(obj, dict):
                raise ParseError("record is not a JSON object", line_no)
            for key in RECORD_FIELDS:
                if key not in obj:
                    raise ParseError(f"missing field '{key}'", line_no, key)
            try:
                rating = float(obj["rating"])
            except (TypeError, ValueError) as e:
                raise ParseError(f"rating is not a number: {obj['rating']!r}", line_no, "rating") from e
            attr = str(obj["attribute"])
            attr = merge_values.get(attr, attr)
            rec = Record(str(obj["user"]), str(obj["item"]), attr, rating, tuple(tokenize(obj["explanation"])))
            try:
                validate_record(rec, attribute_space)
            except ValidationError as e:
                raise ValidationError(f"{path.name} line {line_no}: {e}") from e
            name = obj.get("split")
            if name is not None:
                if name not in splits:
                    raise ParseError(f"unknown split '{name}'", line_no, "split")
                splits[name].append(len(records))
            records.append(rec)
    has_splits = any(splits.values())
    return Dataset(tuple(records), attribute_space,
                   {k: tuple(v) for k, v in splits.items()} if has_splits else {})
