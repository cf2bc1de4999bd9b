# quality.py
"""Black-box quality oracles Q(y). Higher is better; input is only the token list."""
from dataclasses import dataclass, field
from typing import Callable, FrozenSet, Iterable, Sequence, Tuple

from corpus import SPECIAL_TOKENS
from errors import ConfigError

QUALITY_KINDS = ("L", "F", "LF")
_MARKERS = frozenset(SPECIAL_TOKENS) - {"<unk>"}


def q_len(y: Sequence[str]) -> float:
    """Token count without <bos>/<eos>/<pad>."""
    return float(sum(1 for t in y if t not in _MARKERS))


def q_feat(y: Sequence[str], lexicon: FrozenSet[str]) -> float:
    """Number of distinct lexicon tokens mentioned."""
    if not lexicon:
        raise ConfigError("feature lexicon is empty")
    return float(len(set(y) & set(lexicon)))


def q_composite(y: Sequence[str], lexicon: FrozenSet[str], weights: Tuple[float, float] = (1.0, 1.0)) -> float:
    w_len, w_feat = weights
    return w_len * q_len(y) + w_feat * q_feat(y, lexicon)


@dataclass(frozen=True)
class QualityOracle:
    kind: str
    feature_lexicon: FrozenSet[str] = field(default_factory=frozenset)
    weights: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.kind not in QUALITY_KINDS:
            raise ConfigError(f"quality measure must be one of {QUALITY_KINDS}, got '{self.kind}'")
        if self.kind in ("F", "LF") and not self.feature_lexicon:
            raise ConfigError(f"quality measure {self.kind} needs a feature lexicon")
        if any(w < 0 for w in self.weights):
            raise ConfigError("composite weights must be non-negative")

    def __call__(self, y: Sequence[str]) -> float:
        if self.kind == "L":
            return q_len(y)
        if self.kind == "F":
            return q_feat(y, self.feature_lexicon)
        return q_composite(y, self.feature_lexicon, self.weights)


def make_oracle(kind: str, lexicon: Iterable[str] = (), weights: Tuple[float, float] = (1.0, 1.0)) -> Callable[[Sequence[str]], float]:
    return QualityOracle(kind, frozenset(lexicon), tuple(weights))
