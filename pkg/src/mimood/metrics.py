"""AUROC / AUPR for ID-vs-OOD score sets, classification accuracy and brute-force oracles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, ContractError

BRUTE_FORCE_LIMIT = 1_000_000


@dataclass(frozen=True)
class ScoredSplit:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.id_scores, dtype=np.float64).reshape(-1)
        ood = np.asarray(self.ood_scores, dtype=np.float64).reshape(-1)
        if ids.size == 0 or ood.size == 0:
            raise ContractError(f"both score sets must be non-empty (got {ids.size} ID, {ood.size} OOD)")
        if not (np.all(np.isfinite(ids)) and np.all(np.isfinite(ood))):
            raise ContractError("scores must be finite")
        object.__setattr__(self, "id_scores", ids)
        object.__setattr__(self, "ood_scores", ood)

    def oriented(self, positive: str = "id") -> "ScoredSplit":
        """Return the split with the chosen positive class in the ``id_scores`` slot."""
        if positive == "id":
            return self
        if positive == "ood":
            return ScoredSplit(-self.ood_scores, -self.id_scores)
        raise ConfigError(f"positive class must be 'id' or 'ood', got {positive!r}")


def auroc(s: ScoredSplit) -> float:
    """P(id > ood) + 0.5 P(id == ood), via midranks (Mann-Whitney U)."""
    n, m = s.id_scores.size, s.ood_scores.size
    ranks = rankdata(np.concatenate([s.id_scores, s.ood_scores]), method="average")
    u = ranks[:n].sum() - n * (n + 1) / 2.0
    return float(u / (n * m))


def aupr(s: ScoredSplit) -> float:
    """Step-wise area under precision-recall with ID positive; tied scores form one threshold."""
    n = s.id_scores.size
    scores = np.concatenate([s.id_scores, s.ood_scores])
    is_pos = np.concatenate([np.ones(n), np.zeros(s.ood_scores.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_pos = scores[order], is_pos[order]
    # last position of every tie group in descending order
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    tp = np.cumsum(is_pos)[ends]
    seen = ends + 1.0
    precision = tp / seen
    recall = tp / n
    delta = np.diff(np.r_[0.0, recall])
    return float(np.sum(delta * precision))


def accuracy(logits, labels) -> float:
    z = np.asarray(getattr(logits, "data", logits))
    y = np.asarray(labels)
    if len(y) == 0:
        return float("nan")
    return float(np.mean(np.argmax(z, axis=1) == y))


# ---------------------------------------------------------------------------
# oracles for tests


def _guard(s: ScoredSplit) -> None:
    if s.id_scores.size * s.ood_scores.size > BRUTE_FORCE_LIMIT:
        raise ContractError(f"brute force limited to n*m <= {BRUTE_FORCE_LIMIT}")


def brute_force_auroc(s: ScoredSplit) -> float:
    _guard(s)
    total = 0.0
    for a in s.id_scores:
        total += np.count_nonzero(a > s.ood_scores) + 0.5 * np.count_nonzero(a == s.ood_scores)
    return total / (s.id_scores.size * s.ood_scores.size)


def brute_force_aupr(s: ScoredSplit) -> float:
    _guard(s)
    n = s.id_scores.size
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(s.id_scores.tolist()) | set(s.ood_scores.tolist()), reverse=True):
        tp = np.count_nonzero(s.id_scores >= t)
        fp = np.count_nonzero(s.ood_scores >= t)
        recall = tp / n
        area += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return area
