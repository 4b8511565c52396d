"""Post-hoc OOD scores computed from logits or penultimate features.

Every score follows one orientation: larger means more in-distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .errors import ConfigError, ContractError, DataError, DimensionError, NumericError

KL_FLOOR = 1e-12


def _logits(z) -> np.ndarray:
    z = np.asarray(getattr(z, "data", z), dtype=np.float64)
    if z.ndim != 2:
        raise DimensionError(f"expected [N x C] logits, got shape {z.shape}")
    return z


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = _logits(z)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def score_msp(logits) -> np.ndarray:
    z = _logits(logits)
    if z.shape[1] < 2:
        raise DimensionError("MSP needs at least two classes")
    return softmax_np(z).max(axis=1)


def score_max_logit(logits) -> np.ndarray:
    return _logits(logits).max(axis=1)


def score_energy(logits, temperature: float = 1.0) -> np.ndarray:
    """Negative free energy ``T * logsumexp(z / T)``."""
    if not temperature > 0:
        raise ConfigError(f"energy temperature must be positive, got {temperature}")
    z = _logits(logits)
    return temperature * logsumexp(z / temperature, axis=1)


def score_entropy(logits) -> np.ndarray:
    """Negative Shannon entropy of the softmax, using log-softmax so 0 ln 0 contributes 0."""
    z = _logits(logits)
    logp = z - logsumexp(z, axis=1, keepdims=True)
    return (np.exp(logp) * logp).sum(axis=1)


# ---------------------------------------------------------------------------
# KL matching


@dataclass(frozen=True)
class KlTemplates:
    templates: np.ndarray  # [C x C], row c = mean softmax of samples predicted as c


def fit_kl_matching(probs) -> KlTemplates:
    p = _logits(probs)
    c = p.shape[1]
    pred = p.argmax(axis=1)
    rows = []
    for k in range(c):
        members = p[pred == k]
        if len(members) == 0:
            raise DataError(f"KL-matching fit: no fitting sample is predicted as class {k}")
        rows.append(members.mean(axis=0))
    return KlTemplates(np.stack(rows))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) with q floored at 1e-12 and 0 ln 0 taken as 0."""
    q = np.maximum(q, KL_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def score_kl(templates: KlTemplates, probs) -> np.ndarray:
    p = _logits(probs)
    d = templates.templates
    if d.shape[1] != p.shape[1]:
        raise DimensionError(f"templates cover {d.shape[1]} classes, probabilities {p.shape[1]}")
    kl = kl_divergence(p[:, None, :], d[None, :, :])  # [N x C]
    return -kl.min(axis=1)


# ---------------------------------------------------------------------------
# Mahalanobis


@dataclass(frozen=True)
class MahalanobisStats:
    class_means: np.ndarray  # [C x D]
    shared_precision: np.ndarray  # [D x D]
    epsilon: float
    chol: np.ndarray = field(repr=False)  # lower Cholesky factor of the regularised covariance


def fit_mahalanobis(features, labels, num_classes: Optional[int] = None) -> MahalanobisStats:
    """Class means and a tied, ridge-regularised covariance of penultimate features."""
    f = _logits(features)
    y = np.asarray(labels)
    if y.shape != (f.shape[0],):
        raise DimensionError(f"{y.shape} labels for {f.shape[0]} feature rows")
    n, d = f.shape
    c = num_classes if num_classes is not None else int(y.max()) + 1
    means = np.zeros((c, d))
    for k in range(c):
        members = f[y == k]
        if len(members) < 2:
            raise DataError(f"Mahalanobis fit: class {k} has {len(members)} samples, needs at least 2")
        means[k] = members.mean(axis=0)
    centred = f - means[y]
    cov = centred.T @ centred / n
    eps = 1e-6 * np.trace(cov) / d
    cov = cov + eps * np.eye(d)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"tied covariance is not positive definite after regularisation: {exc}") from exc
    if not np.all(np.diag(chol) > 0):
        raise NumericError("tied covariance is singular after regularisation")
    precision = linalg.cho_solve((chol, True), np.eye(d))
    precision = 0.5 * (precision + precision.T)
    return MahalanobisStats(means, precision, float(eps), chol)


def mahalanobis_distances(stats: MahalanobisStats, features) -> np.ndarray:
    """Squared distances [N x C] to every class mean under the tied covariance."""
    f = _logits(features)
    if f.shape[1] != stats.class_means.shape[1]:
        raise DimensionError(f"features have {f.shape[1]} dims, stats {stats.class_means.shape[1]}")
    diff = f[:, None, :] - stats.class_means[None, :, :]  # [N, C, D]
    n, c, d = diff.shape
    # whitened residual L^-1 (f - mu); its squared norm is the quadratic form
    white = linalg.solve_triangular(stats.chol, diff.reshape(-1, d).T, lower=True)
    return (white**2).sum(axis=0).reshape(n, c)


def score_mahalanobis(stats: MahalanobisStats, features) -> np.ndarray:
    return -mahalanobis_distances(stats, features).min(axis=1)


# ---------------------------------------------------------------------------


DETECTOR_KINDS = ("msp", "max_logit", "energy", "entropy", "kl_matching", "mahalanobis")


@dataclass
class Detector:
    """A named detector; ``kl_matching`` and ``mahalanobis`` must be fitted before scoring."""

    kind: str
    temperature: float = 1.0
    state: object = None

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise ConfigError(f"unknown detector {self.kind!r}; choose from {DETECTOR_KINDS}")
        if self.kind == "energy" and not self.temperature > 0:
            raise ConfigError(f"energy temperature must be positive, got {self.temperature}")

    @property
    def needs_fit(self) -> bool:
        return self.kind in ("kl_matching", "mahalanobis")

    @property
    def fitted(self) -> bool:
        return not self.needs_fit or self.state is not None

    @property
    def name(self) -> str:
        if self.kind == "energy" and self.temperature != 1.0:
            return f"energy(T={self.temperature:g})"
        return self.kind

    def fit(self, logits, features, labels) -> "Detector":
        if self.kind == "kl_matching":
            self.state = fit_kl_matching(softmax_np(logits))
        elif self.kind == "mahalanobis":
            self.state = fit_mahalanobis(features, labels, num_classes=_logits(logits).shape[1])
        return self

    def score(self, logits, features=None) -> np.ndarray:
        if not self.fitted:
            raise ContractError(f"detector {self.kind} must be fitted before scoring")
        if self.kind == "msp":
            return score_msp(logits)
        if self.kind == "max_logit":
            return score_max_logit(logits)
        if self.kind == "energy":
            return score_energy(logits, self.temperature)
        if self.kind == "entropy":
            return score_entropy(logits)
        if self.kind == "kl_matching":
            return score_kl(self.state, softmax_np(logits))
        if features is None:
            raise ContractError("mahalanobis scoring needs penultimate features")
        return score_mahalanobis(self.state, features)
