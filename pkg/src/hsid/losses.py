"""Training objectives: classification, two cosine-embedding sums, and a
branch-discrimination term.

All four terms are *sums* over the batch (not means), so values scale with
batch size and, for the embedding terms, with the square of batch size.

* classification: negative log of the softmax probability at the true
  class, summed over samples.
* embedding (environmental / categorical): for every ordered pair of
  samples, ``1 - cos`` if the pair shares a label, else
  ``max(0, cos - margin)``.  Self-pairs contribute exactly zero.  The same
  form is applied twice: once on the environmental projections with
  cluster-derived pseudo-labels, once on the categorical projections with
  ground-truth class labels.
* discrimination: each environmental feature should be recognized as
  environmental (slot 0) and each categorical feature as categorical
  (slot 1) by the shared discriminator; the loss is the summed negative
  log of the correct slot's probability.

Probabilities are clamped to [1e-12, 1] before any log, so every component
is finite and non-negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_EPS = 1e-12
_PROB_TOL = 1e-6

LOG_HEADER = "epoch,step,L0,Le,Lc,Ld,total"


@dataclass(frozen=True)
class LossConfig:
    """Margin for unlike pairs plus the three component weights."""

    margin: float = 0.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.margin) and -1.0 <= self.margin <= 1.0):
            raise ValueError(f"margin must lie in [-1, 1], got {self.margin}")
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    """One step's component values and their weighted total.

    ``total = classification + alpha * environmental + beta * categorical
    + gamma * discrimination`` exactly as floating-point computed; every
    component is non-negative.
    """

    classification: float
    environmental: float
    categorical: float
    discrimination: float
    total: float

    def __post_init__(self):
        for name in ("classification", "environmental", "categorical", "discrimination"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} loss must be finite and >= 0, got {v}")
        if not np.isfinite(self.total):
            raise ValueError(f"total loss must be finite, got {self.total}")


def _check_prob_rows(probs: np.ndarray, what: str) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"{what} must be 2-D, got shape {probs.shape}")
    if not np.isfinite(probs).all():
        raise ValueError(f"{what} must be finite")
    sums = probs.sum(axis=1)
    if np.abs(sums - 1.0).max(initial=0.0) > _PROB_TOL:
        raise ValueError(f"{what} rows must sum to 1 within {_PROB_TOL}")
    return probs


def cosine_pair_loss(u: np.ndarray, v: np.ndarray, same: bool, margin: float = 0.0) -> float:
    """Loss for one pair: ``1 - cos(u, v)`` when alike, else
    ``max(0, cos(u, v) - margin)``.  Zero-norm vectors are an error."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ValueError(f"vector shapes differ: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine is undefined for a zero-norm vector")
    cos = float(np.clip(u @ v / (nu * nv), -1.0, 1.0))
    if same:
        return 1.0 - cos
    return max(0.0, cos - margin)


def _cosine_matrix(vectors: np.ndarray, what: str) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ValueError(f"{what} must be (m, dim), got shape {vectors.shape}")
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        raise ValueError(f"{what} contain a zero-norm row")
    unit = vectors / norms[:, None]
    return np.clip(unit @ unit.T, -1.0, 1.0)


def embedding_loss(vectors: np.ndarray, labels: np.ndarray, margin: float = 0.0) -> float:
    """Cosine pair loss summed over all ordered pairs of batch rows.

    Self-pairs are counted as zero (a vector is perfectly aligned with
    itself), so a single-row batch gives exactly 0.0.
    """
    labels = np.asarray(labels).reshape(-1)
    cos = _cosine_matrix(vectors, "embedding vectors")
    if len(labels) != len(cos):
        raise ValueError(f"{len(cos)} vectors but {len(labels)} labels")
    same = labels[:, None] == labels[None, :]
    pair = np.where(same, 1.0 - cos, np.maximum(0.0, cos - margin))
    np.fill_diagonal(pair, 0.0)
    return float(pair.sum())


def classification_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Summed negative log-probability of each sample's true class.

    ``labels`` are 1-based; out-of-range labels are an error.
    """
    probs = _check_prob_rows(probs, "class probabilities")
    labels = np.asarray(labels).reshape(-1)
    if len(labels) != len(probs):
        raise ValueError(f"{len(probs)} rows but {len(labels)} labels")
    k = probs.shape[1]
    if len(labels) and (labels.min() < 1 or labels.max() > k):
        raise ValueError(f"labels must lie in 1..{k}")
    picked = probs[np.arange(len(probs)), labels - 1]
    return float(-np.log(np.clip(picked, LOG_EPS, 1.0)).sum())


def discrimination_loss(env_probs: np.ndarray, cat_probs: np.ndarray) -> float:
    """Summed negative log of slot 0 for environmental rows and slot 1 for
    categorical rows, both produced by the shared discriminator."""
    env = _check_prob_rows(env_probs, "environmental discriminator rows")
    cat = _check_prob_rows(cat_probs, "categorical discriminator rows")
    if env.shape[1] != 2 or cat.shape[1] != 2:
        raise ValueError("discriminator rows must have exactly two slots")
    if len(env) != len(cat):
        raise ValueError(f"row counts differ: {len(env)} vs {len(cat)}")
    env_term = -np.log(np.clip(env[:, 0], LOG_EPS, 1.0)).sum()
    cat_term = -np.log(np.clip(cat[:, 1], LOG_EPS, 1.0)).sum()
    return float(env_term + cat_term)


def total_loss(outputs, pseudo_labels: np.ndarray, labels: np.ndarray, cfg: LossConfig) -> LossBreakdown:
    """Combine the four components for one batch of network outputs.

    ``outputs`` is any object exposing ``env_proj``, ``cat_proj``,
    ``class_probs``, ``disc_probs_env``, ``disc_probs_cat`` (the network's
    forward result).  ``pseudo_labels`` drive the environmental term,
    ``labels`` the categorical and classification terms.
    """
    classification = classification_loss(outputs.class_probs, labels)
    environmental = embedding_loss(outputs.env_proj, pseudo_labels, cfg.margin)
    categorical = embedding_loss(outputs.cat_proj, labels, cfg.margin)
    discrimination = discrimination_loss(outputs.disc_probs_env, outputs.disc_probs_cat)
    total = (
        classification
        + cfg.alpha * environmental
        + cfg.beta * categorical
        + cfg.gamma * discrimination
    )
    return LossBreakdown(
        classification=classification,
        environmental=environmental,
        categorical=categorical,
        discrimination=discrimination,
        total=total,
    )


def format_log_line(epoch: int, step: int, bd: LossBreakdown) -> str:
    """One training-log row: ``epoch,step,L0,Le,Lc,Ld,total`` with floats
    in shortest round-trip form (see :data:`LOG_HEADER`)."""
    return (
        f"{epoch},{step},{bd.classification!r},{bd.environmental!r},"
        f"{bd.categorical!r},{bd.discrimination!r},{bd.total!r}"
    )


def parse_log_line(line: str) -> tuple[int, int, LossBreakdown]:
    """Inverse of :func:`format_log_line`."""
    parts = line.strip().split(",")
    if len(parts) != 7:
        raise ValueError(f"log line must have 7 fields, got {len(parts)}: {line!r}")
    epoch, step = int(parts[0]), int(parts[1])
    l0, le, lc, ld, tot = (float(p) for p in parts[2:])
    return epoch, step, LossBreakdown(
        classification=l0, environmental=le, categorical=lc, discrimination=ld, total=tot
    )
