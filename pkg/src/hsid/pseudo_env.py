"""Unsupervised environmental pseudo-labels via k-means on pixel spectra.

Illumination conditions are not annotated, so they are approximated by
clustering spectra into a small number of groups and treating the group
index (1-based) as an "environment" label.  The clustering input for a
patch-based sample is its center pixel's spectrum, taken from the
band-normalized cube.

The solver is Lloyd's algorithm with seeded k-means++ starts.  Lloyd
only finds a local optimum per start, so the fit is repeated from
``restarts`` independent initializations and the run with the lowest
final objective wins; all draws come from one seeded generator, so the
result is still a pure function of the inputs.  Empty clusters are
repaired by reseeding on the point currently farthest from its center,
which keeps the recorded objective non-increasing within a run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._util import atomic_write_text, canonical_json, seeded_rng

_INIT_STREAM = 201


@dataclass(frozen=True)
class ClusterConfig:
    """Settings for the pseudo-labeling stage of an experiment."""

    num_centers: int = 2
    max_iter: int = 100
    tol: float = 1e-8
    restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.num_centers < 1:
            raise ValueError(f"num_centers must be >= 1, got {self.num_centers}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if not (np.isfinite(self.tol) and self.tol >= 0.0):
            raise ValueError(f"tol must be finite and >= 0, got {self.tol}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")


@dataclass(frozen=True)
class PseudoModel:
    """Fitted cluster centers plus fit diagnostics.

    ``centers`` is ``(num_centers, bands)`` float64; ``objective`` is the
    final sum of squared distances from each training spectrum to its
    nearest center; ``objective_history`` records that same quantity after
    every Lloyd iteration (non-increasing); ``iterations_run`` counts Lloyd
    iterations actually executed.
    """

    centers: np.ndarray
    objective: float
    iterations_run: int
    objective_history: tuple[float, ...]

    def __post_init__(self):
        centers = np.ascontiguousarray(self.centers, dtype=np.float64)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "objective_history", tuple(float(v) for v in self.objective_history))
        if centers.ndim != 2 or centers.shape[0] < 1:
            raise ValueError(f"centers must be (num_centers >= 1, bands), got {centers.shape}")
        if not np.isfinite(centers).all():
            raise ValueError("cluster centers must be finite")
        if not (np.isfinite(self.objective) and self.objective >= 0.0):
            raise ValueError(f"objective must be finite and >= 0, got {self.objective}")

    @property
    def num_centers(self) -> int:
        return self.centers.shape[0]


def _pairwise_sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, (N, C), clipped at zero against the
    tiny negatives the expansion ||x||^2 - 2 x.c + ||c||^2 can produce."""
    d2 = (
        (x * x).sum(axis=1)[:, None]
        - 2.0 * (x @ centers.T)
        + (centers * centers).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _plus_plus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first center uniform, later centers drawn with
    probability proportional to squared distance from the chosen set."""
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(len(x))]
    d2 = _pairwise_sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            target = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), target, side="right"))
            idx = min(idx, len(x) - 1)
        else:
            # Every point coincides with a chosen center; any pick is exact.
            idx = int(rng.integers(len(x)))
        centers[j] = x[idx]
        d2 = np.minimum(d2, _pairwise_sq_dists(x, centers[j:j + 1])[:, 0])
    return centers


def _lloyd(
    x: np.ndarray, centers: np.ndarray, max_iter: int, tol: float
) -> tuple[np.ndarray, list[float], int]:
    """One Lloyd run from the given start; returns (centers, history, iters)."""
    num_centers = centers.shape[0]
    history: list[float] = []
    previous = np.inf
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        d2 = _pairwise_sq_dists(x, centers)
        assign = d2.argmin(axis=1)
        nearest = d2[np.arange(len(x)), assign]
        # Reseed each empty cluster on the farthest point drawn from a
        # cluster that can spare one; removing a point from a cluster can
        # only shrink that cluster's scatter, so the objective stays
        # monotone.  N >= num_centers guarantees a donor exists.
        counts = np.bincount(assign, minlength=num_centers)
        for j in range(num_centers):
            if counts[j] == 0:
                eligible = counts[assign] > 1
                far = int(np.where(eligible, nearest, -1.0).argmax())
                counts[assign[far]] -= 1
                counts[j] = 1
                assign[far] = j
                nearest[far] = 0.0
        for j in range(num_centers):
            members = assign == j
            if np.any(members):
                centers[j] = x[members].mean(axis=0)
        objective = float(_pairwise_sq_dists(x, centers).min(axis=1).sum())
        history.append(objective)
        if previous - objective < tol:
            break
        previous = objective
    return centers, history, iterations


def fit_centers(
    spectra: np.ndarray,
    num_centers: int,
    *,
    max_iter: int = 100,
    tol: float = 1e-8,
    restarts: int = 10,
    seed: int = 0,
) -> PseudoModel:
    """Cluster spectra into ``num_centers`` groups.

    Runs ``restarts`` Lloyd passes, each from a fresh k-means++ start and
    each iterating until the objective improves by less than ``tol`` or
    ``max_iter`` is reached; the pass with the lowest final objective is
    returned (first wins ties).  For the returned model every spectrum
    sits no closer to any center than to its own, and the per-iteration
    objective history never increases.

    Raises ``ValueError`` for non-finite input, fewer points than centers,
    or out-of-range ``num_centers`` / ``max_iter`` / ``tol`` / ``restarts``.
    """
    x = np.ascontiguousarray(spectra, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"spectra must be (N >= 1, bands), got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("spectra must be finite")
    if num_centers < 1:
        raise ValueError(f"num_centers must be >= 1, got {num_centers}")
    if len(x) < num_centers:
        raise ValueError(f"{len(x)} spectra cannot support {num_centers} centers")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    if not (np.isfinite(tol) and tol >= 0.0):
        raise ValueError(f"tol must be finite and >= 0, got {tol}")
    if restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {restarts}")

    rng = seeded_rng(seed, _INIT_STREAM)
    best: tuple[np.ndarray, list[float], int] | None = None
    for _ in range(restarts):
        start = _plus_plus_init(x, num_centers, rng)
        run = _lloyd(x, start, max_iter, tol)
        if best is None or run[1][-1] < best[1][-1]:
            best = run

    centers, history, iterations = best
    return PseudoModel(
        centers=centers,
        objective=history[-1],
        iterations_run=iterations,
        objective_history=tuple(history),
    )


def assign_pseudo_labels(spectra: np.ndarray, model: PseudoModel) -> np.ndarray:
    """Label each spectrum 1..num_centers by its nearest center.

    Exact distance ties resolve to the lowest center index.  Raises
    ``ValueError`` when the band count does not match the model.
    """
    x = np.ascontiguousarray(spectra, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"spectra must be (N, bands), got {x.shape}")
    if x.shape[1] != model.centers.shape[1]:
        raise ValueError(
            f"spectra have {x.shape[1]} bands but model expects {model.centers.shape[1]}"
        )
    if not np.isfinite(x).all():
        raise ValueError("spectra must be finite")
    return _pairwise_sq_dists(x, model.centers).argmin(axis=1).astype(np.int64) + 1


def clustering_spectrum(patch: np.ndarray) -> np.ndarray:
    """The clustering input for one patch: its center pixel's spectrum."""
    patch = np.asarray(patch)
    if patch.ndim != 3 or patch.shape[0] != patch.shape[1] or patch.shape[0] % 2 == 0:
        raise ValueError(f"patch must be (S, S, bands) with odd S, got {patch.shape}")
    c = patch.shape[0] // 2
    return patch[c, c, :]


def save_pseudo(
    model: PseudoModel, labels: np.ndarray, seed: int, path
) -> None:
    """Write the fitted model plus a label vector as canonical JSON."""
    labels = np.asarray(labels, dtype=np.int64)
    payload = {
        "lambda": model.num_centers,
        "seed": int(seed),
        "centers": model.centers.tolist(),
        "objective": model.objective,
        "labels": labels.tolist(),
    }
    atomic_write_text(path, canonical_json(payload))


def load_pseudo(path) -> tuple[PseudoModel, np.ndarray, int]:
    """Read back :func:`save_pseudo` output: (model, labels, seed).

    The stored model has no iteration history (only the final objective).
    """
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"missing pseudo-label file {path}")
    payload = json.loads(path.read_text())
    try:
        centers = np.asarray(payload["centers"], dtype=np.float64)
        objective = float(payload["objective"])
        labels = np.asarray(payload["labels"], dtype=np.int64)
        seed = int(payload["seed"])
        stated = int(payload["lambda"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed pseudo-label file {path}: {exc}") from exc
    if centers.ndim != 2 or len(centers) != stated:
        raise ValueError(f"{path}: centers do not match the stated count")
    model = PseudoModel(
        centers=centers,
        objective=objective,
        iterations_run=0,
        objective_history=(objective,),
    )
    return model, labels, seed
