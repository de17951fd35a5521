"""Evaluation: confusion matrices, agreement metrics, and prediction maps.

Metrics come from a ``(K, K)`` confusion matrix with true classes on rows
and predicted classes on columns:

* overall accuracy: diagonal sum over total count;
* average accuracy: mean of per-class recalls, taken over classes that
  actually have test samples (absent classes are reported as NaN and do
  not drag the mean);
* Cohen's kappa: ``(p_o - p_e) / (1 - p_e)`` with the usual marginal
  chance agreement; when ``p_e == 1`` (all mass in one row-column pair)
  kappa degenerates to 1 for perfect agreement, else 0.

Prediction is the argmax over class probabilities, ties resolving to the
lowest class index.  Evaluation is chunked but chunking never changes any
reported number.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ._util import atomic_write_text, canonical_json
from .datacube import DataError, HyperspectralCube, SampleSet, extract_patches
from .network import ModelState, forward

UNLABELED_POLICIES = ("color_all", "mask_unlabeled")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with true classes on rows and predictions on columns."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        k = len(self.class_names)
        if k < 1 or counts.shape != (k, k):
            raise ValueError(f"counts must be ({k}, {k}) to match class names, got {counts.shape}")
        if counts.min(initial=0) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class MetricsReport:
    """Overall accuracy, average accuracy, kappa, and per-class recalls
    (NaN for classes with no true samples)."""

    oa: float
    aa: float
    kappa: float
    per_class: tuple[float, ...]


def metrics_from_confusion(cm: ConfusionMatrix) -> MetricsReport:
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("confusion matrix holds no samples")
    oa = float(np.trace(counts) / total)
    row = counts.sum(axis=1)
    col = counts.sum(axis=0)
    per_class = np.where(row > 0, np.diag(counts) / np.where(row > 0, row, 1.0), np.nan)
    present = row > 0
    aa = float(per_class[present].mean())
    pe = float((row * col).sum() / (total * total))
    if pe >= 1.0:
        kappa = 1.0 if oa == 1.0 else 0.0
    else:
        kappa = (oa - pe) / (1.0 - pe)
    return MetricsReport(oa=oa, aa=aa, kappa=float(kappa), per_class=tuple(per_class.tolist()))


def predict_labels(
    model: ModelState,
    cube: HyperspectralCube,
    pixels: np.ndarray,
    patch_size: int,
    batch_size: int = 256,
) -> np.ndarray:
    """Predicted class (1..K) for each pixel, independent of chunking.

    Chunking only slices the pixel list; each sample's patch, forward
    pass, and argmax are functions of that sample alone.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    out = np.empty(len(pixels), dtype=np.int64)
    for start in range(0, len(pixels), batch_size):
        chunk = pixels[start:start + batch_size]
        patches = extract_patches(cube, chunk, patch_size).astype(np.float64)
        probs = forward(model, patches, mode="eval").class_probs
        out[start:start + len(chunk)] = probs.argmax(axis=1) + 1
    return out


def evaluate(
    model: ModelState,
    cube: HyperspectralCube,
    samples: SampleSet,
    batch_size: int = 256,
) -> tuple[ConfusionMatrix, MetricsReport]:
    """Confusion matrix and metrics for a labeled sample set."""
    if len(samples) == 0:
        raise DataError("cannot evaluate an empty sample set")
    k = cube.num_classes
    if model.spec.num_classes != k:
        raise ValueError(
            f"model predicts {model.spec.num_classes} classes, cube declares {k}"
        )
    if model.spec.bands != cube.bands:
        raise ValueError(f"model expects {model.spec.bands} bands, cube has {cube.bands}")
    if model.spec.patch_size != samples.patch_size:
        raise ValueError(
            f"model patch {model.spec.patch_size} != sample patch {samples.patch_size}"
        )
    if samples.labels.max() > k:
        raise DataError(f"sample label {samples.labels.max()} exceeds {k} classes")
    pred = predict_labels(model, cube, samples.indices, samples.patch_size, batch_size)
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (samples.labels - 1, pred - 1), 1)
    cm = ConfusionMatrix(counts=counts, class_names=cube.class_names)
    return cm, metrics_from_confusion(cm)


def render_map(
    model: ModelState,
    cube: HyperspectralCube,
    palette: np.ndarray | None = None,
    unlabeled_policy: str = "color_all",
    batch_size: int = 1024,
) -> np.ndarray:
    """Classify pixels and paint them with the class palette.

    ``color_all`` classifies every pixel; ``mask_unlabeled`` leaves pixels
    with ground-truth label 0 black and classifies the rest.
    """
    if unlabeled_policy not in UNLABELED_POLICIES:
        raise ValueError(f"unlabeled_policy must be one of {UNLABELED_POLICIES}")
    palette = cube.palette if palette is None else np.asarray(palette, dtype=np.uint8)
    if palette.shape != (cube.num_classes, 3):
        raise ValueError(
            f"palette must be ({cube.num_classes}, 3), got {palette.shape}"
        )
    rgb = np.zeros((cube.rows, cube.cols, 3), dtype=np.uint8)
    if unlabeled_policy == "mask_unlabeled":
        pixels = np.argwhere(cube.labels != 0)
    else:
        rr, cc = np.meshgrid(np.arange(cube.rows), np.arange(cube.cols), indexing="ij")
        pixels = np.stack([rr.ravel(), cc.ravel()], axis=1)
    if len(pixels):
        pred = predict_labels(model, cube, pixels, model.spec.patch_size, batch_size)
        rgb[pixels[:, 0], pixels[:, 1]] = palette[pred - 1]
    return rgb


def save_map_png(rgb: np.ndarray, path: Path | str) -> None:
    """Write the rendered map as lossless PNG."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"map must be (rows, cols, 3) uint8, got {rgb.shape}")
    Image.fromarray(rgb, mode="RGB").save(str(path), format="PNG")


def _json_safe(x: float) -> float | None:
    return None if not np.isfinite(x) else float(x)


def metrics_payload(cm: ConfusionMatrix, report: MetricsReport) -> dict:
    return {
        "oa": report.oa,
        "aa": report.aa,
        "kappa": report.kappa,
        "per_class": [_json_safe(v) for v in report.per_class],
        "confusion": cm.counts.tolist(),
        "class_names": list(cm.class_names),
    }


def write_metrics(
    cm: ConfusionMatrix, report: MetricsReport, json_path: Path | str, text_path: Path | str
) -> None:
    """Write machine-readable metrics plus a human-readable table."""
    atomic_write_text(json_path, canonical_json(metrics_payload(cm, report)))
    atomic_write_text(text_path, format_metrics_table(cm, report))


def format_metrics_table(cm: ConfusionMatrix, report: MetricsReport) -> str:
    width = max([len(n) for n in cm.class_names] + [len("overall accuracy")])
    lines = [f"{'class':<{width}}  {'recall':>8}  {'correct/total':>14}"]
    row_totals = cm.counts.sum(axis=1)
    for i, name in enumerate(cm.class_names):
        recall = report.per_class[i]
        shown = f"{recall:.4f}" if np.isfinite(recall) else "-"
        lines.append(
            f"{name:<{width}}  {shown:>8}  {f'{cm.counts[i, i]}/{row_totals[i]}':>14}"
        )
    lines.append("")
    lines.append(f"{'overall accuracy':<{width}}  {report.oa:8.4f}")
    lines.append(f"{'average accuracy':<{width}}  {report.aa:8.4f}")
    lines.append(f"{'kappa':<{width}}  {report.kappa:8.4f}")
    return "\n".join(lines) + "\n"
