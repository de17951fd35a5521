"""Hyperspectral data cubes: on-disk bundles, normalization, patch windows,
and labeled train/test sample selection.

A cube is a ``rows x cols x bands`` stack of band images with a per-pixel
ground-truth map.  Label 0 marks unlabeled pixels; classes are numbered
1..K.  The on-disk *bundle* is a directory holding

* ``meta.json``    -- shape, class names, palette, dtype/layout markers
* ``cube.bin``     -- little-endian float32, row-major ``[row][col][band]``
* ``labels.bin``   -- little-endian uint16, row-major ``[row][col]``

Patch extraction mirrors the cube at its borders (symmetric, edge
included), so every pixel, including corners, yields a full patch and
spatial context never silently shrinks at the image boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import json
import math

import numpy as np

from ._util import atomic_write_bytes, atomic_write_text, canonical_json, seeded_rng

CUBE_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u2")

_META_NAME = "meta.json"
_CUBE_NAME = "cube.bin"
_LABELS_NAME = "labels.bin"

# Fixed layout markers written to meta.json; load refuses anything else.
_DTYPE_MARKER = "float32-le"
_LAYOUT_MARKER = "row-major [row][col][band]"

_SPLIT_STREAM = 101
_SUBSAMPLE_STREAM = 102


class DataError(ValueError):
    """A cube, bundle, split spec, or sample set violates its contract."""


@dataclass(frozen=True)
class HyperspectralCube:
    """In-memory cube plus its ground truth.  Treat as immutable.

    Parameters
    ----------
    values : np.ndarray
        ``(rows, cols, bands)`` float32 radiance/reflectance values.
    labels : np.ndarray
        ``(rows, cols)`` uint16 ground truth, 0 = unlabeled.
    class_names : tuple of str
        Names for classes 1..K; ``len(class_names) == K``.
    palette : np.ndarray
        ``(K, 3)`` uint8 RGB colors, one per class.
    """

    values: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    palette: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        palette = np.ascontiguousarray(self.palette, dtype=np.uint8)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "palette", palette)
        if values.ndim != 3 or min(values.shape) < 1:
            raise DataError(f"cube values must be (rows, cols, bands), got {values.shape}")
        if labels.shape != values.shape[:2]:
            raise DataError(
                f"label map shape {labels.shape} does not match cube {values.shape[:2]}"
            )
        k = len(self.class_names)
        if k < 1:
            raise DataError("at least one class name is required")
        if palette.shape != (k, 3):
            raise DataError(f"palette must be ({k}, 3) RGB rows, got {palette.shape}")
        top = int(labels.max(initial=0))
        if top > k:
            raise DataError(f"label {top} exceeds the {k} declared classes")
        if not np.isfinite(values).all():
            raise DataError("cube values must be finite")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def save_bundle(cube: HyperspectralCube, path: Path | str) -> None:
    """Write a cube bundle.  Equal cubes produce byte-identical bundles."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "rows": cube.rows,
        "cols": cube.cols,
        "bands": cube.bands,
        "class_names": list(cube.class_names),
        "palette": cube.palette.tolist(),
        "dtype": _DTYPE_MARKER,
        "layout": _LAYOUT_MARKER,
    }
    atomic_write_text(path / _META_NAME, canonical_json(meta))
    atomic_write_bytes(path / _CUBE_NAME, np.ascontiguousarray(cube.values, CUBE_DTYPE).tobytes())
    atomic_write_bytes(path / _LABELS_NAME, np.ascontiguousarray(cube.labels, LABEL_DTYPE).tobytes())


def load_bundle(path: Path | str) -> HyperspectralCube:
    """Read a cube bundle, validating shape arithmetic and label range."""
    path = Path(path)
    meta_path = path / _META_NAME
    if not meta_path.is_file():
        raise DataError(f"missing {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"unreadable {meta_path}: {exc}") from exc
    for key in ("rows", "cols", "bands", "class_names", "palette", "dtype", "layout"):
        if key not in meta:
            raise DataError(f"{meta_path} lacks required key {key!r}")
    if meta["dtype"] != _DTYPE_MARKER or meta["layout"] != _LAYOUT_MARKER:
        raise DataError(
            f"unsupported encoding {meta['dtype']!r} / {meta['layout']!r} in {meta_path}"
        )
    rows, cols, bands = (int(meta[k]) for k in ("rows", "cols", "bands"))

    def _read(name: str, dtype: np.dtype, count: int) -> np.ndarray:
        fpath = path / name
        if not fpath.is_file():
            raise DataError(f"missing {fpath}")
        raw = np.fromfile(fpath, dtype=dtype)
        if raw.size != count:
            raise DataError(f"{fpath} holds {raw.size} values, expected {count}")
        return raw

    values = _read(_CUBE_NAME, CUBE_DTYPE, rows * cols * bands).reshape(rows, cols, bands)
    labels = _read(_LABELS_NAME, LABEL_DTYPE, rows * cols).reshape(rows, cols)
    return HyperspectralCube(
        values=values,
        labels=labels,
        class_names=tuple(meta["class_names"]),
        palette=np.asarray(meta["palette"], dtype=np.uint8),
    )


def normalize_bands(cube: HyperspectralCube) -> HyperspectralCube:
    """Min-max scale each band over all pixels to [0, 1].

    Constant bands map to all zeros rather than dividing by zero.  The scan
    statistics are taken in float64 and the result is stored back as
    float32; applying the function twice gives the same cube as applying it
    once.
    """
    flat = cube.values.reshape(-1, cube.bands).astype(np.float64)
    lo = flat.min(axis=0)
    span = flat.max(axis=0) - lo
    safe = np.where(span > 0.0, span, 1.0)
    scaled = (flat - lo) / safe
    scaled[:, span == 0.0] = 0.0
    values = scaled.astype(np.float32).reshape(cube.values.shape)
    return replace(cube, values=values)


def _mirror_indices(start: int, length: int, limit: int) -> np.ndarray:
    """Indices ``start .. start+length-1`` folded into ``[0, limit)`` by
    symmetric reflection (the border element repeats on the way back)."""
    idx = np.arange(start, start + length)
    period = 2 * limit
    folded = np.mod(idx, period)
    return np.where(folded < limit, folded, period - 1 - folded)


def extract_patch(
    cube: HyperspectralCube, row: int, col: int, patch_size: int
) -> np.ndarray:
    """Cut the ``patch_size x patch_size x bands`` window centered on a pixel.

    Out-of-range rows/columns are filled by mirroring the cube at its
    border.  ``patch_size`` must be odd so the window has a center.
    """
    if patch_size < 1 or patch_size % 2 == 0:
        raise DataError(f"patch_size must be odd and >= 1, got {patch_size}")
    if not (0 <= row < cube.rows and 0 <= col < cube.cols):
        raise DataError(f"pixel ({row}, {col}) outside {cube.rows}x{cube.cols} cube")
    half = patch_size // 2
    ridx = _mirror_indices(row - half, patch_size, cube.rows)
    cidx = _mirror_indices(col - half, patch_size, cube.cols)
    return cube.values[np.ix_(ridx, cidx)]


def extract_patches(
    cube: HyperspectralCube, pixels: np.ndarray, patch_size: int
) -> np.ndarray:
    """Vectorized :func:`extract_patch` for an ``(N, 2)`` array of pixels.

    Returns ``(N, patch_size, patch_size, bands)`` float32.  Row ``i``
    equals ``extract_patch(cube, *pixels[i], patch_size)`` exactly.
    """
    if patch_size < 1 or patch_size % 2 == 0:
        raise DataError(f"patch_size must be odd and >= 1, got {patch_size}")
    pixels = np.asarray(pixels, dtype=np.int64)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise DataError(f"pixels must be (N, 2), got {pixels.shape}")
    if pixels.size and (
        pixels.min() < 0
        or pixels[:, 0].max() >= cube.rows
        or pixels[:, 1].max() >= cube.cols
    ):
        raise DataError("pixel index outside the cube")
    half = patch_size // 2
    offs = np.arange(-half, half + 1)

    def _fold(base: np.ndarray, limit: int) -> np.ndarray:
        period = 2 * limit
        folded = np.mod(base, period)
        return np.where(folded < limit, folded, period - 1 - folded)

    ridx = _fold(pixels[:, 0:1] + offs[None, :], cube.rows)  # (N, S)
    cidx = _fold(pixels[:, 1:2] + offs[None, :], cube.cols)  # (N, S)
    return cube.values[ridx[:, :, None], cidx[:, None, :]]


@dataclass(frozen=True)
class SampleSet:
    """An ordered selection of labeled pixels from one cube.

    ``indices`` is ``(N, 2)`` of (row, col); ``labels`` is ``(N,)`` with
    values 1..K; ``patch_size`` fixes the window geometry every consumer of
    the set will use.  ``cube_ref`` names the source cube (for bookkeeping
    only; operations take the cube object explicitly).
    """

    cube_ref: str
    indices: np.ndarray
    labels: np.ndarray
    patch_size: int

    def __post_init__(self):
        indices = np.ascontiguousarray(self.indices, dtype=np.int64).reshape(-1, 2)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "labels", labels)
        if len(indices) != len(labels):
            raise DataError(
                f"{len(indices)} pixels but {len(labels)} labels in sample set"
            )
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise DataError(f"patch_size must be odd and >= 1, got {self.patch_size}")
        if labels.size and labels.min() < 1:
            raise DataError("sample labels must be >= 1 (0 means unlabeled)")
        seen = set(map(tuple, indices.tolist()))
        if len(seen) != len(indices):
            raise DataError("duplicate pixels in sample set")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class SplitSpec:
    """Per-class (train, test) pixel counts plus the draw seed."""

    per_class: dict[int, tuple[int, int]]
    seed: int

    def __post_init__(self):
        cleaned: dict[int, tuple[int, int]] = {}
        for cid, pair in self.per_class.items():
            train, test = (int(v) for v in pair)
            cid = int(cid)
            if cid < 1:
                raise DataError(f"class id must be >= 1, got {cid}")
            if train < 0 or test < 0:
                raise DataError(f"negative count for class {cid}")
            cleaned[cid] = (train, test)
        if not cleaned:
            raise DataError("split spec names no classes")
        object.__setattr__(self, "per_class", cleaned)
        object.__setattr__(self, "seed", int(self.seed))


def write_split_spec(spec: SplitSpec, path: Path | str) -> None:
    lines = [f"seed={spec.seed}", "class_id,train,test"]
    for cid in sorted(spec.per_class):
        train, test = spec.per_class[cid]
        lines.append(f"{cid},{train},{test}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_split_spec(path: Path | str) -> SplitSpec:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing split spec {path}")
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if len(lines) < 3 or not lines[0].startswith("seed=") or lines[1] != "class_id,train,test":
        raise DataError(
            f"{path} must start with 'seed=<int>' and 'class_id,train,test' header lines"
        )
    try:
        seed = int(lines[0][len("seed="):])
        per_class: dict[int, tuple[int, int]] = {}
        for ln in lines[2:]:
            cid, train, test = (int(tok) for tok in ln.split(","))
            if cid in per_class:
                raise DataError(f"class {cid} listed twice in {path}")
            per_class[cid] = (train, test)
    except ValueError as exc:
        raise DataError(f"malformed split spec {path}: {exc}") from exc
    return SplitSpec(per_class=per_class, seed=seed)


def split_samples(
    cube: HyperspectralCube,
    spec: SplitSpec,
    *,
    patch_size: int = 5,
    cube_ref: str = "cube",
) -> tuple[SampleSet, SampleSet]:
    """Draw disjoint train/test pixel sets per class.

    Each class is shuffled by its own seed stream keyed on (seed, class id),
    so the draw for one class does not move when other classes are added to
    or dropped from the spec.  Candidate pixels are enumerated in row-major
    order before shuffling; requesting more pixels than a class has is an
    error.
    """
    train_parts: list[tuple[np.ndarray, int]] = []
    test_parts: list[tuple[np.ndarray, int]] = []
    for cid in sorted(spec.per_class):
        want_train, want_test = spec.per_class[cid]
        pool = np.argwhere(cube.labels == cid)
        if len(pool) < want_train + want_test:
            raise DataError(
                f"class {cid} has {len(pool)} labeled pixels, "
                f"need {want_train + want_test}"
            )
        rng = seeded_rng(spec.seed, _SPLIT_STREAM, cid)
        order = rng.permutation(len(pool))
        train_parts.append((pool[order[:want_train]], cid))
        test_parts.append((pool[order[want_train:want_train + want_test]], cid))

    def _assemble(parts: list[tuple[np.ndarray, int]]) -> SampleSet:
        if parts:
            idx = np.concatenate([p for p, _ in parts], axis=0)
            lab = np.concatenate([np.full(len(p), cid) for p, cid in parts])
        else:
            idx = np.empty((0, 2), dtype=np.int64)
            lab = np.empty((0,), dtype=np.int64)
        return SampleSet(cube_ref=cube_ref, indices=idx, labels=lab, patch_size=patch_size)

    return _assemble(train_parts), _assemble(test_parts)


def subsample_training(samples: SampleSet, rate: float, seed: int) -> SampleSet:
    """Keep ``ceil(rate * count)`` pixels of each class, preserving order.

    ``rate`` must lie in (0, 1].  ``rate == 1.0`` returns an equal set.
    Which pixels survive is keyed on (seed, class id).
    """
    if not (0.0 < rate <= 1.0):
        raise DataError(f"sample rate must be in (0, 1], got {rate}")
    keep = np.zeros(len(samples), dtype=bool)
    for cid in np.unique(samples.labels):
        where = np.flatnonzero(samples.labels == cid)
        quota = math.ceil(rate * len(where))
        rng = seeded_rng(seed, _SUBSAMPLE_STREAM, int(cid))
        chosen = rng.permutation(len(where))[:quota]
        keep[where[chosen]] = True
    return SampleSet(
        cube_ref=samples.cube_ref,
        indices=samples.indices[keep],
        labels=samples.labels[keep],
        patch_size=samples.patch_size,
    )


def save_samples(samples: SampleSet, path: Path | str) -> None:
    payload = {
        "cube_ref": samples.cube_ref,
        "patch_size": samples.patch_size,
        "indices": samples.indices.tolist(),
        "labels": samples.labels.tolist(),
    }
    atomic_write_text(path, canonical_json(payload))


def load_samples(path: Path | str) -> SampleSet:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing sample set {path}")
    try:
        payload = json.loads(path.read_text())
        return SampleSet(
            cube_ref=str(payload["cube_ref"]),
            indices=np.asarray(payload["indices"], dtype=np.int64).reshape(-1, 2),
            labels=np.asarray(payload["labels"], dtype=np.int64),
            patch_size=int(payload["patch_size"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"malformed sample set {path}: {exc}") from exc
