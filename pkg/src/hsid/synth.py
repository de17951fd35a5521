"""Synthetic scenes with known reflectance/shading ground truth.

Each pixel's spectrum is built as reflectance times shading: the class
reflectance is a smooth bump curve unique to the material, and the shading
factor is a smooth low-frequency curve shared by every pixel of an
illumination zone.  Optional Gaussian noise is added and clipped at zero.
Because the factorization is known exactly, scenes double as oracles: with
flat reflectance the pixel spectra *are* the shading curves, and with a
single zone the pixel spectra are exact class spectra.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._util import atomic_write_bytes, seeded_rng
from .datacube import LABEL_DTYPE, HyperspectralCube, save_bundle

_NOISE_STREAM = 501
_BLOBS_STREAM = 502

ZONE_LAYOUTS = ("vertical_bands", "blobs")

# Distinct RGB rows for class palettes; cycled when a scene has more classes.
_PALETTE = np.array(
    [
        (230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25),
        (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
        (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
        (170, 110, 40), (128, 0, 0), (128, 128, 0), (0, 0, 128),
    ],
    dtype=np.uint8,
)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Recipe for one scene.

    ``class_spectra`` is ``(K, bands)`` with values in (0, 1], pairwise
    distinct rows; ``shading_profiles`` is ``(Z, bands)`` in (0, 1] with
    distinct per-zone means.  ``zone_layout`` picks how illumination zones
    tile the image; ``noise_sigma`` is the std-dev of additive Gaussian
    noise.  All randomness (noise, blob centers) is keyed on ``seed``.
    """

    rows: int
    cols: int
    bands: int
    class_spectra: np.ndarray
    shading_profiles: np.ndarray
    zone_layout: str = "vertical_bands"
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        spectra = np.ascontiguousarray(self.class_spectra, dtype=np.float64)
        shading = np.ascontiguousarray(self.shading_profiles, dtype=np.float64)
        object.__setattr__(self, "class_spectra", spectra)
        object.__setattr__(self, "shading_profiles", shading)
        if min(self.rows, self.cols, self.bands) < 1:
            raise ValueError("rows, cols, bands must all be >= 1")
        if spectra.ndim != 2 or spectra.shape != (spectra.shape[0], self.bands):
            raise ValueError(f"class_spectra must be (K, {self.bands})")
        if spectra.shape[0] < 2:
            raise ValueError("need at least two classes")
        if shading.ndim != 2 or shading.shape[1] != self.bands or shading.shape[0] < 1:
            raise ValueError(f"shading_profiles must be (Z >= 1, {self.bands})")
        for arr, name in ((spectra, "class_spectra"), (shading, "shading_profiles")):
            if arr.min() <= 0.0 or arr.max() > 1.0:
                raise ValueError(f"{name} values must lie in (0, 1]")
        if len(np.unique(spectra, axis=0)) != len(spectra):
            raise ValueError("class spectra must be pairwise distinct")
        if self.zone_layout not in ZONE_LAYOUTS:
            raise ValueError(f"zone_layout must be one of {ZONE_LAYOUTS}")
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0.0):
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    @property
    def num_classes(self) -> int:
        return self.class_spectra.shape[0]

    @property
    def num_zones(self) -> int:
        return self.shading_profiles.shape[0]


def default_scene_spec(
    rows: int = 48,
    cols: int = 48,
    bands: int = 20,
    num_classes: int = 3,
    num_zones: int = 2,
    zone_layout: str = "vertical_bands",
    noise_sigma: float = 0.01,
    seed: int = 0,
) -> SyntheticSceneSpec:
    """Build a spec with smooth, well-separated spectra and shadings.

    Class k's reflectance is a Gaussian bump on a 0.15 pedestal, centered at
    an evenly spaced band position.  Zone z's shading is a gentle sinusoid
    around a zone-specific mean; the means are spread over [0.45, 0.85] so
    zones differ mostly in brightness, as illumination should.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if num_zones < 1:
        raise ValueError("need at least one zone")
    b = np.arange(bands, dtype=np.float64)
    width = max(1.0, bands / (3.0 * num_classes))
    spectra = np.empty((num_classes, bands))
    for k in range(num_classes):
        center = (k + 0.5) * bands / num_classes
        spectra[k] = 0.15 + 0.8 * np.exp(-0.5 * ((b - center) / width) ** 2)
    shading = np.empty((num_zones, bands))
    for z in range(num_zones):
        mean = 0.65 if num_zones == 1 else 0.45 + 0.4 * z / (num_zones - 1)
        phase = np.pi * z / num_zones
        shading[z] = mean + 0.12 * np.sin(2.0 * np.pi * b / bands + phase)
    return SyntheticSceneSpec(
        rows=rows,
        cols=cols,
        bands=bands,
        class_spectra=spectra,
        shading_profiles=shading,
        zone_layout=zone_layout,
        noise_sigma=noise_sigma,
        seed=seed,
    )


def class_map(spec: SyntheticSceneSpec) -> np.ndarray:
    """Class labels 1..K laid out as horizontal strips of near-equal height."""
    rows = np.arange(spec.rows)
    strip = 1 + rows * spec.num_classes // spec.rows
    return np.repeat(strip[:, None], spec.cols, axis=1).astype(np.uint16)


def zone_map(spec: SyntheticSceneSpec) -> np.ndarray:
    """Zone ids 1..Z, either vertical strips or Voronoi cells of seeded
    centers ("blobs")."""
    if spec.zone_layout == "vertical_bands":
        cols = np.arange(spec.cols)
        strip = 1 + cols * spec.num_zones // spec.cols
        return np.repeat(strip[None, :], spec.rows, axis=0).astype(np.uint16)
    rng = seeded_rng(spec.seed, _BLOBS_STREAM)
    centers = np.stack(
        [rng.uniform(0, spec.rows, spec.num_zones), rng.uniform(0, spec.cols, spec.num_zones)],
        axis=1,
    )
    rr, cc = np.meshgrid(np.arange(spec.rows), np.arange(spec.cols), indexing="ij")
    pts = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return (1 + d2.argmin(axis=1)).reshape(spec.rows, spec.cols).astype(np.uint16)


def _finish(spec: SyntheticSceneSpec, values: np.ndarray) -> HyperspectralCube:
    if spec.noise_sigma > 0.0:
        rng = seeded_rng(spec.seed, _NOISE_STREAM)
        values = values + rng.normal(0.0, spec.noise_sigma, values.shape)
    return HyperspectralCube(
        values=np.maximum(values, 0.0).astype(np.float32),
        labels=class_map(spec),
        class_names=tuple(f"material_{k}" for k in range(1, spec.num_classes + 1)),
        palette=_PALETTE[np.arange(spec.num_classes) % len(_PALETTE)],
    )


def generate(spec: SyntheticSceneSpec) -> tuple[HyperspectralCube, np.ndarray]:
    """Render the scene; returns the cube and the ``(rows, cols)`` zone map.

    Pixel (r, c) gets ``class_spectra[class - 1] * shading[zone - 1]`` plus
    N(0, sigma) noise, clipped at zero, stored as float32.
    """
    labels = class_map(spec)
    zones = zone_map(spec)
    values = spec.class_spectra[labels - 1] * spec.shading_profiles[zones - 1]
    return _finish(spec, values), zones


def shading_only(spec: SyntheticSceneSpec) -> HyperspectralCube:
    """Render with flat all-ones reflectance, so pixel spectra equal the
    zone shading curves (plus noise).  Useful as a clustering oracle."""
    zones = zone_map(spec)
    return _finish(spec, spec.shading_profiles[zones - 1].copy())


def write_scene(cube: HyperspectralCube, zones: np.ndarray, out_dir: Path | str) -> None:
    """Save the bundle plus ``zones.bin`` (little-endian uint16, row-major)."""
    out_dir = Path(out_dir)
    save_bundle(cube, out_dir)
    zones = np.ascontiguousarray(zones, dtype=LABEL_DTYPE)
    if zones.shape != (cube.rows, cube.cols):
        raise ValueError(f"zone map shape {zones.shape} does not match cube")
    atomic_write_bytes(out_dir / "zones.bin", zones.tobytes())
