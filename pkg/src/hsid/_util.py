"""Shared low-level helpers: seeded RNG streams, canonical JSON, atomic writes."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

_MASK64 = (1 << 64) - 1


def seeded_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a generator keyed by a user seed plus a fixed stream tag.

    Distinct ``stream`` tags give statistically independent streams for the
    same user seed, so e.g. per-class split draws and per-epoch batch
    shuffles never alias even when the user reuses one seed value.
    Negative seeds are folded into the unsigned 64-bit range.
    """
    return np.random.default_rng([int(seed) & _MASK64, *stream])


def canonical_json(obj) -> str:
    """Serialize with sorted keys and a fixed layout so equal values give
    equal bytes (reruns of a pipeline must reproduce files exactly)."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def atomic_write_bytes(path: Path | str, payload: bytes) -> None:
    """Write via a temp file and rename so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def atomic_write_text(path: Path | str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
