"""Per-layer activation maps (channel mean, min-max normalized)."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ValidationError
from .imageio import write_pgm
from .model import Model
from .tensor import Tensor

DEFAULT_LAYERS = (10, 11, 13, 14, 19)


def normalize_map(fmap: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    fmap = np.asarray(fmap, dtype=np.float64)
    lo, hi = fmap.min(), fmap.max()
    if hi == lo:
        return np.zeros_like(fmap)
    return (fmap - lo) / (hi - lo)


def _check_layers(model: Model, layers: Iterable[int]) -> list[int]:
    spatial = {r.index for r in model.config.rows if r.kind not in ("avgpool", "classifier")}
    layers = list(layers)
    bad = [i for i in layers if i not in spatial]
    if bad:
        raise ValidationError(f"layers without a spatial feature map: {bad}; choose from {sorted(spatial)}")
    return layers


def activation_maps(model: Model, image: np.ndarray, layers: Iterable[int] = DEFAULT_LAYERS) -> dict[int, np.ndarray]:
    layers = _check_layers(model, layers)
    x = np.asarray(image, dtype=model.dtype)
    if x.ndim == 3:
        x = x[None]
    capture: dict[int, Tensor] = {}
    was = model.training
    model.eval()
    try:
        model.forward(Tensor(x), capture=capture)
    finally:
        model.set_training(was)
    return {i: normalize_map(capture[i].data[0].mean(axis=0)) for i in layers}


def write_map_csv(path, values: np.ndarray) -> None:
    rows = [",".join(f"{v:.6f}" for v in row) for row in values]
    Path(path).write_text("\n".join(rows) + "\n")


def read_map_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def export_activations(model: Model, image: np.ndarray, layers: Iterable[int] = DEFAULT_LAYERS,
                       out_dir=".", prefix: str = "layer") -> dict[int, dict[str, Path]]:
    """Write ``<prefix>NN.pgm`` and ``<prefix>NN.csv`` for every requested layer."""
    maps = activation_maps(model, image, layers)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for i, m in maps.items():
        pgm, csv = out / f"{prefix}{i:02d}.pgm", out / f"{prefix}{i:02d}.csv"
        write_pgm(pgm, m)
        write_map_csv(csv, m)
        written[i] = {"pgm": pgm, "csv": csv, "map": m}
    return written
