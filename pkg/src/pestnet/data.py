"""Dataset manifests, preprocessing, stratified folds and synthetic data."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, FormatError, ValidationError
from .imageio import probe, read_image, write_ppm

MEAN = np.array([0.485, 0.456, 0.406])
STD = np.array([0.229, 0.224, 0.225])
IMAGE_SUFFIXES = {".ppm", ".pnm", ".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff"}

# Known per-class sample counts of the two pest datasets.
D1_ROSTER = {
    "Cydia Pomonella": 415, "Gryllotalpa": 508, "Leafhopper": 426, "Locust": 737,
    "Oriental Fruit Fly": 468, "Pieris Rapae Linnaeus": 566, "Snail": 1072,
    "Spodoptera litura": 437, "Stink Bug": 680, "Weevil": 560,
}
D2_ROSTER = {
    "Elia Sibirica": 55, "Cifuna Locuples": 55, "Cletus Punctiger": 55,
    "Cnaphalocrocis Medinalis": 54, "Colaphellus Bowvingi": 51, "Dolerus Tritici": 55,
    "Pentfaleus Major": 55, "Pieris Rapae": 55, "Sympiezomias Velatus": 55,
    "Tettigella Viridis": 55,
}


@dataclass
class DatasetManifest:
    root: Path
    classes: list[str]
    samples: dict[str, list[str]]  # class -> sorted relative paths
    warnings: list[str] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        return {c: len(self.samples[c]) for c in self.classes}

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def paths(self) -> list[str]:
        return [p for c in self.classes for p in self.samples[c]]

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([np.full(len(self.samples[c]), i, dtype=np.int64)
                               for i, c in enumerate(self.classes)]) if self.classes else np.zeros(0, np.int64)


def scan_dataset(root) -> DatasetManifest:
    """Index ``root/<class>/<image>`` with sorted classes and files.

    Unreadable or unsupported files are excluded and reported in
    ``manifest.warnings``.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"dataset root {root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not classes:
        raise ValidationError(f"dataset root {root} contains no class directories")
    samples, warnings, empty = {}, [], []
    for c in classes:
        files = []
        for p in sorted((root / c).iterdir()):
            if p.name.startswith(".") or not p.is_file():
                continue
            rel = f"{c}/{p.name}"
            if p.suffix.lower() not in IMAGE_SUFFIXES or not probe(p):
                warnings.append(f"unreadable or unsupported image: {rel}")
                continue
            files.append(rel)
        if not files:
            empty.append(c)
        samples[c] = files
    if empty:
        raise ValidationError(f"class directories without readable images: {', '.join(empty)}")
    return DatasetManifest(root, classes, samples, warnings)


def _norm(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "", name.lower())


def validate_manifest(manifest: DatasetManifest, roster: Mapping[str, int]) -> list[str]:
    """Differences between a scanned manifest and a known class roster."""
    problems = []
    have = {_norm(c): n for c, n in manifest.counts.items()}
    for name, expected in roster.items():
        got = have.pop(_norm(name), None)
        if got is None:
            problems.append(f"missing class {name!r}")
        elif got != expected:
            problems.append(f"class {name!r}: {got} samples, expected {expected}")
    problems += [f"unexpected class {c!r}" for c in have]
    expected_total = sum(roster.values())
    if manifest.total != expected_total:
        problems.append(f"total {manifest.total} samples, expected {expected_total}")
    return problems


def make_d1_500(manifest: DatasetManifest, seed: int, per_class: int = 50) -> DatasetManifest:
    """Seeded subset with exactly ``per_class`` samples of every class."""
    short = [c for c in manifest.classes if len(manifest.samples[c]) < per_class]
    if short:
        raise ContractError(f"classes with fewer than {per_class} samples: {', '.join(short)}")
    rng = np.random.default_rng(seed)
    picked = {}
    for c in manifest.classes:
        files = manifest.samples[c]
        idx = np.sort(rng.choice(len(files), size=per_class, replace=False))
        picked[c] = [files[i] for i in idx]
    return DatasetManifest(manifest.root, list(manifest.classes), picked, [])


# -- preprocessing -----------------------------------------------------------

def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling of an (h, w, c) image, no antialiasing."""
    h, w = img.shape[:2]
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def preprocess(pixels: np.ndarray, size: int = 224, resize: int | None = None,
               mean=MEAN, std=STD) -> np.ndarray:
    """Resize the shorter side, centre-crop ``size`` and normalize -> (3, size, size).

    ``resize`` defaults to ``round(size * 256 / 224)`` (256 for 224 crops).
    """
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"expected (H, W, 3) pixels, got {img.shape}")
    h, w = img.shape[:2]
    if h < 8 or w < 8:
        raise ValidationError(f"image {h}x{w} is smaller than 8x8")
    resize = round(size * 256 / 224) if resize is None else resize
    if resize < size:
        raise ValidationError(f"resize {resize} is smaller than crop {size}")
    if h <= w:
        nh, nw = resize, int(resize * w / h)
    else:
        nh, nw = int(resize * h / w), resize
    if (nh, nw) != (h, w):
        img = resize_bilinear(img, nh, nw)
    top, left = (nh - size) // 2, (nw - size) // 2
    img = img[top:top + size, left:left + size]
    img = (img - np.asarray(mean)) / np.asarray(std)
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)


def normalize(pixels: np.ndarray) -> np.ndarray:
    """Normalize (..., h, w, 3) pixels without resizing -> (..., 3, h, w) float32."""
    x = (np.asarray(pixels, dtype=np.float64) - MEAN) / STD
    return np.ascontiguousarray(np.moveaxis(x, -1, -3), dtype=np.float32)


# -- folds -------------------------------------------------------------------

@dataclass
class FoldSplit:
    k: int
    assignments: np.ndarray  # fold index per sample, manifest order
    seed: int

    def fold(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == f)


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> FoldSplit:
    """Per-class shuffled round-robin assignment.

    The round robin continues across classes so remainders spread over
    folds; per class, fold sizes differ by at most one.
    """
    if isinstance(labels, DatasetManifest):
        labels = labels.labels
    labels = np.asarray(labels)
    if k < 2:
        raise ValidationError(f"k must be at least 2, got {k}")
    rng = np.random.default_rng(seed)
    folds = np.full(labels.shape[0], -1, dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        folds[members] = (offset + np.arange(members.size)) % k
        offset += members.size
    return FoldSplit(k, folds, seed)


def write_manifest(manifest: DatasetManifest, split: FoldSplit | None, path) -> None:
    """``class<TAB>relative_path<TAB>fold`` per line (fold -1 when unsplit)."""
    folds = split.assignments if split is not None else np.full(manifest.total, -1)
    lines = [f"{manifest.classes[y]}\t{p}\t{f}" for p, y, f in zip(manifest.paths, manifest.labels, folds)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path, root) -> tuple[DatasetManifest, FoldSplit]:
    samples: dict[str, list[str]] = {}
    folds = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
        c, rel, f = parts
        samples.setdefault(c, []).append(rel)
        folds.append(int(f))
    classes = sorted(samples)
    manifest = DatasetManifest(Path(root), classes, {c: samples[c] for c in classes})
    order = {p: i for i, p in enumerate(p for c in classes for p in samples[c])}
    raw = [p for c in samples for p in samples[c]]
    assign = np.empty(len(folds), dtype=np.int64)
    for p, f in zip(raw, folds):
        assign[order[p]] = f
    k = int(assign.max()) + 1 if assign.size else 0
    return manifest, FoldSplit(k, assign, -1)


# -- in-memory and lazy image sets -------------------------------------------

class ImageSet:
    """Labelled images ready for the network: ``inputs(idx)`` -> [b, 3, h, w]."""

    classes: list[str]
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def inputs(self, idx) -> np.ndarray:
        raise NotImplementedError

    def subset(self, idx) -> "ImageSet":
        raise NotImplementedError


class ArrayImageSet(ImageSet):
    def __init__(self, x: np.ndarray, labels, classes: Sequence[str]):
        self.x = np.asarray(x, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.classes = list(classes)
        if self.x.shape[0] != self.labels.shape[0]:
            raise ValidationError("inputs and labels differ in length")

    def inputs(self, idx) -> np.ndarray:
        return self.x[np.asarray(idx)]

    def subset(self, idx) -> "ArrayImageSet":
        idx = np.asarray(idx)
        return ArrayImageSet(self.x[idx], self.labels[idx], self.classes)


class FileImageSet(ImageSet):
    """Decodes and preprocesses images on demand."""

    def __init__(self, manifest: DatasetManifest, size: int = 224, resize: int | None = None,
                 indices: Sequence[int] | None = None):
        self.manifest = manifest
        self.size, self.resize = size, resize
        all_paths = manifest.paths
        all_labels = manifest.labels
        self.indices = np.arange(len(all_paths)) if indices is None else np.asarray(indices)
        self.paths = [all_paths[i] for i in self.indices]
        self.labels = all_labels[self.indices]
        self.classes = list(manifest.classes)

    def load(self, i: int) -> np.ndarray:
        return preprocess(read_image(self.manifest.root / self.paths[i]), self.size, self.resize)

    def inputs(self, idx) -> np.ndarray:
        return np.stack([self.load(int(i)) for i in np.atleast_1d(idx)])

    def subset(self, idx) -> "FileImageSet":
        return FileImageSet(self.manifest, self.size, self.resize, self.indices[np.asarray(idx)])

    def materialize(self) -> ArrayImageSet:
        return ArrayImageSet(self.inputs(np.arange(len(self))), self.labels, self.classes)


# -- synthetic data ----------------------------------------------------------

@dataclass
class SyntheticDataset:
    pixels: np.ndarray   # (n, h, w, 3) in [0, 1]
    labels: np.ndarray
    classes: list[str]

    def __len__(self):
        return int(self.labels.shape[0])

    def to_imageset(self) -> ArrayImageSet:
        return ArrayImageSet(normalize(self.pixels), self.labels, self.classes)

    def write_tree(self, root) -> Path:
        """Write ``root/<class>/<nnnn>.ppm`` so the tree can be scanned like real data."""
        root = Path(root)
        for i, (img, y) in enumerate(zip(self.pixels, self.labels)):
            d = root / self.classes[y]
            d.mkdir(parents=True, exist_ok=True)
            write_ppm(d / f"{i:05d}.ppm", img)
        return root


def synth_dataset(n_classes: int, per_class: int, image_size: int, seed: int = 0,
                  noise: float = 0.08) -> SyntheticDataset:
    """Class-dependent oriented gratings plus seeded noise.

    Class ``c`` gets its own base frequency, orientation and colour; every
    sample draws a random phase, a small frequency jitter and pixel noise.
    """
    if n_classes < 1 or per_class < 1 or image_size < 8:
        raise ValidationError("need n_classes >= 1, per_class >= 1 and image_size >= 8")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")
    u, v = xx / image_size, yy / image_size
    images, labels = [], []
    for c in range(n_classes):
        freq = 2.0 + 3.0 * c
        angle = np.pi * c / n_classes
        hue = 2 * np.pi * c / n_classes
        colour = 0.5 + 0.5 * np.cos(hue + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3]))
        for _ in range(per_class):
            f = freq * (1 + 0.05 * rng.standard_normal())
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * f * (u * np.cos(angle) + v * np.sin(angle)) + phase)
            img = 0.5 + 0.35 * wave[..., None] * colour + noise * rng.standard_normal((image_size, image_size, 3))
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(c)
    classes = [f"class_{c:02d}" for c in range(n_classes)]
    return SyntheticDataset(np.stack(images), np.array(labels, dtype=np.int64), classes)
