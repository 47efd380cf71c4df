"""Layer organization as data: config rows, text format, validation and
shape inference.

Config text format::

    name = pestnet
    num_classes = 10
    ratio = 6
    width = 1.0

    [rows]
    # index   kind                  channels  stride
    1         conv3x3               32        2
    6-7       inverted_residual     32        1
    ...

A ``6-7`` index expands to one row per layer. Channels of ``k`` (or ``-``)
on the classifier row take ``num_classes``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError

KINDS = (
    "conv3x3", "channel_reduction", "downsample", "inverted_residual",
    "double_attention_ir", "channel_expansion", "conv1x1", "avgpool", "classifier",
)
BLOCK_KINDS = {"channel_reduction", "downsample", "inverted_residual",
               "double_attention_ir", "channel_expansion"}
SPATIAL_KINDS = {"conv3x3", "conv1x1"} | BLOCK_KINDS


@dataclass(frozen=True)
class LayerRow:
    index: int
    kind: str
    channels: int  # output channels; ignored for avgpool, num_classes for classifier
    stride: int = 1

    @property
    def expansion(self) -> int:
        return 1 if self.kind == "channel_reduction" else 6


@dataclass(frozen=True)
class ShapeRow:
    index: int
    kind: str
    in_shape: tuple[int, int, int]   # (h, w, c)
    out_shape: tuple[int, int, int]
    stride: int | None


@dataclass(frozen=True)
class ArchitectureConfig:
    rows: tuple[LayerRow, ...]
    ratio: int = 6
    num_classes: int = 10
    width: float = 1.0
    name: str = "pestnet"
    input_channels: int = 3
    metadata: dict = field(default_factory=dict, compare=False)

    @property
    def attention_locations(self) -> tuple[int, ...]:
        return tuple(r.index for r in self.rows if r.kind == "double_attention_ir")

    def row(self, index: int) -> LayerRow:
        for r in self.rows:
            if r.index == index:
                return r
        raise KeyError(index)

    def channels(self, row: LayerRow) -> int:
        """Effective output channels after width scaling."""
        if row.kind == "classifier":
            return self.num_classes
        if row.kind == "avgpool":
            raise ValueError("avgpool rows keep their input channels")
        return max(1, int(round(row.channels * self.width)))

    def with_attention(self, locations: Iterable[int], ratio: int | None = None) -> "ArchitectureConfig":
        locs = set(locations)
        rows = []
        for r in self.rows:
            if r.index in locs:
                rows.append(dataclasses.replace(r, kind="double_attention_ir"))
            elif r.kind == "double_attention_ir":
                rows.append(dataclasses.replace(r, kind="inverted_residual"))
            else:
                rows.append(r)
        unknown = locs - {r.index for r in self.rows}
        if unknown:
            raise ConfigError(f"attention locations {sorted(unknown)} are not layer indices")
        cfg = dataclasses.replace(self, rows=tuple(rows), ratio=self.ratio if ratio is None else ratio)
        cfg.validate()
        return cfg

    def without_attention(self) -> "ArchitectureConfig":
        return self.with_attention(())

    def with_classes(self, k: int) -> "ArchitectureConfig":
        if k < 1:
            raise ConfigError(f"num_classes must be positive, got {k}")
        return dataclasses.replace(self, num_classes=k)

    def with_width(self, width: float) -> "ArchitectureConfig":
        cfg = dataclasses.replace(self, width=width)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        problems = []
        if not self.rows:
            raise ConfigError("configuration has no rows")
        if [r.index for r in self.rows] != list(range(1, len(self.rows) + 1)):
            problems.append("row indices must run 1..N without gaps")
        if self.rows[0].kind not in ("conv3x3", "conv1x1"):
            problems.append(f"row {self.rows[0].index}: first row must be a convolution")
        if self.rows[-1].kind != "classifier":
            problems.append(f"row {self.rows[-1].index}: last row must be the classifier")
        if self.ratio < 1:
            problems.append(f"ratio must be positive, got {self.ratio}")
        if self.width <= 0:
            problems.append(f"width must be positive, got {self.width}")
        if self.num_classes < 1:
            problems.append(f"num_classes must be positive, got {self.num_classes}")
        seen_pool = False
        in_c = self.input_channels
        bad_attention = []
        for r in self.rows:
            if r.kind not in KINDS:
                problems.append(f"row {r.index}: unknown kind {r.kind!r}")
                continue
            if r.stride not in (1, 2):
                problems.append(f"row {r.index}: stride must be 1 or 2")
            if r.kind in SPATIAL_KINDS and seen_pool:
                problems.append(f"row {r.index}: {r.kind} after avgpool")
            if r.kind == "avgpool":
                seen_pool = True
                continue
            if r.kind == "classifier":
                if not seen_pool:
                    problems.append(f"row {r.index}: classifier must follow avgpool")
                continue
            out_c = self.channels(r)
            if r.kind == "double_attention_ir":
                if r.stride != 1 or out_c != in_c:
                    bad_attention.append(r.index)
                elif (6 * in_c) % self.ratio:
                    problems.append(
                        f"row {r.index}: expanded width {6 * in_c} not divisible by ratio {self.ratio}")
            in_c = out_c
        if bad_attention:
            problems.append(
                "attention rows must be stride-1, channel-preserving inverted residuals; offending rows: "
                + ", ".join(str(i) for i in bad_attention))
        if problems:
            raise ConfigError("; ".join(problems))


def _out_size(size: int, stride: int, kernel: int = 3) -> int:
    pad = kernel // 2
    return (size + 2 * pad - kernel) // stride + 1


def infer_shapes(config: ArchitectureConfig, input_shape: Sequence[int] = (224, 224, 3)) -> list[ShapeRow]:
    """Propagate an (h, w, c) input through every row."""
    h, w, c = input_shape
    if c != config.input_channels:
        raise ConfigError(f"input has {c} channels, config expects {config.input_channels}")
    shapes = []
    for r in config.rows:
        src = (h, w, c)
        if r.kind == "avgpool":
            h = w = 1
            stride = None
        elif r.kind == "classifier":
            c = config.num_classes
            stride = None
        else:
            kernel = 1 if r.kind == "conv1x1" else 3
            h, w = _out_size(h, r.stride, kernel), _out_size(w, r.stride, kernel)
            c = config.channels(r)
            stride = r.stride
        if h < 1 or w < 1:
            raise ConfigError(f"row {r.index}: input {input_shape} collapses to nothing")
        shapes.append(ShapeRow(r.index, r.kind, src, (h, w, c), stride))
    return shapes


# -- text format -------------------------------------------------------------

_KEYS = {"name": str, "num_classes": int, "ratio": int, "width": float, "input_channels": int}


def parse_config(text: str, source: str = "<config>") -> ArchitectureConfig:
    settings: dict = {}
    rows: list[LayerRow] = []
    in_rows = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line == "[rows]":
            in_rows = True
            continue
        if not in_rows:
            if "=" not in line:
                raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _KEYS:
                raise ConfigError(f"{where}: unknown key {key!r}")
            try:
                settings[key] = _KEYS[key](value)
            except ValueError:
                raise ConfigError(f"{where}: bad value {value!r} for {key}") from None
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ConfigError(f"{where}: row needs 'index kind channels stride', got {raw.strip()!r}")
        idx, kind, chans, stride = parts
        if kind not in KINDS:
            raise ConfigError(f"{where}: unknown layer kind {kind!r}")
        try:
            lo, _, hi = idx.partition("-")
            first, last = int(lo), int(hi or lo)
            channels = 0 if chans in ("-", "k") else int(chans)
            stride_v = 1 if stride == "-" else int(stride)
        except ValueError:
            raise ConfigError(f"{where}: malformed row {raw.strip()!r}") from None
        if last < first:
            raise ConfigError(f"{where}: empty index range {idx}")
        if channels == 0 and kind not in ("avgpool", "classifier"):
            raise ConfigError(f"{where}: {kind} needs an explicit channel count")
        for i in range(first, last + 1):
            # only the first layer of a repeated group may change stride or width
            s = stride_v if i == first else 1
            rows.append(LayerRow(i, kind, channels, s))
    if not rows:
        raise ConfigError(f"{source}: no [rows] section")
    cfg = ArchitectureConfig(rows=tuple(rows), **settings)
    cfg.validate()
    return cfg


def format_config(config: ArchitectureConfig) -> str:
    lines = [f"name = {config.name}", f"num_classes = {config.num_classes}",
             f"ratio = {config.ratio}", f"width = {config.width}", "", "[rows]",
             "# index  kind                  channels  stride"]
    for r in config.rows:
        chans = "k" if r.kind == "classifier" else ("-" if r.kind == "avgpool" else str(r.channels))
        stride = "-" if r.kind in ("avgpool", "classifier") else str(r.stride)
        lines.append(f"{r.index:<8d} {r.kind:<21s} {chans:<9s} {stride}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> ArchitectureConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def canonical_config(num_classes: int = 10) -> ArchitectureConfig:
    text = resources.files("pestnet.configs").joinpath("canonical.cfg").read_text()
    return parse_config(text, "canonical.cfg").with_classes(num_classes)
