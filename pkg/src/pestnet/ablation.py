"""Attention placement / reduction-ratio grid with cost accounting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .accounting import gmac, total_cost
from .architecture import ArchitectureConfig, canonical_config

LOCATIONS = ((10, 11), (11, 14), (13, 14))
RATIOS = (4, 6, 8)


@dataclass
class AblationRow:
    l1: int
    l2: int
    r: int
    params: int
    gmacs: float
    acc_mean: float | None = None
    acc_std: float | None = None
    direct: bool = False

    def as_csv(self) -> dict:
        star = "*" if self.direct else ""
        return {
            "l1": f"{self.l1}{star}", "l2": f"{self.l2}{star}", "r": self.r,
            "params": self.params, "gmacs": f"{self.gmacs:.4f}",
            "acc_mean": "" if self.acc_mean is None else f"{self.acc_mean:.4f}",
            "acc_std": "" if self.acc_std is None else f"{self.acc_std:.4f}",
        }


def ablation_grid(base: ArchitectureConfig | None = None, locations: Iterable[Sequence[int]] = LOCATIONS,
                  ratios: Iterable[int] = RATIOS, num_classes: int = 1000,
                  input_shape: Sequence[int] = (224, 224, 3), include_direct: bool = True,
                  convention: str = "profiler", dataset=None, sgd=None, folds: int = 5) -> list[AblationRow]:
    """Cost every (locations, ratio) variant; optionally cross-validate each.

    ``num_classes`` defaults to a 1000-way head so that costs are comparable
    with ImageNet-style reporting. The direct-integration row puts ratio-1
    attention on the block *outputs* of the last location pair and is
    costed only.
    """
    base = canonical_config() if base is None else base
    base = base.with_classes(num_classes)
    locations = [tuple(l) for l in locations]
    rows = []
    for r in ratios:
        for loc in locations:
            cfg = base.with_attention(loc, r)
            cost = total_cost(cfg, input_shape)
            row = AblationRow(loc[0], loc[1], r, cost.params, gmac(cost.ops(convention)))
            if dataset is not None:
                from .train import run_cv

                res = run_cv(cfg.with_classes(len(dataset.classes)), dataset, sgd, k=folds)
                row.acc_mean, row.acc_std = res.mean_accuracy, res.std_accuracy
            rows.append(row)
    if include_direct:
        l1, l2 = (11, 14) if (11, 14) in locations or not locations else locations[-1]
        plain = base.without_attention()
        cost = total_cost(plain, input_shape, direct_attention=(l1, l2), direct_ratio=1)
        rows.append(AblationRow(l1, l2, 1, cost.params, gmac(cost.ops(convention)), direct=True))
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["l1", "l2", "r", "params", "gmacs", "acc_mean", "acc_std"])
        w.writeheader()
        for row in rows:
            w.writerow(row.as_csv())
    return path
