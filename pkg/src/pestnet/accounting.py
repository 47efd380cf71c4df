"""Parameter and multiply-accumulate accounting.

Two MAC conventions are supported:

``"mac"``
    Strict multiply-accumulates: every conv contributes
    ``k^2 * c_in/groups * c_out * h_out * w_out``, the classifier ``f * k``,
    and attention adds its four 1x1 convs plus ``2 * c_m * c_n * h * w`` for
    the two batched products. BN, activations and additions are free.

``"profiler"``
    What a per-module hook profiler reports: conv and linear MACs plus one op
    per bias element, two ops per batch-norm element, one per ReLU6 element
    and one per pooled input element. Functional ops (residual adds, softmax,
    batched matmuls) are invisible to module hooks and cost nothing. This is
    the convention behind the usual MobileNetV2 figures (0.32 GMAC
    at 224x224) and is the default.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .architecture import ArchitectureConfig, infer_shapes

CONVENTIONS = ("profiler", "mac")


@dataclass(frozen=True)
class Cost:
    params: int = 0
    macs: int = 0
    profiler: int = 0

    def __add__(self, other: "Cost") -> "Cost":
        return Cost(self.params + other.params, self.macs + other.macs, self.profiler + other.profiler)

    def ops(self, convention: str) -> int:
        if convention not in CONVENTIONS:
            raise ValueError(f"unknown MAC convention {convention!r}; use one of {CONVENTIONS}")
        return self.profiler if convention == "profiler" else self.macs


@dataclass(frozen=True)
class LayerCost:
    index: int
    kind: str
    cost: Cost


def conv_cost(c_in: int, c_out: int, kernel: int, hw_out: int, groups: int = 1, bias: bool = False) -> Cost:
    weights = kernel * kernel * (c_in // groups) * c_out
    macs = weights * hw_out
    extra = c_out * hw_out if bias else 0
    return Cost(weights + (c_out if bias else 0), macs, macs + extra)


def bn_cost(c: int, hw: int, relu: bool) -> Cost:
    return Cost(2 * c, 0, (3 if relu else 2) * c * hw)


def attention_cost(c_exp: int, c_m: int, c_n: int, hw: int) -> Cost:
    convs = (conv_cost(c_exp, c_m, 1, hw, bias=True) + conv_cost(c_exp, c_n, 1, hw, bias=True)
             + conv_cost(c_exp, c_n, 1, hw, bias=True) + conv_cost(c_m, c_exp, 1, hw, bias=True))
    return Cost(convs.params, convs.macs + 2 * c_m * c_n * hw, convs.profiler)


def _block_cost(c_in: int, c_out: int, expansion: int, hw_in: int, hw_out: int, attention: int | None) -> Cost:
    hid = c_in * expansion
    total = Cost()
    if expansion != 1:
        total += conv_cost(c_in, hid, 1, hw_in) + bn_cost(hid, hw_in, relu=True)
    total += conv_cost(hid, hid, 3, hw_out, groups=hid) + bn_cost(hid, hw_out, relu=True)
    if attention is not None:
        total += attention_cost(hid, hid // attention, hid // attention, hw_out)
    total += conv_cost(hid, c_out, 1, hw_out) + bn_cost(c_out, hw_out, relu=False)
    return total


def layer_costs(config: ArchitectureConfig, input_shape: Sequence[int] = (224, 224, 3),
                direct_attention: Iterable[int] = (), direct_ratio: int = 1) -> list[LayerCost]:
    """Per-layer costs; ``direct_attention`` appends a standalone attention
    module on the *output* of the listed rows (``c`` channels, ratio
    ``direct_ratio``) instead of inside the block."""
    direct = set(direct_attention)
    costs = []
    for shape, row in zip(infer_shapes(config, input_shape), config.rows):
        (hi, wi, ci), (ho, wo, co) = shape.in_shape, shape.out_shape
        hw_in, hw_out = hi * wi, ho * wo
        if row.kind == "conv3x3":
            cost = conv_cost(ci, co, 3, hw_out) + bn_cost(co, hw_out, relu=True)
        elif row.kind == "conv1x1":
            cost = conv_cost(ci, co, 1, hw_out) + bn_cost(co, hw_out, relu=True)
        elif row.kind == "avgpool":
            cost = Cost(0, 0, ci * hw_in)
        elif row.kind == "classifier":
            cost = Cost(ci * co + co, ci * co, ci * co + co)
        else:
            ratio = config.ratio if row.kind == "double_attention_ir" else None
            cost = _block_cost(ci, co, row.expansion, hw_in, hw_out, ratio)
        if row.index in direct:
            cost += attention_cost(co, co // direct_ratio, co // direct_ratio, hw_out)
        costs.append(LayerCost(row.index, row.kind, cost))
    return costs


def total_cost(config: ArchitectureConfig, input_shape: Sequence[int] = (224, 224, 3), **kw) -> Cost:
    total = Cost()
    for lc in layer_costs(config, input_shape, **kw):
        total += lc.cost
    return total


def config_params(config: ArchitectureConfig) -> int:
    return total_cost(config).params


def count_macs(model_or_config, input_shape: Sequence[int] = (224, 224, 3), convention: str = "profiler") -> int:
    """MACs (or profiler ops) for one forward pass of a single image."""
    config = getattr(model_or_config, "config", model_or_config)
    return total_cost(config, input_shape).ops(convention)


def gmac(ops: int) -> float:
    return ops / 1e9
