"""Aggregation/propagation double attention placed after the depthwise conv.

Given the expanded feature map ``U`` (``c_exp`` channels), three 1x1 convs
produce features ``A`` (``c_m``), attention maps ``B`` (``c_n``) and
attention vectors ``V`` (``c_n``). Global descriptors are gathered with
``G = A . softmax_space(B)^T`` and distributed back to every position with
``Z = G . softmax_channels(V)``; a fourth 1x1 conv lifts ``Z`` to
``c_exp`` channels and the result is added to ``U``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import Conv2d, ConvSpec, InvertedResidual, InvertedResidualSpec, Module
from .tensor import GradientTape, Tensor, add, matmul_batched, reshape, softmax, transpose


@dataclass(frozen=True)
class DoubleAttentionSpec:
    c_exp: int
    r1: int = 6
    r2: int = 6

    def __post_init__(self):
        if self.r1 < 1 or self.r2 < 1:
            raise ConfigError(f"reduction ratios must be positive, got r1={self.r1}, r2={self.r2}")
        if self.c_exp % self.r1 or self.c_exp % self.r2:
            raise ConfigError(
                f"{self.c_exp} channels are not divisible by r1={self.r1} and r2={self.r2}")

    @classmethod
    def shared(cls, c_exp: int, ratio: int) -> "DoubleAttentionSpec":
        return cls(c_exp, ratio, ratio)

    @property
    def c_m(self) -> int:
        return self.c_exp // self.r1

    @property
    def c_n(self) -> int:
        return self.c_exp // self.r2

    @property
    def param_count(self) -> int:
        c, m, n = self.c_exp, self.c_m, self.c_n
        return c * m + 2 * c * n + m * c + (m + 2 * n + c)


def gather(a: Tensor, b: Tensor) -> Tensor:
    """Second-order attention pooling: ``[n,c_m,h,w] x [n,c_n,h,w] -> [n,c_m,c_n]``."""
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"gather: incompatible operands {a.shape} and {b.shape}")
    n, cm, h, w = a.shape
    cn = b.shape[1]
    a_flat = reshape(a, (n, cm, h * w))
    attn = softmax(reshape(b, (n, cn, h * w)), axis=2)
    return matmul_batched(a_flat, transpose(attn, (0, 2, 1)))


def distribute(g: Tensor, v: Tensor) -> Tensor:
    """Propagate descriptors ``[n,c_m,c_n]`` to positions weighted by ``softmax_c(V)``."""
    if g.ndim != 3 or v.ndim != 4 or g.shape[0] != v.shape[0] or g.shape[2] != v.shape[1]:
        raise DimensionError(f"distribute: incompatible operands {g.shape} and {v.shape}")
    n, cn, h, w = v.shape
    weights = softmax(reshape(v, (n, cn, h * w)), axis=1)
    z = matmul_batched(g, weights)
    return reshape(z, (n, g.shape[1], h, w))


class DoubleAttention(Module):
    def __init__(self, spec: DoubleAttentionSpec, dtype=np.float32):
        self.spec = spec
        c, m, n = spec.c_exp, spec.c_m, spec.c_n
        self.theta = Conv2d(ConvSpec(c, m, 1, has_bias=True), dtype)
        self.phi = Conv2d(ConvSpec(c, n, 1, has_bias=True), dtype)
        self.rho = Conv2d(ConvSpec(c, n, 1, has_bias=True), dtype)
        self.out = Conv2d(ConvSpec(m, c, 1, has_bias=True), dtype)

    def forward(self, u: Tensor, tape: GradientTape | None = None, capture: dict | None = None) -> Tensor:
        if u.ndim != 4 or u.shape[1] != self.spec.c_exp:
            raise DimensionError(f"double attention expects {self.spec.c_exp} channels, got {u.shape}")
        a = self.theta.forward(u, tape)
        b = self.phi.forward(u, tape)
        v = self.rho.forward(u, tape)
        z = distribute(gather(a, b), v)
        if capture is not None:
            capture.update(A=a, B=b, V=v, Z=z)
        return add(u, self.out.forward(z, tape))


def double_attention(u: Tensor, module: DoubleAttention, tape: GradientTape | None = None) -> Tensor:
    return module.forward(u, tape)


def attended_inverted_residual(x: Tensor, block: InvertedResidual, tape: GradientTape | None = None) -> Tensor:
    if block.spec.attention is None:
        raise ConfigError("attended_inverted_residual needs a block built with an attention spec")
    return block.forward(x, tape)


def attended_spec(in_channels: int, ratio: int = 6) -> InvertedResidualSpec:
    """Stride-1, channel-preserving inverted residual with attention on its expanded map."""
    hidden = in_channels * 6
    return InvertedResidualSpec(in_channels, in_channels, 1, 6, DoubleAttentionSpec.shared(hidden, ratio))
