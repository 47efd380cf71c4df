"""CNN building blocks: convolutions, batch norm, ReLU6, pooling, dropout
and the inverted residual bottleneck.

Functional ops take and return :class:`~pestnet.tensor.Tensor` objects and
register backward rules on the active tape. :class:`Module` subclasses own
parameters and batch-norm state and bind them to a tape on each forward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import GradientTape, Tensor, add, note_branches, result

EXPANSION = 6
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
DROPOUT_RATE = 0.2


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"channel counts must be positive: {self}")
        if self.kernel not in (1, 3):
            raise ConfigError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.groups not in (1, self.in_channels):
            raise ConfigError(f"groups must be 1 or in_channels, got {self.groups}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(f"channels not divisible by groups: {self}")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def depthwise(self) -> bool:
        return self.groups > 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def output_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernel) // self.stride + 1


# -- convolution -------------------------------------------------------------

def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, k: int, s: int, ho: int, wo: int):
    for i in range(k):
        for j in range(k):
            yield i, j, xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]


def _conv_dense(x: np.ndarray, w: np.ndarray, spec: ConvSpec, ho: int, wo: int):
    n, c = x.shape[:2]
    k, s, p = spec.kernel, spec.stride, spec.padding
    if k == 1:
        xs = x[:, :, ::s, ::s] if s > 1 else x
        cols = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
    else:
        xp = _pad(x, p)
        cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
        for i, j, win in _windows(xp, k, s, ho, wo):
            cols[:, :, i, j] = win
        cols = cols.reshape(n, c * k * k, ho * wo)
    wm = w.reshape(spec.out_channels, -1)
    out = np.matmul(wm, cols).reshape(n, spec.out_channels, ho, wo)

    def grads(g: np.ndarray):
        gm = g.reshape(n, spec.out_channels, ho * wo)
        dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(wm.T, gm)
        if k == 1:
            dx = dcols.reshape(n, c, ho, wo)
            if s > 1:
                full = np.zeros_like(x)
                full[:, :, ::s, ::s] = dx
                dx = full
            return dx, dw
        dcols = dcols.reshape(n, c, k, k, ho, wo)
        dxp = np.zeros((n, c, x.shape[2] + 2 * p, x.shape[3] + 2 * p), dtype=x.dtype)
        for i, j, win in _windows(dxp, k, s, ho, wo):
            win += dcols[:, :, i, j]
        return dxp[:, :, p:p + x.shape[2], p:p + x.shape[3]], dw

    return out, grads


def _conv_depthwise(x: np.ndarray, w: np.ndarray, spec: ConvSpec, ho: int, wo: int):
    k, s, p = spec.kernel, spec.stride, spec.padding
    xp = _pad(x, p)
    out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=x.dtype)
    for i, j, win in _windows(xp, k, s, ho, wo):
        out += win * w[:, 0, i, j][None, :, None, None]

    def grads(g: np.ndarray):
        dw = np.empty_like(w)
        dxp = np.zeros_like(xp)
        for i, j, win in _windows(xp, k, s, ho, wo):
            dw[:, 0, i, j] = (g * win).sum(axis=(0, 2, 3))
        for i, j, dwin in _windows(dxp, k, s, ho, wo):
            dwin += g * w[:, 0, i, j][None, :, None, None]
        return dxp[:, :, p:p + x.shape[2], p:p + x.shape[3]], dw

    return out, grads


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Zero-padded cross-correlation; ``groups`` is 1 (dense) or in_channels (depthwise)."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise DimensionError(f"conv2d: input {x.shape} does not match in_channels={spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise DimensionError(f"conv2d: weight {weight.shape}, expected {spec.weight_shape}")
    if spec.has_bias != (bias is not None):
        raise ContractError("conv2d: bias presence disagrees with spec.has_bias")
    ho, wo = spec.output_size(x.shape[2]), spec.output_size(x.shape[3])
    if spec.depthwise:
        out, grads = _conv_depthwise(x.data, weight.data, spec, ho, wo)
    else:
        out, grads = _conv_dense(x.data, weight.data, spec, ho, wo)
    if bias is None:
        return result(out, (x, weight), grads)
    out += bias.data[None, :, None, None]

    def rule(g):
        dx, dw = grads(g)
        return dx, dw, g.sum(axis=(0, 2, 3))

    return result(out, (x, weight, bias), rule)


def depthwise_conv(x: Tensor, spec: ConvSpec, weight: Tensor) -> Tensor:
    if not (spec.groups == spec.in_channels == spec.out_channels):
        raise ConfigError(f"depthwise_conv needs groups == in == out channels, got {spec}")
    return conv2d(x, spec, weight)


# -- normalization, activation, pooling --------------------------------------

class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    def __init__(self, channels: int, dtype=np.float32, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.gamma = Tensor(np.ones(channels, dtype=dtype))
        self.beta = Tensor(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum
        self.training = False

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]


def batchnorm(x: Tensor, state: BatchNormState, gamma: Tensor | None = None, beta: Tensor | None = None) -> Tensor:
    """Batch normalization over (n, h, w).

    Train mode normalizes with batch statistics and blends them into the
    running statistics (the running variance uses the unbiased estimate).
    Eval mode reads running statistics only and mutates nothing.
    """
    gamma = state.gamma if gamma is None else gamma
    beta = state.beta if beta is None else beta
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise DimensionError(f"batchnorm: input {x.shape} vs {state.channels} channels")
    xd = x.data
    n, c, h, w = xd.shape
    count = n * h * w
    gd = gamma.data[None, :, None, None]
    if state.training:
        if count == 1:
            raise ContractError("batchnorm in train mode needs more than one value per channel")
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = (1.0 / np.sqrt(var + state.eps)).astype(xd.dtype)
        xhat = xc * inv[None, :, None, None]
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(xd.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var * count / (count - 1)).astype(xd.dtype)

        def rule(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gd
            dx = (dxhat - (dbeta * gamma.data)[None, :, None, None] / count
                  - xhat * (dgamma * gamma.data)[None, :, None, None] / count) * inv[None, :, None, None]
            return dx, dgamma, dbeta
    else:
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).astype(xd.dtype)
        xhat = (xd - state.running_mean[None, :, None, None]) * inv[None, :, None, None]

        def rule(g):
            return (g * (gamma.data * inv)[None, :, None, None],
                    (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    out = xhat * gd + beta.data[None, :, None, None]
    return result(out, (x, gamma, beta), rule)


def relu6(x: Tensor) -> Tensor:
    """min(max(x, 0), 6); the subgradient at both kinks is 0."""
    xd = x.data
    mask = (xd > 0) & (xd < 6)
    note_branches(mask)
    return result(np.clip(xd, 0, 6), (x,), lambda g: (g * mask,))


def global_avgpool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    inv = x.dtype.type(1.0 / (h * w))
    return result(x.data.mean(axis=(2, 3), keepdims=True), (x,),
                  lambda g: (np.broadcast_to(g * inv, x.shape).copy(),))


def dropout(x: Tensor, rate: float, training: bool, rng) -> Tensor:
    """Inverted dropout: surviving values are scaled by 1/(1-rate)."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return result(x.data * mask, (x,), lambda g: (g * mask,))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of ``[n, f]`` rows through a ``[k, f]`` weight."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data
    return result(out, (x, weight, bias), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


# -- modules -----------------------------------------------------------------

def bind(t: Tensor, tape: GradientTape | None) -> Tensor:
    if tape is None or t.tape is tape:
        return t
    return tape.watch(t)


class Module:
    """Minimal parameter container with a train/eval switch.

    Attributes holding :class:`Tensor`, :class:`BatchNormState` or
    :class:`Module` values are discovered in assignment order, which fixes the
    parameter naming scheme (``<attr>.<attr>...<leaf>``).
    """

    training = False

    def children(self) -> Iterator[tuple[str, "Module | BatchNormState"]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, BatchNormState)):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, BatchNormState):
                yield f"{prefix}{name}.gamma", value.gamma
                yield f"{prefix}{name}.beta", value.beta

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState, str]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, BatchNormState):
                yield f"{prefix}{name}.running_mean", value, "running_mean"
                yield f"{prefix}{name}.running_var", value, "running_var"

    def set_training(self, training: bool) -> None:
        self.training = training
        for _, child in self.children():
            if isinstance(child, Module):
                child.set_training(training)
            else:
                child.training = training


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, dtype=np.float32):
        self.spec = spec
        self.weight = Tensor(np.zeros(spec.weight_shape, dtype=dtype))
        if spec.has_bias:
            self.bias = Tensor(np.zeros(spec.out_channels, dtype=dtype))

    def forward(self, x: Tensor, tape: GradientTape | None = None) -> Tensor:
        bias = bind(self.bias, tape) if self.spec.has_bias else None
        return conv2d(x, self.spec, bind(self.weight, tape), bias)


def bn_forward(state: BatchNormState, x: Tensor, tape: GradientTape | None) -> Tensor:
    return batchnorm(x, state, bind(state.gamma, tape), bind(state.beta, tape))


class ConvBNAct(Module):
    """conv -> BN -> optional ReLU6."""

    def __init__(self, spec: ConvSpec, activation: bool = True, dtype=np.float32):
        self.conv = Conv2d(spec, dtype)
        self.bn = BatchNormState(spec.out_channels, dtype)
        self.activation = activation

    def forward(self, x: Tensor, tape: GradientTape | None = None) -> Tensor:
        y = bn_forward(self.bn, self.conv.forward(x, tape), tape)
        return relu6(y) if self.activation else y


@dataclass(frozen=True)
class InvertedResidualSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    expansion: int = EXPANSION
    attention: Optional["DoubleAttentionSpec"] = None  # noqa: F821

    def __post_init__(self):
        if self.expansion not in (1, EXPANSION):
            raise ConfigError(f"expansion must be 1 or {EXPANSION}, got {self.expansion}")
        if self.attention is not None:
            if self.stride != 1:
                raise ConfigError("double attention is only supported in stride-1 blocks")
            if self.attention.c_exp != self.hidden:
                raise ConfigError(
                    f"attention width {self.attention.c_exp} != expanded width {self.hidden}")

    @property
    def hidden(self) -> int:
        return self.in_channels * self.expansion

    @property
    def use_shortcut(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


class InvertedResidual(Module):
    """Pointwise expand -> depthwise 3x3 -> [double attention] -> linear projection."""

    def __init__(self, spec: InvertedResidualSpec, dtype=np.float32):
        from .attention import DoubleAttention

        self.spec = spec
        hid = spec.hidden
        if spec.expansion != 1:
            self.expand = ConvBNAct(ConvSpec(spec.in_channels, hid, 1), dtype=dtype)
        self.depthwise = ConvBNAct(ConvSpec(hid, hid, 3, spec.stride, groups=hid), dtype=dtype)
        if spec.attention is not None:
            self.attention = DoubleAttention(spec.attention, dtype)
        self.project = ConvBNAct(ConvSpec(hid, spec.out_channels, 1), activation=False, dtype=dtype)

    def forward(self, x: Tensor, tape: GradientTape | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise DimensionError(f"inverted residual expects {self.spec.in_channels} channels, got {x.shape}")
        h = self.expand.forward(x, tape) if self.spec.expansion != 1 else x
        h = self.depthwise.forward(h, tape)
        if self.spec.attention is not None:
            h = self.attention.forward(h, tape)
        h = self.project.forward(h, tape)
        return add(x, h) if self.spec.use_shortcut else h


def inverted_residual(x: Tensor, block: InvertedResidual, tape: GradientTape | None = None) -> Tensor:
    return block.forward(x, tape)
