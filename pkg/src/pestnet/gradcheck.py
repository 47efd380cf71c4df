"""Finite-difference gradient checks for every differentiable building block.

Each check builds a small float64 instance from a seed, then compares tape
gradients with central differences for the block input and for every
parameter tensor (a seeded sample of coordinates for the larger ones).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .attention import DoubleAttention, DoubleAttentionSpec, attended_spec, distribute, gather
from .layers import (
    BatchNormState, Conv2d, ConvSpec, InvertedResidual, InvertedResidualSpec, Module,
    batchnorm, conv2d, global_avgpool, linear, relu6,
)
from .tensor import Tensor, finite_diff_check, matmul_batched, softmax
from .train import cross_entropy_loss

STEP = 1e-4
TOLERANCE = 1e-4
F64 = np.float64


def randomize(module: Module, rng: np.random.Generator) -> None:
    """Non-degenerate float64 parameters and running statistics."""
    for name, p in module.named_parameters():
        if name.endswith("gamma"):
            p.data[...] = 1 + 0.2 * rng.standard_normal(p.shape)
        elif name.endswith(("beta", "bias")):
            p.data[...] = 0.2 * rng.standard_normal(p.shape)
        else:
            fan_in = int(np.prod(p.shape[1:]))
            p.data[...] = rng.standard_normal(p.shape) / np.sqrt(fan_in)
    for _, bn, attr in module.named_buffers():
        if attr == "running_mean":
            bn.running_mean[...] = 0.1 * rng.standard_normal(bn.channels)
        else:
            bn.running_var[...] = rng.uniform(0.5, 1.5, bn.channels)


def _resolve(module, dotted: str):
    *path, leaf = dotted.split(".")
    owner = module
    for part in path:
        owner = getattr(owner, part)
    return owner, leaf


def module_check(module: Module, forward: Callable[[Tensor], Tensor], x: np.ndarray, seed: int,
                 max_coords: int | None = 24, step: float = STEP) -> float:
    """Max relative error over the input and every parameter of ``module``."""
    worst = finite_diff_check(forward, x, step, seed=seed)
    for name, p in list(module.named_parameters()):
        owner, leaf = _resolve(module, name)
        original = getattr(owner, leaf)

        def f(w, owner=owner, leaf=leaf, original=original):
            setattr(owner, leaf, w)
            try:
                return forward(Tensor(x))
            finally:
                setattr(owner, leaf, original)

        worst = max(worst, finite_diff_check(f, original.data, step, seed=seed, max_coords=max_coords))
    return worst


def _conv(seed: int, depthwise: bool) -> float:
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 5))
    stride = int(rng.integers(1, 3))
    kernel = 3 if depthwise or rng.random() < 0.7 else 1
    spec = ConvSpec(c, c if depthwise else int(rng.integers(2, 5)), kernel, stride,
                    groups=c if depthwise else 1, has_bias=not depthwise and rng.random() < 0.5)
    conv = Conv2d(spec, F64)
    randomize(conv, rng)
    x = rng.standard_normal((int(rng.integers(1, 3)), c, 5, 5))
    return module_check(conv, conv.forward, x, seed, max_coords=None)


def check_conv(seed: int) -> float:
    return _conv(seed, depthwise=False)


def check_depthwise_conv(seed: int) -> float:
    return _conv(seed, depthwise=True)


def check_batchnorm_train(seed: int) -> float:
    rng = np.random.default_rng(seed)
    bn = BatchNormState(3, F64)
    bn.training = True
    bn.gamma.data[...] = 1 + 0.2 * rng.standard_normal(3)
    bn.beta.data[...] = 0.2 * rng.standard_normal(3)
    x = rng.standard_normal((2, 3, 3, 3)) * 2 + 0.5
    worst = finite_diff_check(lambda t: batchnorm(t, bn), x, STEP, seed=seed)
    for attr in ("gamma", "beta"):
        worst = max(worst, finite_diff_check(
            lambda w, attr=attr: batchnorm(Tensor(x), bn, **{attr: w}), getattr(bn, attr).data, STEP, seed=seed))
    return worst


def check_relu6(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 8, (2, 3, 4, 4))
    # keep every coordinate at least 10 steps from a kink
    for kink in (0.0, 6.0):
        near = np.abs(x - kink) < 1e-3
        x[near] = kink + np.where(x[near] >= kink, 1e-3, -1e-3)
    return finite_diff_check(relu6, x, STEP, seed=seed)


def check_avgpool(seed: int) -> float:
    rng = np.random.default_rng(seed)
    return finite_diff_check(global_avgpool, rng.standard_normal((2, 3, 4, 5)), STEP, seed=seed)


def check_inverted_residual(seed: int) -> float:
    rng = np.random.default_rng(seed)
    stride = 1 if seed % 2 == 0 else 2
    out_c = 8 if stride == 1 else 6
    block = InvertedResidual(InvertedResidualSpec(8, out_c, stride), F64)
    randomize(block, rng)
    block.set_training(seed % 4 < 2)
    x = rng.standard_normal((1, 8, 6, 6))
    return module_check(block, block.forward, x, seed)


def check_gather(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 4, 3, 3))
    b = rng.standard_normal((2, 5, 3, 3))
    e1 = finite_diff_check(lambda t: gather(t, Tensor(b)), a, STEP, seed=seed)
    e2 = finite_diff_check(lambda t: gather(Tensor(a), t), b, STEP, seed=seed)
    return max(e1, e2)


def check_distribute(seed: int) -> float:
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((2, 4, 5))
    v = rng.standard_normal((2, 5, 3, 3))
    e1 = finite_diff_check(lambda t: distribute(t, Tensor(v)), g, STEP, seed=seed)
    e2 = finite_diff_check(lambda t: distribute(Tensor(g), t), v, STEP, seed=seed)
    return max(e1, e2)


def check_double_attention(seed: int) -> float:
    rng = np.random.default_rng(seed)
    module = DoubleAttention(DoubleAttentionSpec(12, 2, 3), F64)
    randomize(module, rng)
    return module_check(module, module.forward, rng.standard_normal((1, 12, 4, 4)), seed)


def check_attended_block(seed: int) -> float:
    rng = np.random.default_rng(seed)
    block = InvertedResidual(attended_spec(12, ratio=2), F64)
    randomize(block, rng)
    block.set_training(True)
    return module_check(block, block.forward, rng.standard_normal((1, 12, 4, 4)), seed)


def check_cross_entropy(seed: int) -> float:
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((4, 5)) * 2
    labels = rng.integers(0, 5, 4)
    return finite_diff_check(lambda t: cross_entropy_loss(t, labels), logits, STEP, seed=seed)


def check_matmul_softmax(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 4, 5))
    e1 = finite_diff_check(lambda t: matmul_batched(t, Tensor(b)), a, STEP, seed=seed)
    e2 = finite_diff_check(lambda t: matmul_batched(Tensor(a), t), b, STEP, seed=seed)
    e3 = finite_diff_check(lambda t: softmax(t, axis=int(seed % 3)), rng.standard_normal((2, 3, 4)), STEP, seed=seed)
    return max(e1, e2, e3)


def check_linear(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((3, 6)), rng.standard_normal((4, 6)), rng.standard_normal(4)
    return max(
        finite_diff_check(lambda t: linear(t, Tensor(w), Tensor(b)), x, STEP, seed=seed),
        finite_diff_check(lambda t: linear(Tensor(x), t, Tensor(b)), w, STEP, seed=seed),
        finite_diff_check(lambda t: linear(Tensor(x), Tensor(w), t), b, STEP, seed=seed),
    )


CHECKS: dict[str, Callable[[int], float]] = {
    "conv": check_conv,
    "depthwise_conv": check_depthwise_conv,
    "batchnorm_train": check_batchnorm_train,
    "relu6": check_relu6,
    "avgpool": check_avgpool,
    "inverted_residual": check_inverted_residual,
    "gather": check_gather,
    "distribute": check_distribute,
    "double_attention": check_double_attention,
    "attended_block": check_attended_block,
    "cross_entropy": check_cross_entropy,
    "matmul_softmax": check_matmul_softmax,
    "linear": check_linear,
}


def run_gradchecks(seeds: int = 20, names=None, first_seed: int = 0) -> dict[str, float]:
    """Worst relative error per block over ``seeds`` consecutive seeds."""
    out = {}
    for name in (CHECKS if names is None else names):
        fn = CHECKS[name]
        out[name] = max(fn(s) for s in range(first_seed, first_seed + seeds))
    return out
