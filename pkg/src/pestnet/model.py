"""Build a runnable network from an :class:`ArchitectureConfig`.

Parameter names follow ``layerNN.<block attr>...<leaf>``, for example
``layer11.attention.theta.weight`` or ``layer04.project.bn.gamma``; batch
norm running statistics are exposed as buffers with ``running_mean`` and
``running_var`` leaves.
"""

from __future__ import annotations

import numpy as np

from .architecture import ArchitectureConfig, infer_shapes
from .attention import DoubleAttentionSpec
from .errors import ContractError, DimensionError
from .layers import (
    DROPOUT_RATE, BatchNormState, Conv2d, ConvBNAct, ConvSpec, InvertedResidual,
    InvertedResidualSpec, Module, bind, dropout, global_avgpool, linear,
)
from .tensor import GradientTape, Tensor, reshape


class AvgPool(Module):
    def forward(self, x: Tensor, tape: GradientTape | None = None) -> Tensor:
        return global_avgpool(x)


class Classifier(Module):
    """Dropout followed by an affine map to class logits."""

    def __init__(self, features: int, num_classes: int, rate: float = DROPOUT_RATE, dtype=np.float32):
        self.rate = rate
        self.weight = Tensor(np.zeros((num_classes, features), dtype=dtype))
        self.bias = Tensor(np.zeros(num_classes, dtype=dtype))
        self.rng = np.random.default_rng(0)

    def forward(self, x: Tensor, tape: GradientTape | None = None) -> Tensor:
        if x.ndim == 4:
            x = reshape(x, (x.shape[0], x.shape[1]))
        x = dropout(x, self.rate, self.training, self.rng)
        return linear(x, bind(self.weight, tape), bind(self.bias, tape))


def make_layer(row, in_c: int, config: ArchitectureConfig, dtype) -> Module:
    out_c = None if row.kind == "avgpool" else config.channels(row)
    if row.kind == "conv3x3":
        return ConvBNAct(ConvSpec(in_c, out_c, 3, row.stride), dtype=dtype)
    if row.kind == "conv1x1":
        return ConvBNAct(ConvSpec(in_c, out_c, 1, row.stride), dtype=dtype)
    if row.kind == "avgpool":
        return AvgPool()
    if row.kind == "classifier":
        return Classifier(in_c, out_c, dtype=dtype)
    attention = None
    if row.kind == "double_attention_ir":
        attention = DoubleAttentionSpec.shared(in_c * row.expansion, config.ratio)
    spec = InvertedResidualSpec(in_c, out_c, row.stride, row.expansion, attention)
    return InvertedResidual(spec, dtype)


class Model(Module):
    def __init__(self, config: ArchitectureConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        in_c = config.input_channels
        for row in config.rows:
            layer = make_layer(row, in_c, config, dtype)
            setattr(self, f"layer{row.index:02d}", layer)
            if row.kind not in ("avgpool",):
                in_c = config.num_classes if row.kind == "classifier" else config.channels(row)

    @property
    def layers(self) -> list[tuple[int, Module]]:
        return [(r.index, getattr(self, f"layer{r.index:02d}")) for r in self.config.rows]

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def head_prefix(self) -> str:
        return f"layer{self.config.rows[-1].index:02d}."

    def train(self) -> "Model":
        self.set_training(True)
        return self

    def eval(self) -> "Model":
        self.set_training(False)
        return self

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and running statistics by name (arrays are live references)."""
        out = {name: t.data for name, t in self.named_parameters()}
        for name, bn, attr in self.named_buffers():
            out[name] = getattr(bn, attr)
        return out

    def seed_dropout(self, seed) -> None:
        self.layers[-1][1].rng = np.random.default_rng(seed)

    def forward(self, x: Tensor, tape: GradientTape | None = None, capture: dict | None = None) -> Tensor:
        """Return pre-softmax logits ``[n, k]``.

        ``capture`` (if given) receives the feature map after every layer,
        keyed by layer index.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise DimensionError(f"model expects [n,{self.config.input_channels},h,w] input, got {x.shape}")
        if self.training and tape is None:
            raise ContractError("train-mode forward requires a gradient tape")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        for index, layer in self.layers:
            x = layer.forward(x, tape)
            if capture is not None:
                capture[index] = x
        return x

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        """Class probabilities in eval mode."""
        was = self.training
        self.eval()
        try:
            logits = self.forward(x).data.astype(np.float64)
        finally:
            self.set_training(was)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def reinit_head(self, seed) -> None:
        _init_module(self.layers[-1][1], np.random.default_rng(seed))

    def shapes(self, input_shape=(224, 224, 3)):
        return infer_shapes(self.config, input_shape)


def _init_module(module, rng: np.random.Generator) -> None:
    """Kaiming-normal (fan-out) convs, unit/zero BN, small-normal classifier."""
    if isinstance(module, Conv2d):
        o, _, k, _ = module.weight.shape
        std = np.sqrt(2.0 / (o * k * k))
        module.weight.data[...] = rng.normal(0.0, std, module.weight.shape)
        if module.spec.has_bias:
            module.bias.data[...] = 0
        return
    if isinstance(module, Classifier):
        module.weight.data[...] = rng.normal(0.0, 0.01, module.weight.shape)
        module.bias.data[...] = 0
        return
    if isinstance(module, BatchNormState):
        module.gamma.data[...] = 1
        module.beta.data[...] = 0
        module.running_mean[...] = 0
        module.running_var[...] = 1
        return
    for _, child in module.children():
        _init_module(child, rng)


def build(config: ArchitectureConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Construct and deterministically initialize a model (eval mode)."""
    model = Model(config, dtype)
    _init_module(model, np.random.default_rng(seed))
    model.seed_dropout(np.random.SeedSequence(seed).spawn(1)[0])
    return model.eval()


def count_params(model: Model) -> int:
    """Learned parameters only; running statistics are excluded."""
    return int(sum(t.size for _, t in model.named_parameters()))
