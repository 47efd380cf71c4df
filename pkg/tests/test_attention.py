import numpy as np
import pytest

from oracles import distribute_loops, gather_loops, rel_err
from pestnet.attention import (
    DoubleAttention, DoubleAttentionSpec, attended_inverted_residual, attended_spec, distribute, gather,
)
from pestnet.errors import ConfigError, DimensionError
from pestnet.gradcheck import CHECKS, TOLERANCE
from pestnet.layers import InvertedResidual, InvertedResidualSpec
from pestnet.tensor import Tensor


def test_spec_channels_and_params():
    spec = DoubleAttentionSpec.shared(384, 6)
    assert (spec.c_m, spec.c_n) == (64, 64)
    # theta, phi, rho: c -> m, n, n ; out: m -> c ; all with bias
    assert spec.param_count == 384 * 64 * 3 + 64 * 384 + 64 * 3 + 384 == 98_880
    assert DoubleAttentionSpec.shared(576, 6).param_count == 222_048


def test_indivisible_ratio_is_config_error():
    with pytest.raises(ConfigError):
        DoubleAttentionSpec(100, 6, 6)
    with pytest.raises(ConfigError):
        InvertedResidualSpec(8, 8, 2, attention=DoubleAttentionSpec.shared(48, 6))


def test_gather_distribute_against_loops(rng):
    for _ in range(10):
        a = rng.standard_normal((2, 3, 4, 5))
        b = rng.standard_normal((2, 4, 4, 5)) * 4
        v = rng.standard_normal((2, 4, 4, 5)) * 4
        g = gather(Tensor(a), Tensor(b)).data
        assert rel_err(g, gather_loops(a, b)) <= 1e-12
        assert rel_err(distribute(Tensor(g), Tensor(v)).data, distribute_loops(g, v)) <= 1e-12


def test_shape_errors():
    with pytest.raises(DimensionError):
        gather(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 2, 4, 4))))
    with pytest.raises(DimensionError):
        distribute(Tensor(np.ones((1, 2, 3))), Tensor(np.ones((1, 4, 2, 2))))
    module = DoubleAttention(DoubleAttentionSpec.shared(12, 2))
    with pytest.raises(DimensionError):
        module.forward(Tensor(np.ones((1, 6, 2, 2))))


def test_constant_attention_maps_average_features(rng):
    # uniform B => G is the spatial mean of A; uniform V => Z averages G over c_n
    a = rng.standard_normal((1, 3, 2, 2))
    g = gather(Tensor(a), Tensor(np.zeros((1, 2, 2, 2)))).data
    np.testing.assert_allclose(g, np.repeat(a.mean(axis=(2, 3))[..., None], 2, axis=2))
    z = distribute(Tensor(g), Tensor(np.zeros((1, 2, 2, 2)))).data
    np.testing.assert_allclose(z, np.broadcast_to(g.mean(axis=2)[..., None, None], (1, 3, 2, 2)))


def test_capture_and_residual(rng):
    module = DoubleAttention(DoubleAttentionSpec.shared(12, 3), np.float64)
    u = Tensor(rng.standard_normal((1, 12, 3, 3)))
    cap = {}
    out = module.forward(u, capture=cap)
    assert cap["A"].shape == (1, 4, 3, 3) and cap["Z"].shape == (1, 4, 3, 3)
    module.out.weight.data[...] = 0
    module.out.bias.data[...] = 0
    np.testing.assert_array_equal(module.forward(u).data, u.data)
    assert out.shape == u.shape


def test_attended_block_requires_attention():
    with pytest.raises(ConfigError):
        attended_inverted_residual(Tensor(np.ones((1, 4, 3, 3))), InvertedResidual(InvertedResidualSpec(4, 4)))
    block = InvertedResidual(attended_spec(4, ratio=2))
    assert attended_inverted_residual(Tensor(np.ones((1, 4, 3, 3), np.float32)), block).shape == (1, 4, 3, 3)


@pytest.mark.parametrize("name", ["gather", "distribute", "double_attention"])
def test_gradcheck_attention(name):
    assert max(CHECKS[name](s) for s in range(5)) <= TOLERANCE


def test_gradcheck_composite_blocks():
    assert max(CHECKS["inverted_residual"](s) for s in range(4)) <= TOLERANCE
    assert CHECKS["attended_block"](0) <= TOLERANCE
