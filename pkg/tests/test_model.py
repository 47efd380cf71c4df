import numpy as np
import pytest

from pestnet.accounting import conv_cost, count_macs, gmac, layer_costs, total_cost
from pestnet.architecture import canonical_config, format_config, infer_shapes, load_config, parse_config
from pestnet.attention import DoubleAttentionSpec
from pestnet.errors import ConfigError, ContractError, DimensionError, FormatError
from pestnet.layers import BatchNormState, Conv2d
from pestnet.model import build, count_params
from pestnet.tensor import GradientTape, Tensor
from pestnet.weights import dumps, load_weights, loads, save_weights

# (c_in, c_out, expansion, attention) for rows 2..18 of the canonical layout
BLOCKS = ([(32, 16, 1, False), (16, 24, 6, False), (24, 24, 6, False), (24, 32, 6, False)]
          + [(32, 32, 6, False)] * 2 + [(32, 64, 6, False)] + [(64, 64, 6, False)] * 2
          + [(64, 64, 6, True), (64, 96, 6, False), (96, 96, 6, False), (96, 96, 6, True), (96, 160, 6, False)]
          + [(160, 160, 6, False)] * 2 + [(160, 320, 6, False)])


def closed_form_params(k=10, attention=True, ratio=6):
    """Independent per-layer summation (weights + BN gamma/beta + biases)."""
    total = 3 * 3 * 3 * 32 + 2 * 32
    for c_in, c_out, t, att in BLOCKS:
        hid = c_in * t
        if t != 1:
            total += c_in * hid + 2 * hid
        total += 9 * hid + 2 * hid + hid * c_out + 2 * c_out
        if att and attention:
            m = hid // ratio
            total += 3 * (hid * m + m) + m * hid + hid
    total += 320 * 1280 + 2 * 1280
    return total + 1280 * k + k


def test_block_table_matches_config():
    rows = [r for r in canonical_config().rows if 2 <= r.index <= 18]
    shapes = infer_shapes(canonical_config())
    assert [(s.in_shape[2], s.out_shape[2]) for s in shapes[1:18]] == [(b[0], b[1]) for b in BLOCKS]
    assert [r.kind == "double_attention_ir" for r in rows] == [b[3] for b in BLOCKS]


def test_param_counts_match_closed_form():
    assert count_params(build(canonical_config(10))) == closed_form_params() == 2_557_610
    assert count_params(build(canonical_config(10).without_attention())) == closed_form_params(attention=False)
    assert total_cost(canonical_config(10)).params == 2_557_610


def test_head_arithmetic():
    p10 = total_cost(canonical_config(10)).params
    p100 = total_cost(canonical_config(100)).params
    assert p100 - p10 == 90 * 1280 + 90


def test_ablation_params_with_thousand_way_head():
    """With a 1000-way head every reference ablation parameter count is reproduced."""
    base = canonical_config(1000)
    reference = {((10, 11), 4): 3.80, ((11, 14), 4): 3.99, ((13, 14), 4): 4.17,
                 ((10, 11), 6): 3.70, ((11, 14), 6): 3.83, ((13, 14), 6): 3.95,
                 ((10, 11), 8): 3.65, ((11, 14), 8): 3.75, ((13, 14), 8): 3.84}
    for (loc, r), millions in reference.items():
        assert round(total_cost(base.with_attention(loc, r)).params / 1e6, 2) == millions
    direct = total_cost(base.without_attention(), direct_attention=(11, 14), direct_ratio=1)
    assert round(direct.params / 1e6, 2) == 3.56


def test_torchvision_baseline_parameter_count():
    tv = pytest.importorskip("torchvision.models")
    ref = tv.mobilenet_v2(weights=None, num_classes=10)
    assert sum(p.numel() for p in ref.parameters()) == count_params(build(canonical_config(10).without_attention()))


def _modules_in_order(module):
    for _, child in module.children():
        if isinstance(child, (Conv2d, BatchNormState)):
            yield child
        else:
            yield from _modules_in_order(child)


def test_baseline_forward_matches_torchvision():
    torch = pytest.importorskip("torch")
    tv = pytest.importorskip("torchvision.models")
    torch.manual_seed(0)
    ref = tv.mobilenet_v2(weights=None, num_classes=7).double().eval()
    model = build(canonical_config(7).without_attention(), seed=1, dtype=np.float64)
    ours = [m for _, layer in model.layers[:-2] for m in _modules_in_order(layer)]
    theirs = [m for m in ref.features.modules() if isinstance(m, (torch.nn.Conv2d, torch.nn.BatchNorm2d))]
    assert len(ours) == len(theirs)
    rng = np.random.default_rng(0)
    for a, b in zip(ours, theirs):
        if isinstance(a, Conv2d):
            a.weight.data[...] = b.weight.detach().numpy()
        else:
            with torch.no_grad():
                b.weight.uniform_(0.5, 1.5)
                b.bias.normal_(0, 0.1)
                b.running_mean.copy_(torch.from_numpy(rng.normal(0, 0.1, a.channels)))
                b.running_var.copy_(torch.from_numpy(rng.uniform(0.5, 1.5, a.channels)))
            a.gamma.data[...] = b.weight.detach().numpy()
            a.beta.data[...] = b.bias.detach().numpy()
            a.running_mean[...] = b.running_mean.numpy()
            a.running_var[...] = b.running_var.numpy()
    head = model.layers[-1][1]
    head.weight.data[...] = ref.classifier[1].weight.detach().numpy()
    head.bias.data[...] = ref.classifier[1].bias.detach().numpy()
    x = rng.standard_normal((2, 3, 64, 64))
    want = ref(torch.from_numpy(x)).detach().numpy()
    np.testing.assert_allclose(model.forward(Tensor(x)).data, want, rtol=1e-9, atol=1e-9)


def test_strict_mac_formula():
    # single conv: k^2 * c_in/groups * c_out * h_out * w_out
    assert conv_cost(320, 1280, 1, 49).macs == 320 * 1280 * 49
    assert conv_cost(320, 1280, 1, 1).params == 409_600
    strict = count_macs(canonical_config(10), convention="mac")
    plain = count_macs(canonical_config(10).without_attention(), convention="mac")
    attention = sum(
        (3 * c * m + m * c + 2 * m * m) * 14 * 14 for c, m in ((384, 64), (576, 96)))
    assert strict - plain == attention


def test_profiler_gmacs():
    assert round(gmac(count_macs(build(canonical_config(10)))), 2) == 0.38
    assert round(gmac(count_macs(canonical_config(10).without_attention())), 2) == 0.32
    with pytest.raises(ValueError):
        count_macs(canonical_config(), convention="flops")


def test_ablation_monotone_in_ratio():
    base = canonical_config(1000)
    for loc in ((10, 11), (11, 14), (13, 14)):
        costs = [total_cost(base.with_attention(loc, r)) for r in (4, 6, 8)]
        assert costs[0].params > costs[1].params > costs[2].params
        assert costs[0].profiler > costs[1].profiler > costs[2].profiler


def test_stride_one_suffix_macs_scale_with_area():
    # 448 -> 224 halves every stage exactly (no odd extents before a stride-2 row)
    small = {lc.index: lc.cost.macs for lc in layer_costs(canonical_config(), (224, 224, 3))}
    large = {lc.index: lc.cost.macs for lc in layer_costs(canonical_config(), (448, 448, 3))}
    for i in (4, 6, 7, 9, 10, 11, 12, 13, 14, 16, 17, 18, 19):
        assert large[i] == 4 * small[i]


def test_infer_shapes_small_input():
    shapes = infer_shapes(canonical_config(), (96, 96, 3))
    assert shapes[18].out_shape == (3, 3, 1280)
    for a, b in zip(shapes, shapes[1:]):
        assert a.out_shape == b.in_shape
    with pytest.raises(ConfigError):
        infer_shapes(canonical_config(), (96, 96, 1))


def test_config_text_round_trip(tmp_path):
    cfg = canonical_config(10)
    path = tmp_path / "c.cfg"
    path.write_text(format_config(cfg))
    assert load_config(path) == cfg
    assert parse_config(format_config(cfg.with_attention((10, 11), 4))).attention_locations == (10, 11)


@pytest.mark.parametrize("text,line", [
    ("ratio = x\n[rows]\n", 1),
    ("bogus = 1\n", 1),
    ("[rows]\n1 conv3x3 32 2\n2 mystery 16 1\n", 3),
    ("[rows]\n1 conv3x3 32\n", 2),
])
def test_config_errors_are_line_numbered(text, line):
    with pytest.raises(ConfigError, match=f"cfg:{line}:"):
        parse_config(text, "cfg")


def test_invalid_attention_placement_lists_rows():
    with pytest.raises(ConfigError, match="offending rows: 3, 8"):
        canonical_config().with_attention((3, 8, 11))
    with pytest.raises(ConfigError):
        canonical_config().with_attention((11,), ratio=5)


def test_build_is_deterministic_and_eval_pure():
    a, b = build(canonical_config(4), seed=5), build(canonical_config(4), seed=5)
    for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and ta.data.tobytes() == tb.data.tobytes()
    assert len(a.layers) == 21
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 64, 64)).astype(np.float32))
    before = {k: v.copy() for k, v in a.state().items()}
    first, second = a.forward(x).data, a.forward(x).data
    assert first.shape == (2, 4) and first.tobytes() == second.tobytes()
    assert all(np.array_equal(before[k], v) for k, v in a.state().items())
    probs = a.predict(x.data)
    np.testing.assert_allclose(probs.sum(axis=1), 1, rtol=1e-6)
    assert np.array_equal(np.argmax(first + 3.0, axis=1), np.argmax(probs, axis=1))


def test_parameter_names_are_unique_and_documented():
    names = [n for n, _ in build(canonical_config()).named_parameters()]
    assert len(names) == len(set(names))
    assert "layer11.attention.theta.weight" in names and "layer21.weight" in names


def test_forward_contracts():
    model = build(canonical_config(3).with_width(0.25))
    with pytest.raises(DimensionError):
        model.forward(Tensor(np.zeros((1, 1, 32, 32), np.float32)))
    model.train()
    with pytest.raises(ContractError):
        model.forward(Tensor(np.zeros((2, 3, 32, 32), np.float32)))
    out = model.forward(Tensor(np.zeros((2, 3, 32, 32), np.float32)), GradientTape())
    assert out.on_tape


def test_weights_round_trip(tmp_path):
    model = build(canonical_config(5), seed=1)
    for bn in (v for _, v, _ in model.named_buffers()):
        bn.running_mean[...] = np.random.default_rng(2).random(bn.channels)
    save_weights(model, tmp_path / "w.a2lw")
    other = build(canonical_config(5), seed=9)
    assert load_weights(other, tmp_path / "w.a2lw") == []
    for k, v in model.state().items():
        assert other.state()[k].tobytes() == v.tobytes()
    x = Tensor(np.random.default_rng(3).standard_normal((1, 3, 64, 64)).astype(np.float32))
    assert other.forward(x).data.tobytes() == model.forward(x).data.tobytes()


def test_truncated_file_leaves_model_untouched(tmp_path):
    model = build(canonical_config(5), seed=1)
    blob = dumps(model.state())
    (tmp_path / "t.a2lw").write_bytes(blob[: len(blob) // 2])
    target = build(canonical_config(5), seed=2)
    before = {k: v.copy() for k, v in target.state().items()}
    with pytest.raises(FormatError):
        load_weights(target, tmp_path / "t.a2lw")
    assert all(np.array_equal(before[k], v) for k, v in target.state().items())


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],
    lambda b: b + b"\x00",
    lambda b: b[:-1],
])
def test_loads_rejects_corruption(mutate):
    blob = dumps({"a": np.ones((2, 3), np.float32), "b": np.zeros(4, np.float64)})
    assert loads(blob)["b"].dtype == np.float64
    with pytest.raises(FormatError):
        loads(mutate(blob))


def test_shape_mismatch_and_head_reinit(tmp_path):
    big = build(canonical_config(100), seed=1)
    save_weights(big, tmp_path / "k100.a2lw")
    small = build(canonical_config(10), seed=2)
    with pytest.raises(FormatError, match="layer21"):
        load_weights(small, tmp_path / "k100.a2lw")
    skipped = load_weights(small, tmp_path / "k100.a2lw", reinit_head=True, seed=3)
    assert sorted(skipped) == ["layer21.bias", "layer21.weight"]
    assert np.array_equal(small.state()["layer19.conv.weight"], big.state()["layer19.conv.weight"])
    head = small.state()["layer21.weight"]
    assert head.shape == (10, 1280) and 0.005 < head.std() < 0.015
