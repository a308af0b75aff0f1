import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from podsim.workload import (
    LayerSpec,
    ModelParseError,
    ModelValidationError,
    build_model,
    conv_to_gemm,
    dimension_stats,
    is_linear_extension,
    load_builtin,
    load_model,
    merge_models,
    models_dir,
)


def _resnet50_hand_macs(size: int) -> int:
    """Layer-by-layer MAC count of ResNet50 (stride on the first 1x1 of a block)."""
    same = lambda n, s: math.ceil(n / s)
    h = same(size, 2)
    macs = h * h * 7 * 7 * 3 * 64
    h = same(h, 2)
    cin = 64
    for mid, blocks, stride in [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)]:
        for b in range(blocks):
            s = stride if b == 0 else 1
            ho = (h - 1) // s + 1
            macs += ho * ho * (cin * mid + 9 * mid * mid + mid * mid * 4)
            if b == 0:
                macs += ho * ho * cin * mid * 4
            h, cin = ho, mid * 4
    return macs + 2048 * 1000


def test_minimal_dense_file(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"name": "d", "batch": 1, "layers": [{"id": "fc", "kind": "dense", "in_features": 64, "out_features": 64, "seq": 100}]}))
    m = load_model(path)
    assert len(m.layers) == 1
    g = m.layers[0]
    assert (g.d1, g.d2, g.d3, g.batch) == (100, 64, 64, 1)


@pytest.mark.parametrize("size", [224, 299])
def test_resnet50_macs_match_hand_count(size):
    assert load_builtin(f"resnet50_{size}").macs == _resnet50_hand_macs(size)


def test_forward_reference_rejected():
    raw = {
        "name": "bad",
        "layers": [
            {"id": "a", "kind": "dense", "in_features": 8, "out_features": 8, "seq": 4, "predecessors": ["b"]},
            {"id": "b", "kind": "dense", "in_features": 8, "out_features": 8, "seq": 4, "predecessors": ["a"]},
        ],
    }
    with pytest.raises(ModelValidationError):
        build_model(raw)


def test_malformed_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ModelParseError):
        load_model(path)


def test_nonpositive_dimension_rejected():
    with pytest.raises(ModelValidationError):
        build_model({"name": "z", "layers": [{"id": "a", "kind": "dense", "in_features": 0, "out_features": 8, "seq": 4}]})


def test_pointwise_conv():
    g = conv_to_gemm(LayerSpec(id="c", kind="conv2d", in_h=56, in_w=56, in_c=64, k_h=1, k_w=1, out_c=256, stride=1, padding="same"), 1)
    assert (g.d1, g.d2, g.d3) == (3136, 64, 256)


def test_strided_valid_conv():
    g = conv_to_gemm(LayerSpec(id="c", kind="conv2d", in_h=7, in_w=7, in_c=4, k_h=3, k_w=3, out_c=8, stride=2, padding="valid"), 2)
    assert (g.d1, g.d2, g.d3) == (18, 36, 8)


def test_degenerate_conv_output():
    with pytest.raises(ModelValidationError):
        conv_to_gemm(LayerSpec(id="c", kind="conv2d", in_h=2, in_w=2, in_c=1, k_h=3, k_w=3, out_c=1, padding="valid"), 1)


conv_layers = st.builds(
    lambda h, w, c, k, o, s, pad: LayerSpec(id="c", kind="conv2d", in_h=h, in_w=w, in_c=c, k_h=k, k_w=k, out_c=o, stride=s, padding=pad),
    st.integers(3, 40),
    st.integers(3, 40),
    st.integers(1, 16),
    st.sampled_from([1, 3]),
    st.integers(1, 16),
    st.integers(1, 3),
    st.sampled_from(["same", "valid"]),
)


@settings(max_examples=200, deadline=None)
@given(conv_layers, st.integers(1, 8))
def test_conv_lowering_preserves_work_and_scales_with_batch(layer, batch):
    g1 = conv_to_gemm(layer, 1)
    gb = conv_to_gemm(layer, batch)
    if layer.padding == "same":
        oh, ow = math.ceil(layer.in_h / layer.stride), math.ceil(layer.in_w / layer.stride)
    else:
        oh, ow = (layer.in_h - layer.k_h) // layer.stride + 1, (layer.in_w - layer.k_w) // layer.stride + 1
    assert g1.d1 * g1.d2 * g1.d3 == oh * ow * layer.k_h * layer.k_w * layer.in_c * layer.out_c
    assert gb.d1 == batch * g1.d1
    assert (gb.d2, gb.d3) == (g1.d2, g1.d3)


@pytest.mark.parametrize("name", ["resnet50_224", "densenet121_224", "inception_v3_299", "bert_base_s100"])
def test_topological_order_is_linear_extension(name):
    m = load_builtin(name)
    assert is_linear_extension(m, m.topo_order)
    pos = {m.layers[u].layer_id: t for t, u in enumerate(m.topo_order)}
    for g in m.layers:
        for p in g.predecessors:
            assert pos[p] < pos[g.layer_id]


def test_every_shipped_model_loads():
    files = sorted(models_dir().glob("*.json"))
    assert len(files) >= 60
    for f in files:
        m = load_model(f)
        assert m.macs > 0
        for g in m.layers[1:]:
            assert g.predecessors or g.inputs


def _dense(name, d_in, d_out, seq):
    return build_model({"name": name, "family": "cnn", "layers": [{"id": "x", "kind": "dense", "in_features": d_in, "out_features": d_out, "seq": seq}]})


def test_dimension_stats_single_layer():
    s = dimension_stats([_dense("a", 8, 16, 10)])["cnn"]
    assert s["d1"]["p10"] == s["d1"]["mean"] == s["d1"]["p90"] == 10
    assert s["d3"]["p10"] == s["d3"]["mean"] == s["d3"]["p90"] == 16


def test_dimension_stats_equal_weights():
    # both layers have 30000 MACs
    s = dimension_stats([_dense("a", 30, 10, 100), _dense("b", 10, 10, 300)])["cnn"]
    assert s["d1"]["mean"] == pytest.approx(200)


def test_dimension_stats_empty():
    with pytest.raises(ValueError):
        dimension_stats([])


def test_cnn_filter_reuse_exceeds_transformer():
    cnns = [load_builtin(n) for n in ("resnet50_299", "densenet121_299", "inception_v3_299")]
    berts = [load_builtin(n) for n in ("bert_medium_s100", "bert_base_s100", "bert_large_s100")]
    stats = dimension_stats(cnns + berts)
    assert stats["cnn"]["d1"]["mean"] > 5 * stats["transformer"]["d1"]["mean"]


def test_merge_prefixes_and_keeps_macs():
    a, b = load_builtin("toy_2x2"), load_builtin("bert_mini_s10")
    m = merge_models([a, b])
    assert m.macs == a.macs + b.macs
    assert all("/" in g.layer_id for g in m.layers)
    assert is_linear_extension(m, m.topo_order)


def _levels(m):
    depth = {}
    for u in m.topo_order:
        g = m.layers[u]
        depth[g.layer_id] = 1 + max((depth[p] for p in g.predecessors), default=-1)
    return depth


def test_merge_interleaves_by_relative_depth():
    a, b = load_builtin("toy_2x2"), load_builtin("bert_mini_s10")
    m = merge_models([a, b])
    rel = {}
    for src in (a, b):
        depth = _levels(src)
        n = 1 + max(depth.values())
        rel.update({f"{src.name}/{k}": (d + 1) / n for k, d in depth.items()})
    keys = [rel[g.layer_id] for g in m.layers]
    assert keys == sorted(keys)
    # the shallow toy model finishes only after half of the deep one
    last_toy = max(i for i, g in enumerate(m.layers) if g.layer_id.startswith("toy_2x2/"))
    assert last_toy >= len(m.layers) // 2
