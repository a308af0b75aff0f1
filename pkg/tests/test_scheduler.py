import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphs import random_model
from podsim.interconnect import InterconnectConfig
from podsim.scheduler import PP_ACT, PP_ADD, PodConfig, Schedule, SchedulerOptions, schedule, validate
from podsim.tiling import TileGraph
from podsim.workload import MODEL_INPUT, build_model, load_builtin


def _dense_chain(*dims, seq=32):
    layers = []
    prev = MODEL_INPUT
    for idx, (a, b) in enumerate(zip(dims, dims[1:])):
        layers.append({"id": f"fc{idx}", "kind": "dense", "in_features": a, "out_features": b, "seq": seq, "predecessors": [prev]})
        prev = f"fc{idx}"
    return build_model({"name": "chain", "layers": layers})


def _run(model, P, r=32, c=32, topo="crossbar", k=1, kp=None, options=None):
    tg = TileGraph(model, r, c, kp)
    s = schedule(tg, PodConfig(pods=P, rows=r, cols=c, U=min(16, c), V=min(16, r)), nets=InterconnectConfig(topo, P, k), options=options)
    return tg, s


def test_toy_model_schedule():
    tg, s = _run(load_builtin("toy_2x2"), 4, topo="butterfly", k=2)
    assert s.n_ops == 8
    assert validate(s, tg) == []
    # two reduction steps per group, then one activation slice
    assert int(s.slice.max()) + 1 <= 4


def test_single_op_on_single_pod():
    tg, s = _run(_dense_chain(32, 32), 1, topo="butterfly")
    assert s.n_ops == 1
    assert (int(s.slice[0]), int(s.pod[0])) == (0, 0)
    assert s.n_adds == 0
    assert s.pp_kind == [PP_ACT]
    assert s.finalize[0] == 1
    assert validate(s, tg) == []


def test_consumer_waits_for_producer_activation():
    tg, s = _run(_dense_chain(32, 32, 32), 2)
    assert validate(s, tg) == []
    assert int(s.slice[1]) > int(s.finalize[0])


def test_independent_ops_fill_all_pods():
    m = build_model({"name": "d", "layers": [{"id": "fc", "kind": "dense", "in_features": 32, "out_features": 64, "seq": 256}]})
    tg, s = _run(m, 4)
    assert s.n_ops == 16
    assert len(np.unique(s.slice)) == 4
    assert validate(s, tg) == []


@pytest.mark.parametrize("P", [1, 4, 16])
def test_aggregation_accounting(P):
    tg, s = _run(_dense_chain(200, 96, 40, seq=70), P)
    assert validate(s, tg) == []
    sizes = np.bincount(s.group, minlength=tg.n_groups)
    # each group is reduced by chaining or adds, and activated once
    assert s.n_adds + s.n_chained == int((sizes - 1).sum())
    assert sum(1 for k in s.pp_kind if k == PP_ACT) == tg.n_groups
    single = [g for g in range(tg.n_groups) if sizes[g] == 1]
    add_groups = {g for g, k in zip(s.pp_group, s.pp_kind) if k == PP_ADD}
    assert not add_groups & set(single)


def _find_pair_same_slice(s):
    for a in range(s.n_ops):
        for b in range(a + 1, s.n_ops):
            if s.slice[a] == s.slice[b] and s.x_key[a] != s.x_key[b]:
                return a, b
    raise AssertionError("no pair")


def test_validator_flags_bank_conflict():
    tg, s = _run(_dense_chain(128, 128, seq=128), 8)
    a, b = _find_pair_same_slice(s)
    s.x_bank[b] = s.x_bank[a]
    assert any("serves" in v and "different tiles" in v for v in validate(s, tg))


def test_validator_flags_pod_collision():
    tg, s = _run(_dense_chain(128, 128, seq=128), 8)
    a, b = _find_pair_same_slice(s)
    s.pod[b] = s.pod[a]
    assert any(f"runs ops {a} and {b}" in v for v in validate(s, tg))


def test_validator_flags_early_consumer():
    tg, s = _run(_dense_chain(32, 32, 32), 2)
    s.slice[1] = s.finalize[0]
    assert any("reads data finalized" in v for v in validate(s, tg))


def test_validator_flags_unroutable_slice():
    tg, s = _run(_dense_chain(64, 64, seq=256), 8, topo="butterfly", k=8)
    assert validate(s, tg) == []
    # replay the same placement on a single butterfly plane
    msgs = validate(s, tg, nets=InterconnectConfig("butterfly", 8, 1))
    assert any("not routable" in v for v in msgs)


def test_schedule_is_deterministic():
    m = load_builtin("bert_mini_s10")
    _, a = _run(m, 8, topo="butterfly", k=2)
    _, b = _run(m, 8, topo="butterfly", k=2)
    assert a.to_json() == b.to_json()


def test_json_round_trip(tmp_path):
    tg, s = _run(load_builtin("bert_mini_s10"), 8, topo="butterfly", k=2)
    path = tmp_path / "s.json"
    s.dump(path)
    back = Schedule.load(path, tg)
    assert back.to_json() == s.to_json()
    assert validate(back, tg) == []


def test_weight_reuse_skips_loads():
    m = build_model({"name": "d", "layers": [{"id": "fc", "kind": "dense", "in_features": 32, "out_features": 32, "seq": 32 * 12}]})
    tg, s = _run(m, 1)
    # one pod streams twelve x-tiles against the same weights
    assert int((s.w_bank >= 0).sum()) == 1
    _, s2 = _run(m, 1, options=SchedulerOptions(weight_reuse=False))
    assert int((s2.w_bank >= 0).sum()) == 12


def test_zero_pods_rejected():
    with pytest.raises(ValueError):
        _run(_dense_chain(32, 32), 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([2, 4, 8]), st.sampled_from([4, 8]), st.sampled_from(["butterfly", "crossbar", "benes_copy"]))
def test_random_graphs_validate(seed, P, r, topo):
    rng = random.Random(seed)
    m = random_model(rng)
    kp = rng.choice([None, 0, max(1, r // 2)])
    tg, s = _run(m, P, r=r, c=rng.choice([4, 8]), topo=topo, k=rng.choice([1, 2]), kp=kp)
    assert validate(s, tg) == []
    assert int((s.m.astype(np.int64) * s.n * s.p).sum()) == m.macs
    assert s.n_slices <= s.n_ops * (int(s.span.max()) + 1) + 1


def test_validator_flags_missing_weights():
    m = build_model({"name": "d", "layers": [{"id": "fc", "kind": "dense", "in_features": 32, "out_features": 64, "seq": 32 * 6}]})
    tg, s = _run(m, 2)
    reused = np.nonzero(s.w_bank < 0)[0]
    assert len(reused)
    t = int(reused[0])
    s.pod[t] = 1 - s.pod[t]
    assert any("does not hold" in v for v in validate(s, tg))
