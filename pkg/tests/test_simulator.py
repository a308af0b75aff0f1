import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import min_misses, pod_event_trace
from podsim.interconnect import InterconnectConfig, latency
from podsim.scheduler import PodConfig, schedule
from podsim.simulator import BankConfig, ResidencyReport, _belady_bank, bank_residency, simulate
from podsim.tiling import TileGraph
from podsim.workload import build_model, load_builtin


def _one_pod_stream(n_tiles, rows, r=32, c=32, U=16, V=16, topo="crossbar"):
    """n_tiles independent ops of ``rows`` rows each on a single pod.

    The run is timed as if the pod sat behind a 256-port ``topo`` network.
    """
    seq = (n_tiles - 1) * r + rows
    m = build_model({"name": "s", "layers": [{"id": "fc", "kind": "dense", "in_features": r, "out_features": c, "seq": seq}]})
    tg = TileGraph(m, r, c)
    pods = PodConfig(pods=1, rows=r, cols=c, U=U, V=V)
    s = schedule(tg, pods, nets=InterconnectConfig("crossbar", 1))
    nets = InterconnectConfig(topo, 256, 2 if topo == "butterfly" else 1)
    trace = []
    stats = simulate(s, nets=nets, trace=trace)
    return s, stats, trace, latency(nets)


@pytest.mark.parametrize("r,c,U,V", [(32, 32, 16, 16), (16, 64, 16, 4), (64, 8, 8, 64), (8, 8, 1, 1)])
def test_single_full_tile_span(r, c, U, V):
    s, stats, trace, L = _one_pod_stream(1, r, r, c, U, V)
    (ev,) = trace
    expect = r + -(-c // U) + -(-r // V)
    assert (ev.start, ev.compute_end, ev.finish) == (0, r, expect)
    assert pod_event_trace([(r, r)], r, c, U, V, latency=1) == [(0, expect)]


@pytest.mark.parametrize("n", [2, 5, 12])
def test_back_to_back_full_tiles(n):
    r, c = 32, 32
    s, stats, trace, L = _one_pod_stream(n, r)
    starts = [e.start for e in trace]
    assert np.diff(starts).tolist() == [r] * (n - 1)
    ref = pod_event_trace([(r, r)] * n, r, c, 16, 16, latency=1)
    assert [(e.start, e.finish) for e in trace] == ref


@pytest.mark.parametrize("topo", ["crossbar", "butterfly", "benes_copy"])
@pytest.mark.parametrize("rows", [32, 20, 5])
def test_event_trace_matches_cycle_stepper(topo, rows):
    s, stats, trace, L = _one_pod_stream(4, rows, topo=topo)
    ops = [(int(s.m[e.op]), int(s.n[e.op])) for e in trace]
    assert [(e.start, e.finish) for e in trace] == pod_event_trace(ops, 32, 32, 16, 16, latency=L)


def test_latency_below_quantum_is_hidden():
    # Benes at 256 ports: 30 cycles of latency, under the 32-cycle quantum
    _, fast, _, _ = _one_pod_stream(4, 32, topo="crossbar")
    _, slow, trace, L = _one_pod_stream(4, 32, topo="benes_copy")
    assert L == 30
    assert [e.start for e in trace] == [0, 32, 64, 96]
    assert slow.cycles_per_tile_op == pytest.approx(32) == fast.cycles_per_tile_op
    # a 20-row op cannot cover the latency with its own rows
    _, part, _, _ = _one_pod_stream(4, 20, topo="benes_copy")
    assert part.cycles_per_tile_op == pytest.approx((3 * 32 + 30) / 4)


def test_latency_above_quantum_stretches_slices():
    _, fast, _, _ = _one_pod_stream(4, 16, 16, 16, topo="butterfly")
    _, slow, trace, _ = _one_pod_stream(4, 16, 16, 16, topo="benes_copy")
    assert np.diff([e.start for e in trace]).tolist() == [30, 30, 30]
    assert slow.cycles_per_tile_op == pytest.approx(30)
    assert fast.cycles_per_tile_op == pytest.approx(16)
    assert slow.utilization < fast.utilization


def test_empty_schedule_gives_zero_stats():
    m = load_builtin("toy_2x2")
    tg = TileGraph(m, 32, 32)
    s = schedule(tg, PodConfig(pods=4), nets=InterconnectConfig("crossbar", 4))
    s.n_ops = 0
    s.pp_slice = []
    st_ = simulate(s)
    assert (st_.makespan, st_.useful_macs, st_.utilization, st_.dram_bytes) == (0, 0, 0.0, 0)


def test_toy_counters():
    m = load_builtin("toy_2x2")
    tg = TileGraph(m, 32, 32)
    s = schedule(tg, PodConfig(pods=4), nets=InterconnectConfig("butterfly", 4, 2))
    stats = simulate(s, BankConfig(4, 1 << 20))
    assert stats.useful_macs == 64 ** 3
    assert stats.net_bytes["x"] == 8 * 1024
    assert stats.net_bytes["pout"] == 8 * 2048
    assert stats.net_bytes["w"] == 1024 * int((s.w_bank >= 0).sum())
    assert stats.utilization == pytest.approx(64 ** 3 / (4 * 1024 * stats.makespan))
    # inputs and weights come from DRAM exactly once, nothing spills
    assert stats.evictions == 0
    assert stats.dram_bytes == 64 * 64 + 64 * 64


def test_residency_without_pressure_is_compulsory():
    m = load_builtin("bert_mini_s10")
    tg = TileGraph(m, 32, 32)
    s = schedule(tg, PodConfig(pods=8), nets=InterconnectConfig("butterfly", 8, 2))
    rep = bank_residency(s, BankConfig(8, 1 << 30))
    assert rep.evictions == 0
    assert rep.dram_read_bytes == rep.compulsory_bytes
    small = bank_residency(s, BankConfig(8, 4096))
    assert small.evictions > 0
    assert small.dram_bytes > rep.dram_bytes


def _replay(capacity, sizes, trace):
    """Run the bank replacement on clean objects, one access per slice."""
    names = sorted(set(trace))
    idx = {o: q for q, o in enumerate(names)}
    size = np.array([sizes[o] for o in names], dtype=np.int64)
    uses = sorted((idx[o], t) for t, o in enumerate(trace))
    use_obj = np.array([u[0] for u in uses], dtype=np.int64)
    use_sl = np.array([u[1] for u in uses], dtype=np.int64)
    starts = np.searchsorted(use_obj, np.arange(len(names) + 1))
    birth = np.array([use_sl[starts[q]] for q in range(len(names))], dtype=np.int64)
    rep = ResidencyReport()
    _belady_bank(np.arange(len(names)), size, np.full(len(names), 1), birth, np.zeros(len(names), bool), use_sl, starts, capacity, rep)
    # one access per slice, so refetch slices count refetches
    return len(names) + len(rep.refetch_bytes_by_slice)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.sampled_from("abcdef"), min_size=1, max_size=14), st.integers(1, 4))
def test_belady_matches_exhaustive_optimum_for_equal_sizes(trace, slots):
    sizes = {o: 1 for o in "abcdef"}
    assert _replay(slots, sizes, trace) == min_misses(slots, sizes, trace)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=12), st.integers(3, 8), st.lists(st.integers(1, 3), min_size=5, max_size=5))
def test_belady_never_beats_exhaustive_optimum(trace, cap, raw):
    sizes = dict(zip("abcde", raw))
    assert _replay(cap, sizes, trace) >= min_misses(cap, sizes, trace)


def test_dirty_spill_written_once():
    # one produced object, evicted twice by a larger competitor
    size = np.array([2, 2], dtype=np.int64)
    use_obj = np.array([0, 0, 0, 1, 1], dtype=np.int64)
    use_sl = np.array([2, 4, 6, 1, 3], dtype=np.int64)
    order = np.lexsort((use_sl, use_obj))
    use_obj, use_sl = use_obj[order], use_sl[order]
    starts = np.searchsorted(use_obj, np.arange(3))
    rep = ResidencyReport()
    birth = np.array([0, 1], dtype=np.int64)
    dirty = np.array([True, False])
    _belady_bank(np.arange(2), size, np.array([0, 1]), birth, dirty, use_sl, starts, 2, rep)
    assert rep.dram_write_bytes == 2
    assert rep.evictions >= 1


def test_simulate_is_deterministic():
    m = load_builtin("bert_mini_s10")
    tg = TileGraph(m, 32, 32)
    s = schedule(tg, PodConfig(pods=8), nets=InterconnectConfig("butterfly", 8, 2))
    assert simulate(s).as_dict() == simulate(s).as_dict()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12))
def test_utilization_nonincreasing_in_latency(a, b):
    lo, hi = sorted((a, b))
    tg = TileGraph(load_builtin("bert_mini_s10"), 16, 16)
    s = schedule(tg, PodConfig(pods=8, rows=16, cols=16), nets=InterconnectConfig("butterfly", 8, 2))
    u = [simulate(s, nets=InterconnectConfig("butterfly", 8, 2, stage_latency=x)).utilization for x in (lo, hi)]
    assert u[1] <= u[0]
