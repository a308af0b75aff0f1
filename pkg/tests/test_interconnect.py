import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import butterfly_k_routable, enumerate_paths
from podsim.interconnect import (
    InterconnectConfig,
    RoutingError,
    RoutingProblem,
    SliceNetwork,
    butterfly_links,
    cost_model,
    feasibility_rate,
    latency,
    power_per_byte,
    random_problem,
    route,
    switch_count,
)


def _bf(N, k):
    return InterconnectConfig("butterfly", N, k)


def test_fig6_pair():
    prob = RoutingProblem.build({3: 2, 6: 3})
    assert not route(_bf(8, 1), prob).feasible
    res = route(_bf(8, 2), prob)
    assert res.feasible
    assert res.planes[3] != res.planes[6]


def test_identity_blocks_single_plane():
    # with this wiring the straight paths of s_i -> d_i share internal links
    ident = RoutingProblem.build({i: i for i in range(8)})
    assert not route(_bf(8, 1), ident).feasible
    assert not butterfly_k_routable(8, 1, ident.demands)


def _rotate_bits_right(i, n):
    return (i >> 1) | ((i & 1) << (n - 1))


def test_bit_rotation_routes_on_single_plane():
    rot = RoutingProblem.build({i: _rotate_bits_right(i, 3) for i in range(8)})
    assert route(_bf(8, 1), rot).feasible
    assert butterfly_k_routable(8, 1, rot.demands)


@pytest.mark.parametrize("N", [4, 8])
def test_single_plane_routes_one_permutation_per_switch_setting(N):
    n = N.bit_length() - 1
    ok = sum(
        route(_bf(N, 1), RoutingProblem.build({i: p[i] for i in range(N)})).feasible
        for p in itertools.permutations(range(N))
    )
    assert ok == 2 ** ((N // 2) * n)


def test_full_replication_routes_everything():
    rng = random.Random(3)
    for _ in range(200):
        assert route(_bf(8, 8), random_problem(rng, 8)).feasible


@pytest.mark.parametrize("topo", ["crossbar", "benes_copy"])
def test_nonblocking_topologies(topo):
    cfg = InterconnectConfig(topo, 256, 1)
    perm = list(range(256))
    random.Random(0).shuffle(perm)
    assert route(cfg, RoutingProblem.build({i: perm[i] for i in range(256)})).feasible
    with pytest.raises(RoutingError):
        route(cfg, RoutingProblem(((0, frozenset({1})), (1, frozenset({1})))))


def test_duplicate_destination_rejected_by_butterfly():
    with pytest.raises(RoutingError):
        route(_bf(8, 2), RoutingProblem(((0, frozenset({4})), (2, frozenset({4, 5})))))


def test_latencies():
    assert latency(_bf(256, 2)) == 9
    assert latency(_bf(256, 8)) == 9
    assert latency(InterconnectConfig("crossbar", 256)) == 1
    assert latency(InterconnectConfig("benes_copy", 256)) == 30
    assert latency(InterconnectConfig("benes_copy", 2)) == 2


def test_switch_counts():
    assert switch_count(_bf(2, 1)) == 1
    assert switch_count(_bf(256, 2)) == 2 * 128 * 8
    assert switch_count(InterconnectConfig("benes_copy", 256)) == 2 * 256 * 8
    assert switch_count(InterconnectConfig("crossbar", 256)) == 256 * 256


@pytest.mark.parametrize(
    "topo,k,value",
    [("butterfly", 1, 0.23), ("butterfly", 2, 0.52), ("butterfly", 4, 1.15), ("butterfly", 8, 2.53), ("benes_copy", 1, 0.92), ("crossbar", 1, 7.36)],
)
def test_power_per_byte_table(topo, k, value):
    cfg = InterconnectConfig(topo, 256, k)
    assert power_per_byte(cfg) == pytest.approx(value)
    assert cost_model(cfg)["power_per_byte_mw"] == pytest.approx(value)


def test_power_per_byte_grows_with_ports():
    for topo, k in (("butterfly", 2), ("crossbar", 1), ("benes_copy", 1)):
        vals = [power_per_byte(InterconnectConfig(topo, n, k)) for n in (16, 64, 256, 1024)]
        assert vals == sorted(vals)


@pytest.mark.parametrize("N", [2, 4, 8, 16])
def test_paths_unique_with_log_hops(N):
    n = N.bit_length() - 1
    for s in range(N):
        for d in range(N):
            paths = enumerate_paths(N, s, d)
            assert len(paths) == 1
            assert len(paths[0]) == n
            # internal links: every stage output except the last
            assert len(butterfly_links(s, d, N)) == n - 1


@pytest.mark.parametrize("N", [4, 8])
@pytest.mark.parametrize("k", [1, 2])
def test_router_agrees_with_oracle(N, k):
    rng = random.Random(N * 10 + k)
    memo = {}
    for _ in range(1000):
        prob = random_problem(rng, N)
        assert route(_bf(N, k), prob).feasible == butterfly_k_routable(N, k, prob.demands, memo)


def test_routing_result_has_no_shared_links():
    rng = random.Random(5)
    for _ in range(300):
        prob = random_problem(rng, 16)
        res = route(_bf(16, 2), prob)
        if not res.feasible:
            continue
        used = {}
        for s, ds in prob.demands:
            for d in ds:
                for l in butterfly_links(s, d, 16):
                    owner = used.setdefault((res.planes[s], l), s)
                    assert owner == s


problems = st.integers(0, 10_000).map(lambda seed: random_problem(random.Random(seed), 16))


@settings(max_examples=200, deadline=None)
@given(problems, st.integers(1, 4))
def test_feasibility_monotone_in_k(prob, k):
    if route(_bf(16, k), prob).feasible:
        assert route(_bf(16, k + 1), prob).feasible


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 15), st.integers(0, 15)), max_size=40))
def test_crossbar_feasibility_is_destination_exclusivity(pairs):
    srcs = {}
    exclusive = True
    for s, d in pairs:
        srcs.setdefault(s, set()).add(d)
    seen = set()
    for ds in srcs.values():
        if seen & ds:
            exclusive = False
        seen |= ds
    prob = RoutingProblem.build(srcs)
    cfg = InterconnectConfig("crossbar", 16)
    if exclusive:
        assert route(cfg, prob).feasible
    else:
        with pytest.raises(RoutingError):
            route(cfg, prob)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4]))
def test_incremental_router_commits_only_routable_sets(seed, k):
    rng = random.Random(seed)
    N = 16
    net = SliceNetwork(_bf(N, k))
    tiles = {}
    for _ in range(60):
        s, d = rng.randrange(N), rng.randrange(N)
        tile = tiles.setdefault(s, rng.randrange(1000))
        plan = net.probe(s, d, tile)
        if plan is not None:
            net.commit(plan)
            assert route(_bf(N, k), net.problem()).feasible
    # a destination is never used twice and a committed set always routes
    dests = [d for ds in net.dests.values() for d in ds]
    assert len(dests) == len(set(dests))


def test_feasibility_rate_bounds_and_determinism():
    a = feasibility_rate(_bf(8, 1), 100, seed=1)
    b = feasibility_rate(_bf(8, 1), 100, seed=1)
    assert a == b and 0 < a < 1
    assert feasibility_rate(InterconnectConfig("crossbar", 8), 50) == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        InterconnectConfig("butterfly", 6, 2)
    with pytest.raises(ValueError):
        InterconnectConfig("mesh", 8)
    with pytest.raises(ValueError):
        InterconnectConfig("butterfly", 8, 0)
