"""Pod/bank interconnects: butterfly-k, Benes with a copy stage, and crossbar.

Butterfly wiring
----------------
A plane is a log2(N)-stage network of 2x2 broadcast switches. A packet on
channel ``a`` entering stage ``i`` sits at switch ``a >> 1``, input port
``a & 1``. The switch forwards it on output port ``b = bit(dst, n-1-i)``,
so the output channel is ``(a & ~1) | b``. Between stage i and i+1 bit 0 of
the channel address is swapped with bit ``n-1-i``. After the last stage the
channel address equals the destination, so every (src, dst) pair has one
path (destination-tag routing). A multicast is the union of its paths, which
forms a tree rooted at the source.

Two demands conflict in a plane when they drive the same internal channel
(a stage output other than the final one). Butterfly-k offers k identical
planes; each demand is carried whole by one plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

TOPOLOGIES = ("butterfly", "benes_copy", "crossbar")

DEFAULT_NODE_BUDGET = 10_000

# mW per byte/cycle of sustained traffic at N = 256.
POWER_PER_BYTE_256 = {
    ("butterfly", 1): 0.23,
    ("butterfly", 2): 0.52,
    ("butterfly", 4): 1.15,
    ("butterfly", 8): 2.53,
    ("benes_copy", 1): 0.92,
    ("crossbar", 1): 7.36,
}


class RoutingError(ValueError):
    """Malformed routing problem (for example a destination used twice)."""


def log2_exact(n: int) -> int:
    if n < 1 or n & (n - 1):
        raise ValueError(f"{n} is not a power of two")
    return n.bit_length() - 1


@dataclass(frozen=True)
class InterconnectConfig:
    """Topology, port count N, and butterfly expansion k."""

    topology: str = "butterfly"
    ports: int = 256
    expansion: int = 2
    link_bytes: int = 0  # 0: sized to the pod interface
    stage_latency: int = 1

    def __post_init__(self) -> None:
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}")
        log2_exact(self.ports)
        if self.expansion < 1:
            raise ValueError("expansion must be >= 1")
        if self.stage_latency < 1:
            raise ValueError("stage latency must be >= 1")

    @property
    def planes(self) -> int:
        return self.expansion if self.topology == "butterfly" else 1

    @property
    def always_routable(self) -> bool:
        return self.topology != "butterfly" or self.ports == 1 or self.expansion >= self.ports

    def with_ports(self, n: int) -> "InterconnectConfig":
        return InterconnectConfig(self.topology, n, self.expansion, self.link_bytes, self.stage_latency)

    @property
    def label(self) -> str:
        if self.topology == "butterfly":
            return f"butterfly-{self.expansion}"
        return self.topology


@dataclass(frozen=True)
class RoutingProblem:
    """Source -> destination-set demands for one network in one slice."""

    demands: Tuple[Tuple[int, FrozenSet[int]], ...]

    @staticmethod
    def build(pairs: Mapping[int, Iterable[int]] | Iterable[Tuple[int, Iterable[int]]]) -> "RoutingProblem":
        items = pairs.items() if isinstance(pairs, Mapping) else pairs
        merged: Dict[int, Set[int]] = {}
        for s, ds in items:
            if isinstance(ds, int):
                ds = (ds,)
            merged.setdefault(int(s), set()).update(int(d) for d in ds)
        return RoutingProblem(tuple(sorted((s, frozenset(ds)) for s, ds in merged.items())))

    def validate(self, n_ports: int) -> None:
        seen_src: Set[int] = set()
        seen_dst: Set[int] = set()
        for s, ds in self.demands:
            if not 0 <= s < n_ports:
                raise RoutingError(f"source {s} out of range")
            if s in seen_src:
                raise RoutingError(f"source {s} appears twice")
            seen_src.add(s)
            if not ds:
                raise RoutingError(f"source {s} has no destination")
            for d in ds:
                if not 0 <= d < n_ports:
                    raise RoutingError(f"destination {d} out of range")
                if d in seen_dst:
                    raise RoutingError(f"destination {d} used by two demands")
                seen_dst.add(d)
        if len(self.demands) > n_ports:
            raise RoutingError("more demands than ports")


@dataclass
class RoutingResult:
    feasible: bool
    planes: Dict[int, int] = field(default_factory=dict)
    latency: int = 0
    switch_settings: Dict[Tuple[int, int, int], List[Tuple[int, int]]] = field(default_factory=dict)
    nodes: int = 0


# --------------------------------------------------------------------------
# butterfly paths


def butterfly_route(src: int, dst: int, n_stages: int) -> List[Tuple[int, int, int, int]]:
    """Per stage: (stage, switch, in_port, out_port) on the destination-tag path."""
    a = src
    hops = []
    for i in range(n_stages):
        bit = (dst >> (n_stages - 1 - i)) & 1
        hops.append((i, a >> 1, a & 1, bit))
        a = (a & ~1) | bit
        if i < n_stages - 1:
            hi = n_stages - 1 - i
            b0, bh = a & 1, (a >> hi) & 1
            if b0 != bh:
                a ^= 1 | (1 << hi)
    assert a == dst
    return hops


@lru_cache(maxsize=None)
def _path_row(src: int, n_ports: int) -> Tuple[Tuple[int, ...], ...]:
    """Internal link ids of the paths from ``src`` to every destination."""
    n = log2_exact(n_ports)
    rows = []
    for dst in range(n_ports):
        links = []
        for stage, sw, _inp, out in butterfly_route(src, dst, n)[:-1]:
            links.append(stage * n_ports + ((sw << 1) | out))
        rows.append(tuple(links))
    return tuple(rows)


def butterfly_links(src: int, dst: int, n_ports: int) -> Tuple[int, ...]:
    """Internal channel ids used by the path src -> dst."""
    return _path_row(src, n_ports)[dst]


def demand_links(src: int, dests: Iterable[int], n_ports: int) -> FrozenSet[int]:
    row = _path_row(src, n_ports)
    out: Set[int] = set()
    for d in dests:
        out.update(row[d])
    return frozenset(out)


def _solve_planes(
    order: Sequence[int],
    links: Mapping[int, FrozenSet[int]],
    k: int,
    budget: int,
    fixed: Optional[Mapping[int, int]] = None,
) -> Tuple[Optional[Dict[int, int]], int]:
    """Backtracking plane assignment; demands visited in ``order``.

    Returns (assignment or None, nodes expanded). Components of the conflict
    graph are solved independently, which yields the same first solution as a
    single search over all demands.
    """
    conflicts: Dict[int, List[int]] = {s: [] for s in order}
    by_link: Dict[int, List[int]] = {}
    for s in order:
        for l in links[s]:
            by_link.setdefault(l, []).append(s)
    for users in by_link.values():
        if len(users) > k:
            return None, 1
        if len(users) > 1:
            for a in users:
                for b in users:
                    if a != b:
                        conflicts[a].append(b)
    for s in conflicts:
        conflicts[s] = sorted(set(conflicts[s]))

    assign: Dict[int, int] = {}
    nodes = 0
    seen: Set[int] = set()
    pos = {s: t for t, s in enumerate(order)}
    for root in order:
        if root in seen:
            continue
        comp = []
        stack = [root]
        seen.add(root)
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in conflicts[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        comp.sort(key=pos.__getitem__)
        if len(comp) == 1:
            assign[comp[0]] = 0
            nodes += 1
            continue
        if k == 2:
            # two planes: the DFS reduces to bipartite coloring
            colors = _two_color(comp, conflicts)
            nodes += len(comp)
            if colors is None:
                return None, nodes
            assign.update(colors)
            continue
        # iterative DFS over plane choices
        choice = [-1] * len(comp)
        local: Dict[int, int] = {}
        t = 0
        while 0 <= t < len(comp):
            s = comp[t]
            local.pop(s, None)
            nxt = choice[t] + 1
            while nxt < k:
                nodes += 1
                if nodes > budget:
                    return None, nodes
                if all(local.get(v) != nxt for v in conflicts[s]):
                    break
                nxt += 1
            if nxt < k:
                choice[t] = nxt
                local[s] = nxt
                t += 1
            else:
                choice[t] = -1
                t -= 1
        if t < 0:
            return None, nodes
        assign.update(local)
    return assign, nodes


def _two_color(comp: Sequence[int], conflicts: Mapping[int, Sequence[int]]) -> Optional[Dict[int, int]]:
    """Color a connected component with planes 0/1, its first member on 0."""
    color = {comp[0]: 0}
    queue = [comp[0]]
    for u in queue:
        cu = color[u]
        for v in conflicts[u]:
            cv = color.get(v)
            if cv is None:
                color[v] = 1 - cu
                queue.append(v)
            elif cv == cu:
                return None
    return color


def route_butterfly_k(
    cfg: InterconnectConfig, problem: RoutingProblem, budget: int = DEFAULT_NODE_BUDGET
) -> RoutingResult:
    """Assign every demand to one of k planes without link sharing."""
    if cfg.topology != "butterfly":
        raise ValueError("route_butterfly_k needs a butterfly config")
    problem.validate(cfg.ports)
    lat = latency(cfg)
    if not problem.demands:
        return RoutingResult(True, {}, lat)
    n_ports = cfg.ports
    links = {s: demand_links(s, ds, n_ports) for s, ds in problem.demands}
    order = [s for s, _ in problem.demands]
    assign, nodes = _solve_planes(order, links, cfg.expansion, budget)
    if assign is None:
        return RoutingResult(False, {}, lat, nodes=nodes)
    settings: Dict[Tuple[int, int, int], List[Tuple[int, int]]] = {}
    n = log2_exact(n_ports)
    for s, ds in problem.demands:
        plane = assign[s]
        for d in sorted(ds):
            for stage, sw, inp, out in butterfly_route(s, d, n):
                conn = settings.setdefault((plane, stage, sw), [])
                if (inp, out) not in conn:
                    conn.append((inp, out))
    return RoutingResult(True, assign, lat, settings, nodes)


def route_crossbar(cfg: InterconnectConfig, problem: RoutingProblem) -> RoutingResult:
    problem.validate(cfg.ports)
    return RoutingResult(True, {s: 0 for s, _ in problem.demands}, latency(cfg))


def route_benes_copy(cfg: InterconnectConfig, problem: RoutingProblem) -> RoutingResult:
    problem.validate(cfg.ports)
    return RoutingResult(True, {s: 0 for s, _ in problem.demands}, latency(cfg))


def route(cfg: InterconnectConfig, problem: RoutingProblem, budget: int = DEFAULT_NODE_BUDGET) -> RoutingResult:
    if cfg.topology == "butterfly":
        return route_butterfly_k(cfg, problem, budget)
    if cfg.topology == "crossbar":
        return route_crossbar(cfg, problem)
    return route_benes_copy(cfg, problem)


def latency(cfg: InterconnectConfig) -> int:
    """One-way delivery latency in cycles."""
    n = log2_exact(cfg.ports)
    if cfg.topology == "butterfly":
        stages = n + 1
    elif cfg.topology == "crossbar":
        stages = 1
    else:
        stages = max(1, 2 * (2 * n - 1))
    return stages * cfg.stage_latency


def switch_count(cfg: InterconnectConfig) -> int:
    N = cfg.ports
    n = log2_exact(N)
    if cfg.topology == "butterfly":
        return cfg.expansion * (N // 2) * n
    if cfg.topology == "benes_copy":
        return 2 * N * n
    return N * N


def power_per_byte(cfg: InterconnectConfig) -> float:
    """mW per byte/cycle of traffic, interpolated from the N = 256 table."""
    N = cfg.ports
    n = log2_exact(N)
    if cfg.topology == "butterfly":
        base = _butterfly_ppb_256(cfg.expansion)
        return base * n / 8.0
    if cfg.topology == "benes_copy":
        return POWER_PER_BYTE_256[("benes_copy", 1)] * max(0, 2 * n - 1) / 15.0
    return POWER_PER_BYTE_256[("crossbar", 1)] * N / 256.0


def _butterfly_ppb_256(k: int) -> float:
    known = sorted(kk for (t, kk) in POWER_PER_BYTE_256 if t == "butterfly")
    if k in known:
        return POWER_PER_BYTE_256[("butterfly", k)]
    # piecewise linear in k, extended with the last segment's slope
    lo = max([kk for kk in known if kk < k], default=known[0])
    hi = min([kk for kk in known if kk > k], default=known[-1])
    if lo == hi:
        a, b = known[-2], known[-1]
        lo, hi = a, b
    ya, yb = POWER_PER_BYTE_256[("butterfly", lo)], POWER_PER_BYTE_256[("butterfly", hi)]
    return ya + (yb - ya) * (k - lo) / (hi - lo)


def cost_model(cfg: InterconnectConfig) -> Dict[str, float]:
    return {"switches": switch_count(cfg), "power_per_byte_mw": power_per_byte(cfg), "latency": latency(cfg)}


# --------------------------------------------------------------------------
# incremental router used while building a schedule


class SliceNetwork:
    """Routing state of one network instance within one time slice.

    Sources and destinations are endpoint ids (banks or pods). ``probe``
    checks whether adding src -> dst keeps the slice routable and returns a
    plan; ``commit`` applies it. Single-ported endpoints are enforced here:
    each destination takes one demand and each source serves one tile.
    """

    __slots__ = (
        "cfg", "n_ports", "k", "trivial", "owner", "plane_of", "dests", "links_of", "tile_of", "budget", "used",
        "users", "parent", "parity",
    )

    def __init__(self, cfg: InterconnectConfig, budget: int = DEFAULT_NODE_BUDGET):
        self.cfg = cfg
        self.n_ports = cfg.ports
        self.k = cfg.planes
        self.trivial = cfg.always_routable
        self.owner: List[Dict[int, int]] = [dict() for _ in range(self.k)]
        self.plane_of: Dict[int, int] = {}
        self.dests: Dict[int, Set[int]] = {}
        self.links_of: Dict[int, Set[int]] = {}
        self.tile_of: Dict[int, int] = {}
        self.budget = budget
        self.used: Set[int] = set()
        # two planes: link users plus a parity union-find over the conflict graph
        self.users: Dict[int, List[int]] = {}
        self.parent: Dict[int, int] = {}
        self.parity: Dict[int, int] = {}

    def source_busy(self, src: int, tile: int) -> bool:
        """True when ``src`` already serves a different tile this slice."""
        t = self.tile_of.get(src)
        return t is not None and t != tile

    def probe(self, src: int, dst: int, tile: int):
        """Return a plan for adding src -> dst carrying ``tile``, or None."""
        t = self.tile_of.get(src)
        if (t is not None and t != tile) or dst in self.used:
            return None
        if self.trivial:
            return (0, src, dst, tile)
        path = _path_row(src, self.n_ports)[dst]
        if self.k == 2:
            return self._probe_two(src, dst, tile, path)
        p = self.plane_of.get(src)
        owner = self.owner
        if p is not None:
            own = owner[p]
            for l in path:
                o = own.get(l)
                if o is not None and o != src:
                    break
            else:
                return (1, src, dst, tile, p, path)
            links = self.links_of[src].union(path)
            for q in range(self.k):
                if q == p:
                    continue
                own = owner[q]
                if all(own.get(l, src) == src for l in links):
                    return (2, src, dst, tile, q, links)
        else:
            for q in range(self.k):
                own = owner[q]
                for l in path:
                    if l in own:
                        break
                else:
                    return (1, src, dst, tile, q, path)
        if self.k == 1:
            return None
        # a link already carrying k other trees cannot take one more
        k = self.k
        for l in path:
            users = {own[l] for own in owner if l in own}
            users.discard(src)
            if len(users) >= k:
                return None
        return self._replan(src, dst, tile)

    def _find(self, x: int) -> Tuple[int, int]:
        """Root of ``x`` and the parity of x relative to it (with path compression)."""
        parent, parity = self.parent, self.parity
        trail = []
        while x in parent:
            trail.append(x)
            x = parent[x]
        acc = 0
        for y in reversed(trail):
            acc ^= parity[y]
            parent[y] = x
            parity[y] = acc
        return x, (parity[trail[0]] if trail else 0)

    def _probe_two(self, src: int, dst: int, tile: int, path):
        """Two planes: the slice routes iff the conflict graph stays bipartite."""
        mine = self.links_of.get(src, ())
        users = self.users
        partners = []
        for l in path:
            if l in mine:
                continue
            us = users.get(l)
            if us:
                if len(us) >= 2:
                    return None
                partners.append(us[0])
        if partners:
            overlay: Dict[int, Tuple[int, int]] = {}

            def find(x):
                r, p = self._find(x)
                while r in overlay:
                    r, q = overlay[r]
                    p ^= q
                return r, p

            for v in partners:
                ra, pa = find(src)
                rb, pb = find(v)
                if ra == rb:
                    if pa == pb:
                        return None
                else:
                    overlay[ra] = (rb, pa ^ pb ^ 1)
        return (4, src, dst, tile, path, partners)

    def _replan(self, src: int, dst: int, tile: int):
        """Re-solve the plane assignment of the conflict component around ``src``.

        Other components share no link with it, so their planes stay valid.
        """
        new_links = frozenset(self.links_of.get(src, ())).union(_path_row(src, self.n_ports)[dst])
        owner = self.owner
        links = {src: new_links}
        frontier = [src]
        while frontier:
            u = frontier.pop()
            for l in links[u]:
                for own in owner:
                    v = own.get(l)
                    if v is not None and v not in links:
                        links[v] = frozenset(self.links_of[v])
                        frontier.append(v)
        order = sorted(links)
        assign, _ = _solve_planes(order, links, self.k, self.budget)
        if assign is None:
            return None
        return (3, src, dst, tile, assign, links)

    def commit(self, plan) -> None:
        kind, src, dst, tile = plan[0], plan[1], plan[2], plan[3]
        self.tile_of[src] = tile
        self.dests.setdefault(src, set()).add(dst)
        self.used.add(dst)
        if kind == 0:
            return
        if kind == 4:
            path, partners = plan[4], plan[5]
            mine = self.links_of.setdefault(src, set())
            for l in path:
                if l not in mine:
                    mine.add(l)
                    self.users.setdefault(l, []).append(src)
            for v in partners:
                ra, pa = self._find(src)
                rb, pb = self._find(v)
                if ra != rb:
                    self.parent[ra] = rb
                    self.parity[ra] = pa ^ pb ^ 1
            return
        if kind == 1:
            q, path = plan[4], plan[5]
            self.plane_of[src] = q
            own = self.owner[q]
            ls = self.links_of.setdefault(src, set())
            for l in path:
                own[l] = src
                ls.add(l)
        elif kind == 2:
            q, links = plan[4], plan[5]
            old = self.owner[self.plane_of[src]]
            for l in self.links_of[src]:
                if old.get(l) == src:
                    del old[l]
            own = self.owner[q]
            for l in links:
                own[l] = src
            self.plane_of[src] = q
            self.links_of[src] = set(links)
        else:
            assign, links = plan[4], plan[5]
            for s in assign:
                if s in self.plane_of:
                    old = self.owner[self.plane_of[s]]
                    for l in self.links_of[s]:
                        if old.get(l) == s:
                            del old[l]
            for s, q in assign.items():
                own = self.owner[q]
                for l in links[s]:
                    own[l] = s
                self.plane_of[s] = q
                self.links_of[s] = set(links[s])

    def problem(self) -> RoutingProblem:
        return RoutingProblem.build({s: ds for s, ds in self.dests.items()})


def random_problem(rng, n_ports: int, max_fanout: int = 0) -> RoutingProblem:
    """Random destination-exclusive demand set (multicast allowed)."""
    dests = list(range(n_ports))
    rng.shuffle(dests)
    n_dest = rng.randint(1, n_ports)
    dests = dests[:n_dest]
    sources = list(range(n_ports))
    rng.shuffle(sources)
    demands: Dict[int, Set[int]] = {}
    si = 0
    t = 0
    limit = max_fanout or n_ports
    while t < len(dests):
        fan = rng.randint(1, min(limit, len(dests) - t))
        demands[sources[si]] = set(dests[t : t + fan])
        si += 1
        t += fan
    return RoutingProblem.build(demands)


def feasibility_rate(cfg: InterconnectConfig, trials: int, seed: int = 0, max_fanout: int = 0) -> float:
    """Fraction of random destination-exclusive demand sets that route."""
    import random

    rng = random.Random(seed)
    ok = 0
    for _ in range(trials):
        prob = random_problem(rng, cfg.ports, max_fanout)
        if route(cfg, prob).feasible:
            ok += 1
    return ok / trials if trials else 0.0
