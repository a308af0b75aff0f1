"""Offline scheduling of tile ops onto pods, banks and networks.

Time is divided into fixed slices of r cycles. Tile ops are visited layer by
layer in (instance, i, k, j) order. Each op goes into the earliest slice
where

* its x-tile (and, for attention matmuls, its w-tile) has been finalized by
  the producer layer in an earlier slice,
* an idle pod exists,
* the x, w and psum-in banks are free on their networks (one tile per bank
  per network per slice; the same tile may be multicast), and
* the X, W, P-in and P-out demands of the slice stay routable.

Partial sums of an aggregation group are combined either by chaining (the
next member of the group reads the previous member's output as its input
psum) or by pairwise adds on post-processor pairs. Every group ends with one
activation item on a single post-processor; consumers may read the result
from the following slice on.

A layer's groups are split into at most ceil(segment_factor * P / groups)
chained segments, so small layers spread over more pods. An op waits up to
``chain_slack`` slices to extend a chain before opening a new segment. Only
``window`` slices behind the earliest open slice stay searchable, which
bounds memory on large pod counts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .interconnect import InterconnectConfig, RoutingProblem, SliceNetwork, route
from .tiling import LayerTiling, TileGraph, cdiv, range_max

X_NET, W_NET, PIN_NET, POUT_NET = range(4)
NET_NAMES = ("x", "w", "pin", "pout")

PP_ADD, PP_ACT = 0, 1

_BANK_STRIDE_FRACTION = 0.618


@dataclass(frozen=True)
class PodConfig:
    """Pod count and array geometry."""

    pods: int = 256
    rows: int = 32
    cols: int = 32
    U: int = 16
    V: int = 16
    clock_hz: float = 1e9

    def __post_init__(self) -> None:
        if self.pods < 0 or self.rows < 1 or self.cols < 1:
            raise ValueError("pods must be >= 0, rows and cols >= 1")
        if not 1 <= self.U <= self.cols:
            raise ValueError("U must lie in [1, cols]")
        if not 1 <= self.V <= self.rows:
            raise ValueError("V must lie in [1, rows]")

    @property
    def fill_drain(self) -> int:
        return cdiv(self.cols, self.U) + cdiv(self.rows, self.V)


@dataclass(frozen=True)
class SchedulerOptions:
    weight_reuse: bool = True
    combo_cap: int = 4096
    window: Optional[int] = None  # slices kept open behind the frontier; None: scaled by pod count
    route_budget: int = 10_000
    max_segments: Optional[int] = None  # None: ceil(segment_factor * P / groups in layer)
    segment_factor: float = 2.0
    chain_slack: int = 1  # wait up to this many slices to chain instead of opening a segment


class Schedule:
    """Result of scheduling: per-op placement arrays plus post-processor items.

    Partial-sum ids: tile op ``t`` produces partial ``t``; post-processor add
    number ``a`` produces partial ``n_ops + a``.
    """

    def __init__(self, tg: TileGraph, pods: PodConfig, n_banks: int, nets: InterconnectConfig):
        n = tg.n_ops
        self.tg = tg
        self.pods = pods
        self.n_banks = n_banks
        self.nets = nets
        self.n_ops = n
        self.slice = np.full(n, -1, dtype=np.int64)
        self.pod = np.full(n, -1, dtype=np.int32)
        self.span = np.ones(n, dtype=np.int32)
        self.x_bank = np.full(n, -1, dtype=np.int32)
        self.w_bank = np.full(n, -1, dtype=np.int32)  # -1: weights reused in place
        self.pin_bank = np.full(n, -1, dtype=np.int32)
        self.pin_src = np.full(n, -1, dtype=np.int64)
        self.pout_bank = np.full(n, -1, dtype=np.int32)
        arrs = tg.op_arrays()
        self.m = arrs["m"].astype(np.int32)
        self.n = arrs["n"].astype(np.int32)
        self.p = arrs["p"].astype(np.int32)
        self.x_key = arrs["x_key"]
        self.w_key = arrs["w_key"]
        self.group = arrs["group"]
        self.layer = arrs["layer"].astype(np.int32)
        self.w_from_dram = np.array([lt.g.w_input is None for lt in tg.layers], dtype=bool)
        self.x_from_dram = np.array([all(e.source == "input" for e in lt.g.inputs) for lt in tg.layers], dtype=bool)
        # post-processor items
        self.pp_slice: List[int] = []
        self.pp_kind: List[int] = []
        self.pp_group: List[int] = []
        self.pp_a: List[int] = []
        self.pp_b: List[int] = []
        self.pp_unit: List[int] = []
        self.pp_bank: List[int] = []
        # per group: slice of the activation item
        self.finalize = np.full(tg.n_groups, -1, dtype=np.int64)
        # per x-tile: slice at which its producers are all finalized (-1: from DRAM)
        self.x_ready = np.full(tg.n_x, -1, dtype=np.int64)
        self.w_ready = np.full(tg.n_w, -1, dtype=np.int64)

    # ------------------------------------------------------------------
    @property
    def n_pp_items(self) -> int:
        return len(self.pp_slice)

    @property
    def n_adds(self) -> int:
        return sum(1 for k in self.pp_kind if k == PP_ADD)

    @property
    def n_chained(self) -> int:
        return int(np.count_nonzero(self.pin_src >= 0))

    @property
    def n_slices(self) -> int:
        last = -1
        if self.n_ops:
            last = int((self.slice + self.span - 1).max())
        if self.pp_slice:
            last = max(last, max(self.pp_slice))
        return last + 1

    @property
    def slice_cycles(self) -> int:
        return self.pods.rows

    def pp_arrays(self) -> Dict[str, np.ndarray]:
        return {
            "slice": np.asarray(self.pp_slice, dtype=np.int64),
            "kind": np.asarray(self.pp_kind, dtype=np.int8),
            "group": np.asarray(self.pp_group, dtype=np.int64),
            "a": np.asarray(self.pp_a, dtype=np.int64),
            "b": np.asarray(self.pp_b, dtype=np.int64),
            "unit": np.asarray(self.pp_unit, dtype=np.int32),
            "bank": np.asarray(self.pp_bank, dtype=np.int32),
        }

    def partial_ready(self) -> np.ndarray:
        """Slice in which each partial becomes complete (ops then adds)."""
        ends = self.slice + self.span - 1
        adds = [s for s, k in zip(self.pp_slice, self.pp_kind) if k == PP_ADD]
        return np.concatenate([ends, np.asarray(adds, dtype=np.int64)])

    def occupancy(self) -> np.ndarray:
        """Boolean pod x slice busy matrix."""
        S = self.n_slices
        occ = np.zeros((self.pods.pods, max(S, 0)), dtype=bool)
        for t in range(self.n_ops):
            s0 = int(self.slice[t])
            occ[int(self.pod[t]), s0 : s0 + int(self.span[t])] = True
        return occ

    # ------------------------------------------------------------------
    def to_json(self) -> dict:
        """Slice-major dump with one entry per pod assignment and post-processor item."""
        S = self.n_slices
        slices = [{"pods": [], "post": []} for _ in range(S)]
        layers = self.tg.layers
        for t in np.argsort(self.slice, kind="stable"):
            t = int(t)
            lt = layers[int(self.layer[t])]
            b, i, k, j = lt.decode(t - lt.op_offset)
            entry = {
                "pod": int(self.pod[t]),
                "tile": t,
                "layer": lt.layer_id,
                "index": [b, i, j, k],
                "dims": [int(self.m[t]), int(self.n[t]), int(self.p[t])],
                "span": int(self.span[t]),
                "banks": {
                    "x": int(self.x_bank[t]),
                    "w": None if self.w_bank[t] < 0 else int(self.w_bank[t]),
                    "pin": None if self.pin_bank[t] < 0 else int(self.pin_bank[t]),
                    "pout": int(self.pout_bank[t]),
                },
                "psum_from": None if self.pin_src[t] < 0 else int(self.pin_src[t]),
            }
            slices[int(self.slice[t])]["pods"].append(entry)
        for a in range(self.n_pp_items):
            item = {
                "seq": a,
                "kind": "add" if self.pp_kind[a] == PP_ADD else "act",
                "group": int(self.pp_group[a]),
                "inputs": [int(self.pp_a[a])] + ([int(self.pp_b[a])] if self.pp_b[a] >= 0 else []),
                "units": [self.pp_unit[a], self.pp_unit[a] + 1] if self.pp_kind[a] == PP_ADD else [self.pp_unit[a]],
                "bank": int(self.pp_bank[a]),
            }
            slices[self.pp_slice[a]]["post"].append(item)
        planes = route_planes(self)
        for s, by_net in planes.items():
            for entry in slices[s]["pods"]:
                routes = {}
                for net, src in (
                    ("x", entry["banks"]["x"]),
                    ("w", entry["banks"]["w"]),
                    ("pin", entry["banks"]["pin"]),
                    ("pout", entry["pod"]),
                ):
                    if src is not None:
                        routes[net] = by_net[net].get(src, 0)
                entry["routes"] = routes
        return {
            "model": self.tg.model.name,
            "config": {
                "pods": self.pods.pods,
                "rows": self.pods.rows,
                "cols": self.pods.cols,
                "U": self.pods.U,
                "V": self.pods.V,
                "banks": self.n_banks,
                "topology": self.nets.topology,
                "ports": self.nets.ports,
                "expansion": self.nets.expansion,
                "k_part": self.tg.k_part,
            },
            "slice_cycles": self.slice_cycles,
            "n_tile_ops": self.n_ops,
            "x_ready": self.x_ready.tolist(),
            "w_ready": self.w_ready.tolist(),
            "slices": slices,
        }

    @classmethod
    def from_json(cls, data: dict, tg: TileGraph) -> "Schedule":
        """Rebuild a schedule from its dump; ``tg`` must be the tiled model it was made for."""
        cfg = data["config"]
        if data["n_tile_ops"] != tg.n_ops:
            raise ValueError(f"dump has {data['n_tile_ops']} tile ops, tile graph has {tg.n_ops}")
        pods = PodConfig(pods=cfg["pods"], rows=cfg["rows"], cols=cfg["cols"], U=cfg["U"], V=cfg["V"])
        nets = InterconnectConfig(cfg["topology"], cfg["ports"], cfg["expansion"])
        s = cls(tg, pods, cfg["banks"], nets)
        for l, sl in enumerate(data["slices"]):
            for e in sl["pods"]:
                t = e["tile"]
                b = e["banks"]
                s.slice[t] = l
                s.pod[t] = e["pod"]
                s.span[t] = e["span"]
                s.x_bank[t] = b["x"]
                s.w_bank[t] = -1 if b["w"] is None else b["w"]
                s.pin_bank[t] = -1 if b["pin"] is None else b["pin"]
                s.pout_bank[t] = b["pout"]
                s.pin_src[t] = -1 if e["psum_from"] is None else e["psum_from"]
        # add partials are numbered in creation order, not slice order
        items = sorted(((item["seq"], l, item) for l, sl in enumerate(data["slices"]) for item in sl["post"]), key=lambda x: x[0])
        for _, l, item in items:
            kind = PP_ADD if item["kind"] == "add" else PP_ACT
            ins = item["inputs"]
            s.pp_slice.append(l)
            s.pp_kind.append(kind)
            s.pp_group.append(item["group"])
            s.pp_a.append(ins[0])
            s.pp_b.append(ins[1] if len(ins) > 1 else -1)
            s.pp_unit.append(item["units"][0])
            s.pp_bank.append(item["bank"])
            if kind == PP_ACT:
                s.finalize[item["group"]] = l
        s.x_ready = np.asarray(data["x_ready"], dtype=np.int64)
        s.w_ready = np.asarray(data["w_ready"], dtype=np.int64)
        if tg.n_ops and (s.slice < 0).any():
            raise ValueError("dump leaves some tile ops unplaced")
        return s

    @classmethod
    def load(cls, path, tg: TileGraph) -> "Schedule":
        with open(path) as fh:
            return cls.from_json(json.load(fh), tg)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, separators=(",", ":"))


# --------------------------------------------------------------------------
# per-slice demand sets (shared by the validator and the JSON dump)


def slice_demands(s: Schedule):
    """Yield (slice, {net: {src: {(dst, tile)}}}) for every slice with pod work."""
    per: Dict[int, List[Dict[int, set]]] = {}
    for t in range(s.n_ops):
        s0 = int(s.slice[t])
        pod = int(s.pod[t])
        for d in range(int(s.span[t])):
            nets = per.setdefault(s0 + d, [dict(), dict(), dict(), dict()])
            nets[X_NET].setdefault(int(s.x_bank[t]), set()).add((pod, ("x", int(s.x_key[t]))))
            if d == 0 and s.w_bank[t] >= 0:
                nets[W_NET].setdefault(int(s.w_bank[t]), set()).add((pod, ("w", int(s.w_key[t]))))
            if s.pin_bank[t] >= 0:
                nets[PIN_NET].setdefault(int(s.pin_bank[t]), set()).add((pod, ("p", int(s.pin_src[t]))))
            nets[POUT_NET].setdefault(pod, set()).add((int(s.pout_bank[t]), ("o", t)))
    for sl in sorted(per):
        yield sl, per[sl]


def route_planes(s: Schedule) -> Dict[int, Dict[str, Dict[int, int]]]:
    out: Dict[int, Dict[str, Dict[int, int]]] = {}
    for sl, nets in slice_demands(s):
        by = {}
        for ni, name in enumerate(NET_NAMES):
            pairs = {src: {d for d, _ in v} for src, v in nets[ni].items()}
            try:
                res = route(s.nets, RoutingProblem.build(pairs))
                by[name] = res.planes if res.feasible else {}
            except ValueError:
                by[name] = {}
        out[sl] = by
    return out


# --------------------------------------------------------------------------
# post-processors


class PostProcessorPool:
    """Occupancy of post-processor pairs per slice.

    Units are numbered 0..2*pairs-1; pair q owns units 2q and 2q+1. Adds take
    a whole pair, activation items take one unit.
    """

    def __init__(self, n_units: int):
        self.pairs = max(1, n_units // 2)
        self.state: Dict[int, bytearray] = {}
        self.free_pairs: Dict[int, int] = {}
        self.half_pairs: Dict[int, int] = {}
        self._next_pair: Dict[int, int] = {}
        self._next_unit: Dict[int, int] = {}

    def _st(self, l: int) -> bytearray:
        st = self.state.get(l)
        if st is None:
            st = bytearray(self.pairs)
            self.state[l] = st
            self.free_pairs[l] = self.pairs
            self.half_pairs[l] = 0
        return st

    @staticmethod
    def _find(nxt: Dict[int, int], l: int) -> int:
        root = l
        while root in nxt:
            root = nxt[root]
        while l in nxt and nxt[l] != root:
            nxt[l], l = root, nxt[l]
        return root

    def add(self, earliest: int) -> Tuple[int, int]:
        """Reserve a free pair at the earliest slice >= ``earliest``: (slice, first unit)."""
        l = self._find(self._next_pair, earliest)
        st = self._st(l)
        q = st.index(0)
        st[q] = 2
        self.free_pairs[l] -= 1
        if self.free_pairs[l] == 0:
            self._next_pair[l] = l + 1
            if self.half_pairs[l] == 0:
                self._next_unit[l] = l + 1
        return l, 2 * q

    def act(self, earliest: int) -> Tuple[int, int]:
        """Reserve one unit at the earliest slice >= ``earliest``: (slice, unit)."""
        l = self._find(self._next_unit, earliest)
        st = self._st(l)
        if self.half_pairs[l]:
            q = st.index(1)
            st[q] = 2
            self.half_pairs[l] -= 1
            unit = 2 * q + 1
        else:
            q = st.index(0)
            st[q] = 1
            self.free_pairs[l] -= 1
            self.half_pairs[l] += 1
            unit = 2 * q
            if self.free_pairs[l] == 0:
                self._next_pair[l] = l + 1
        if self.free_pairs[l] == 0 and self.half_pairs[l] == 0:
            self._next_unit[l] = l + 1
        return l, unit


def map_aggregations(
    segments: Sequence[Tuple[int, int, int]],
    pool: PostProcessorPool,
    schedule: Optional[Schedule] = None,
    group: int = -1,
) -> Tuple[int, List[Tuple[int, int, int, int, int]]]:
    """Reduce a group's segment outputs on post-processor pairs, then activate.

    ``segments`` holds (ready slice, partial id, bank) of each chain tail.
    Pairs are combined greedily, earliest-ready first, as a binary tree. Returns
    the activation slice and the list of adds as (slice, a, b, unit, bank).
    When ``schedule`` is given the items are recorded there.
    """
    import heapq

    heap = list(segments)
    heapq.heapify(heap)
    adds = []
    next_id = schedule.n_ops + schedule.n_adds_counter if schedule is not None else -1
    while len(heap) > 1:
        ra, pa, ba = heapq.heappop(heap)
        rb, pb, bb = heapq.heappop(heap)
        sl, unit = pool.add(max(ra, rb) + 1)
        if schedule is not None:
            pid = schedule.n_ops + schedule.n_adds_counter
            schedule.n_adds_counter += 1
            schedule.pp_slice.append(sl)
            schedule.pp_kind.append(PP_ADD)
            schedule.pp_group.append(group)
            schedule.pp_a.append(pa)
            schedule.pp_b.append(pb)
            schedule.pp_unit.append(unit)
            schedule.pp_bank.append(ba)
        else:
            pid = next_id
            next_id -= 1
        adds.append((sl, pa, pb, unit, ba))
        heapq.heappush(heap, (sl, pid, ba))
    r_last, p_last, b_last = heap[0]
    sl, unit = pool.act(r_last + 1)
    if schedule is not None:
        schedule.pp_slice.append(sl)
        schedule.pp_kind.append(PP_ACT)
        schedule.pp_group.append(group)
        schedule.pp_a.append(p_last)
        schedule.pp_b.append(-1)
        schedule.pp_unit.append(unit)
        schedule.pp_bank.append(b_last)
    return sl, adds


# --------------------------------------------------------------------------
# slice state


class _Slice:
    __slots__ = ("busy", "nets", "pods_of_w")

    def __init__(self, nets: List[SliceNetwork]):
        self.busy = 0
        self.nets = nets
        self.pods_of_w: Dict[int, List[int]] = {}  # w-tile -> pods holding it at slice end


class Scheduler:
    """Greedy earliest-slice list scheduler (one instance per schedule call)."""

    def __init__(
        self,
        tg: TileGraph,
        pods: PodConfig,
        n_banks: int,
        nets: InterconnectConfig,
        options: Optional[SchedulerOptions] = None,
    ):
        if pods.pods < 1:
            raise ValueError("scheduling needs at least one pod")
        if n_banks != pods.pods:
            raise ValueError("the bank count must equal the pod count")
        if nets.ports != pods.pods:
            nets = nets.with_ports(pods.pods)
        self.tg = tg
        self.P = pods.pods
        self.B = n_banks
        self.nets_cfg = nets
        self.opt = options or SchedulerOptions()
        self.sched = Schedule(tg, pods, n_banks, nets)
        self.sched.n_adds_counter = 0
        self.full_mask = (1 << self.P) - 1
        self.slices: Dict[int, _Slice] = {}
        self._skip: Dict[int, int] = {}  # full slices point forward
        self._held: Dict[int, Dict[int, List[int]]] = {}  # pods_of_w of dropped slices
        self.frontier = 0
        self.floor = 0
        self._min_live = 0
        self.pp = PostProcessorPool(max(self.P, 2))
        self.bank_step = max(1, int(self.B * _BANK_STRIDE_FRACTION)) | 1
        self.F: List[Optional[np.ndarray]] = [None] * len(tg.layers)
        # open slices hold routing state for every pod, so bound their total size
        self.window = self.opt.window or max(64, min(4096, 131072 // self.P))

    # ------------------------------------------------------------------
    def _find(self, l: int) -> int:
        nxt = self._skip
        root = l
        while root in nxt:
            root = nxt[root]
        while l in nxt and nxt[l] != root:
            nxt[l], l = root, nxt[l]
        return root

    def _slice(self, l: int) -> _Slice:
        st = self.slices.get(l)
        if st is None:
            cfg = self.nets_cfg
            budget = self.opt.route_budget
            st = _Slice([SliceNetwork(cfg, budget) for _ in range(4)])
            self.slices[l] = st
            if l > self.frontier:
                self.frontier = l
                new_floor = l - self.window
                if new_floor > self.floor:
                    self._advance_floor(new_floor)
        return st

    def _advance_floor(self, new_floor: int) -> None:
        for l in range(self._min_live, new_floor):
            self.slices.pop(l, None)
            self._held.pop(l, None)
            self._skip[l] = l + 1
        self._min_live = max(self._min_live, new_floor)
        self.floor = new_floor

    def _mark_full(self, l: int) -> None:
        self._skip[l] = l + 1
        st = self.slices.pop(l, None)
        if st is not None and st.pods_of_w and l >= self.floor:
            self._held[l] = st.pods_of_w

    # ------------------------------------------------------------------
    def x_bank(self, lt: LayerTiling, bi: int, j: int) -> int:
        return (lt.index * 7 + j + self.bank_step * bi) % self.B

    def w_bank(self, lt: LayerTiling, wb: int, j: int, k: int) -> int:
        return (lt.index * 13 + j + self.bank_step * (k + lt.K * wb)) % self.B

    # ------------------------------------------------------------------
    def run(self) -> Schedule:
        for lt in self.tg.layers:
            self._schedule_layer(lt)
        s = self.sched
        del s.n_adds_counter
        return s

    def _x_avail(self, lt: LayerTiling) -> np.ndarray:
        """Earliest slice per x-tile (instance-major, then i, then j)."""
        avail = np.zeros(lt.B * lt.I * lt.J, dtype=np.int64)
        ready = np.full(lt.B * lt.I * lt.J, -1, dtype=np.int64)
        view = ready.reshape(lt.B * lt.I, lt.J)
        for em in self.tg.x_dependencies(lt):
            F = self.F[em.producer]
            cache: Dict[Tuple[int, int], np.ndarray] = {}
            for j, ranges in enumerate(em.k_ranges):
                for k0, k1 in ranges:
                    key = (k0, k1)
                    if key not in cache:
                        col = F[:, k0 : k1 + 1].max(axis=1)
                        cache[key] = range_max(col, em.q_lo, em.q_hi)
                    np.maximum(view[:, j], cache[key], out=view[:, j])
        np.maximum(avail, ready + 1, out=avail)
        self.sched.x_ready[lt.x_offset : lt.x_offset + lt.n_x] = ready
        return avail

    def _w_avail(self, lt: LayerTiling) -> Optional[np.ndarray]:
        wm = self.tg.w_dependencies(lt)
        if wm is None:
            return None
        F = self.F[wm.producer]
        ready = np.full((lt.B, lt.J, lt.K), -1, dtype=np.int64)
        cols = [F[:, k0 : k1 + 1].max(axis=1) for k0, k1 in wm.k_ranges]
        for b in range(lt.B):
            for ci, col in enumerate(cols):
                rm = range_max(col, wm.q_lo[b], wm.q_hi[b])
                if wm.transpose:  # producer rows index k, columns index j
                    ready[b, ci, :] = np.maximum(ready[b, ci, :], rm)
                else:  # producer rows index j, columns index k
                    ready[b, :, ci] = np.maximum(ready[b, :, ci], rm)
        self.sched.w_ready[lt.w_offset : lt.w_offset + lt.n_w] = ready.reshape(-1)
        return ready + 1

    def _max_segments(self, lt: LayerTiling) -> int:
        if self.opt.max_segments is not None:
            return max(1, self.opt.max_segments)
        return max(1, math.ceil(self.opt.segment_factor * self.P / lt.n_groups))

    def _schedule_layer(self, lt: LayerTiling) -> None:
        s = self.sched
        xav = self._x_avail(lt).tolist()
        wav = self._w_avail(lt)
        F = np.zeros((lt.B * lt.I, lt.K), dtype=np.int64)
        max_seg = self._max_segments(lt)
        r = self.tg.r
        J, K = lt.J, lt.K
        op = lt.op_offset
        for bi in range(lt.B * lt.I):
            b, i = divmod(bi, lt.I)
            m = lt.m_of(i)
            span = cdiv(m, r)
            xbanks = [self.x_bank(lt, bi, j) for j in range(J)]
            for k in range(K):
                tails: List[List[int]] = []  # [end slice, partial id, bank]
                n_seg = 0
                wb = b if lt.w_instanced else 0
                for j in range(J):
                    l0 = xav[bi * J + j]
                    if wav is not None:
                        l0 = max(l0, int(wav[b, j, k]))
                    x_key = lt.x_offset + bi * J + j
                    w_key = lt.w_offset + (wb * J + j) * K + k
                    n_seg = self._place(
                        op, l0, span, x_key, xbanks[j], w_key, self.w_bank(lt, wb, j, k), tails, n_seg, max_seg
                    )
                    op += 1
                group = lt.group_offset + bi * K + k
                segs = [(t[0], t[1], t[2]) for t in tails]
                fin, _ = map_aggregations(segs, self.pp, s, group)
                F[bi, k] = fin
                s.finalize[group] = fin
        self.F[lt.index] = F

    # ------------------------------------------------------------------
    def _place(self, op, l0, span, x_key, xb, w_key, wb, tails, n_seg, max_seg) -> int:
        s = self.sched
        P, B = self.P, self.B
        full = self.full_mask
        reuse_ok = self.opt.weight_reuse
        cap = self.opt.combo_cap
        slack = self.opt.chain_slack
        l = max(l0, self.floor)
        while True:
            l = self._find(l)
            # chaining candidate: the earliest-finished tail that ends before l
            chain = None
            for t in tails:
                if t[0] < l and (chain is None or t[0] < chain[0] or (t[0] == chain[0] and t[1] < chain[1])):
                    chain = t
            may_open = not tails or (n_seg < max_seg and min(t[0] for t in tails) >= l + slack)
            if chain is None and not may_open:
                l = min(t[0] for t in tails) + 1
                continue
            modes = []
            if chain is not None:
                modes.append(chain)
            if may_open:
                modes.append(None)
            placed = False
            for mode in modes:
                res = self._try_slice(op, l, span, x_key, xb, w_key, wb, mode, reuse_ok, cap)
                if res is not None:
                    pod, pout, used_w = res
                    s.slice[op] = l
                    s.pod[op] = pod
                    s.span[op] = span
                    s.x_bank[op] = xb
                    s.w_bank[op] = wb if used_w else -1
                    s.pout_bank[op] = pout
                    end = l + span - 1
                    if mode is not None:
                        s.pin_bank[op] = mode[2]
                        s.pin_src[op] = mode[1]
                        mode[0], mode[1], mode[2] = end, op, pout
                    else:
                        tails.append([end, op, pout])
                        n_seg += 1
                    placed = True
                    break
            if placed:
                return n_seg
            l += 1

    def _try_slice(self, op, l, span, x_key, xb, w_key, wb, chain, reuse_ok, cap):
        """Find (pod, pout bank, weights loaded) for ``op`` at slices l..l+span-1."""
        for d in range(1, span):
            if l + d in self._skip:  # full or retired slice inside the span
                return None
        sts = [self._slice(l + d) for d in range(span)]
        busy = 0
        for st in sts:
            busy |= st.busy
        free = ~busy & self.full_mask
        if not free:
            if span == 1:
                self._mark_full(l)
            return None
        for st in sts:
            if st.nets[X_NET].source_busy(xb, x_key):
                return None
        pin_b = pin_tile = -1
        if chain is not None:
            pin_b, pin_tile = chain[2], chain[1]
            for st in sts:
                if st.nets[PIN_NET].source_busy(pin_b, pin_tile):
                    return None
        w_bank_busy = sts[0].nets[W_NET].source_busy(wb, w_key)
        held = None
        if reuse_ok:
            prev = self.slices.get(l - 1)
            held = prev.pods_of_w if prev is not None else self._held.get(l - 1)
        holders = ()
        if held:
            holders = [q for q in held.get(w_key, ()) if (free >> q) & 1]
        if w_bank_busy:
            if not holders:
                return None
            order = holders
        else:
            # rotate the first pod tried so long-lived partial sums spread over all banks
            order = _pods_in_order(holders, free, (op * self.bank_step) % self.P, self.P)
        combos = 0
        B = self.B
        for q in order:
            reuse = q in holders
            plans = []
            ok = True
            for d, st in enumerate(sts):
                nets = st.nets
                px = nets[X_NET].probe(xb, q, x_key)
                if px is None:
                    ok = False
                    break
                plans.append((nets[X_NET], px))
                if d == 0 and not reuse:
                    pw = nets[W_NET].probe(wb, q, w_key)
                    if pw is None:
                        ok = False
                        break
                    plans.append((nets[W_NET], pw))
                if chain is not None:
                    pp = nets[PIN_NET].probe(pin_b, q, pin_tile)
                    if pp is None:
                        ok = False
                        break
                    plans.append((nets[PIN_NET], pp))
            combos += 1
            if not ok:
                if combos >= cap:
                    return None
                continue
            # output bank: co-indexed with the pod, round-robin on conflict
            for t in range(B):
                bank = (q + t) % B
                combos += 1
                po_plans = []
                for st in sts:
                    po = st.nets[POUT_NET].probe(q, bank, op)
                    if po is None:
                        break
                    po_plans.append((st.nets[POUT_NET], po))
                else:
                    for net, plan in plans:
                        net.commit(plan)
                    for net, plan in po_plans:
                        net.commit(plan)
                    sts[-1].pods_of_w.setdefault(w_key, []).append(q)
                    for d, st in enumerate(sts):
                        st.busy |= 1 << q
                        if st.busy == self.full_mask:
                            self._mark_full(l + d)
                    return q, bank, not reuse
                if combos >= cap:
                    return None
            if combos >= cap:
                return None
        return None


def _pods_in_order(first: Sequence[int], free: int, start: int, n_pods: int):
    """Pods in ``first``, then the remaining free pods in id order from ``start``, wrapping."""
    yield from first
    f = free
    for q in first:
        f &= ~(1 << q)
    full = (1 << n_pods) - 1
    f = ((f >> start) | (f << (n_pods - start))) & full
    while f:
        low = f & -f
        yield (low.bit_length() - 1 + start) % n_pods
        f ^= low


def schedule(
    tg: TileGraph,
    pods: PodConfig,
    banks: Optional[int] = None,
    nets: Optional[InterconnectConfig] = None,
    options: Optional[SchedulerOptions] = None,
) -> Schedule:
    """Place every tile op of ``tg``; see the module docstring for the rules."""
    n_banks = pods.pods if banks is None else banks
    nets = nets or InterconnectConfig("butterfly", pods.pods, 2)
    return Scheduler(tg, pods, n_banks, nets, options).run()


# --------------------------------------------------------------------------
# independent checker


def validate(
    s: Schedule,
    tg: Optional[TileGraph] = None,
    nets: Optional[InterconnectConfig] = None,
    max_violations: int = 100,
) -> List[str]:
    """Re-check a schedule from its arrays alone; returns violation messages.

    Dependence sources are recomputed from the tile graph, routing is redone
    from scratch with ``route``, and post-processor capacity is recounted.
    """
    tg = tg or s.tg
    nets = nets or s.nets
    if nets.ports != s.pods.pods:
        nets = nets.with_ports(s.pods.pods)
    out: List[str] = []

    def bad(msg: str) -> bool:
        out.append(msg)
        return len(out) >= max_violations

    n = s.n_ops
    if n != tg.n_ops:
        bad(f"schedule has {n} ops, tile graph has {tg.n_ops}")
        return out
    if n and (s.slice < 0).any():
        bad(f"{int((s.slice < 0).sum())} tile ops unassigned")
        return out
    P = s.pods.pods
    if n and ((s.pod < 0) | (s.pod >= P)).any():
        bad("pod id out of range")
        return out

    # one op per pod per slice
    seen: Dict[Tuple[int, int], int] = {}
    for t in range(n):
        for d in range(int(s.span[t])):
            key = (int(s.slice[t]) + d, int(s.pod[t]))
            if key in seen:
                if bad(f"pod {key[1]} runs ops {seen[key]} and {t} in slice {key[0]}"):
                    return out
            seen[key] = t
    del seen

    # reused weights must sit on the same pod from the slice before
    held = {(int(s.pod[t]), int(s.slice[t] + s.span[t] - 1)): int(s.w_key[t]) for t in range(n)}
    for t in np.nonzero(s.w_bank < 0)[0].tolist():
        if held.get((int(s.pod[t]), int(s.slice[t]) - 1)) != int(s.w_key[t]):
            if bad(f"op {t} reuses weights its pod does not hold"):
                return out

    # dependence on producer layers
    ready = s.partial_ready()
    n_part = len(ready)
    for lt in tg.layers:
        x_maps = tg.x_dependencies(lt)
        w_map = tg.w_dependencies(lt)
        x_need: Dict[Tuple[int, int], int] = {}
        w_need: Dict[Tuple[int, int, int], int] = {}
        for local in range(lt.n_ops):
            t = lt.op_offset + local
            b, i, k, j = lt.decode(local)
            row = b * lt.I + i
            need = x_need.get((row, j))
            if need is None:
                need = max((int(s.finalize[g]) for g in _x_groups(tg, x_maps, row, j)), default=-1)
                x_need[(row, j)] = need
            if w_map is not None:
                wn = w_need.get((b, j, k))
                if wn is None:
                    wn = max((int(s.finalize[g]) for g in _w_groups(tg, w_map, b, j, k)), default=-1)
                    w_need[(b, j, k)] = wn
                need = max(need, wn)
            if int(s.slice[t]) <= need:
                if bad(f"op {t} ({lt.layer_id}) at slice {int(s.slice[t])} reads data finalized at {need}"):
                    return out

    # aggregation: every partial consumed exactly once, after it is ready
    consumed = np.zeros(n_part, dtype=np.int32)
    part_group = np.concatenate([s.group, np.asarray([g for g, k in zip(s.pp_group, s.pp_kind) if k == PP_ADD], dtype=np.int64)])
    for t in range(n):
        src = int(s.pin_src[t])
        if src < 0:
            continue
        if src >= n_part:
            bad(f"op {t} reads unknown partial {src}")
            continue
        consumed[src] += 1
        if part_group[src] != s.group[t]:
            bad(f"op {t} chains a partial of another group")
        if ready[src] >= s.slice[t]:
            if bad(f"op {t} at slice {int(s.slice[t])} chains partial {src} ready at {int(ready[src])}"):
                return out
    add_id = n
    fin_count = np.zeros(tg.n_groups, dtype=np.int32)
    units: Dict[Tuple[int, int], int] = {}
    n_units = 2 * max(1, max(P, 2) // 2)
    for a in range(s.n_pp_items):
        sl, kind, grp = s.pp_slice[a], s.pp_kind[a], s.pp_group[a]
        ins = [s.pp_a[a]] + ([s.pp_b[a]] if kind == PP_ADD else [])
        for src in ins:
            consumed[src] += 1
            if part_group[src] != grp:
                bad(f"post item {a} mixes groups")
            if ready[src] >= sl:
                bad(f"post item {a} at slice {sl} reads partial {src} ready at {int(ready[src])}")
        u = s.pp_unit[a]
        used = [u, u + 1] if kind == PP_ADD else [u]
        if kind == PP_ADD and u % 2:
            bad(f"add {a} does not start on a pair boundary")
        for uu in used:
            if not 0 <= uu < n_units:
                bad(f"post item {a} uses unit {uu} out of range")
            if (sl, uu) in units:
                bad(f"post unit {uu} used twice in slice {sl}")
            units[(sl, uu)] = a
        if kind == PP_ADD:
            if ready[add_id] != sl:
                bad(f"add {a} ready slice mismatch")
            add_id += 1
        else:
            fin_count[grp] += 1
            if s.finalize[grp] != sl:
                bad(f"group {grp} finalize slice mismatch")
    if (consumed != 1).any():
        bad_ids = np.nonzero(consumed != 1)[0][:5].tolist()
        bad(f"{int((consumed != 1).sum())} partials not consumed exactly once (e.g. {bad_ids})")
    if (fin_count != 1).any():
        bad(f"{int((fin_count != 1).sum())} groups without exactly one activation")

    # bank exclusivity and routability, per slice and network
    for sl, per_net in slice_demands(s):
        for ni, name in enumerate(NET_NAMES):
            demands = per_net[ni]
            pairs: Dict[int, set] = {}
            dst_seen: Dict[int, int] = {}
            for src, items in demands.items():
                tiles = {tile for _, tile in items}
                if len(tiles) > 1:
                    if bad(f"slice {sl}: {name} source {src} serves {len(tiles)} different tiles"):
                        return out
                for d, _ in items:
                    if d in dst_seen and dst_seen[d] != src:
                        bad(f"slice {sl}: {name} destination {d} fed by two sources")
                    dst_seen[d] = src
                pairs[src] = {d for d, _ in items}
            try:
                res = route(nets, RoutingProblem.build(pairs))
            except ValueError as exc:
                bad(f"slice {sl}: {name} malformed demand set ({exc})")
                continue
            if not res.feasible:
                if bad(f"slice {sl}: {name} network demands are not routable"):
                    return out
    return out


def _x_groups(tg: TileGraph, maps, row: int, j: int):
    """Producer group ids read by x-tile (row block ``row``, reduction block ``j``)."""
    for em in maps:
        prod = tg.layers[em.producer]
        for k0, k1 in em.k_ranges[j]:
            for q in range(int(em.q_lo[row]), int(em.q_hi[row]) + 1):
                base = prod.group_offset + q * prod.K
                yield from range(base + k0, base + k1 + 1)


def _w_groups(tg: TileGraph, wm, b: int, j: int, k: int):
    prod = tg.layers[wm.producer]
    rblk, cblk = (k, j) if wm.transpose else (j, k)
    k0, k1 = wm.k_ranges[cblk]
    for q in range(int(wm.q_lo[b, rblk]), int(wm.q_hi[b, rblk]) + 1):
        base = prod.group_offset + q * prod.K
        yield from range(base + k0, base + k1 + 1)
