"""Timing and traffic simulation of a schedule.

Timing model per slice l (all in cycles):

* Slices keep the scheduler's quantum of r cycles; pods stream the rows of
  their tile ops, so a remainder tile leaves its pod idle for the rest of the
  slice.
* Data for slice l+1 is sent over the network from the start of slice l, so
  the network latency L is hidden unless it exceeds the quantum: a slice with
  ops lasts max(r, L), plus any DRAM refetch stall. Weight loads take n <= r
  cycles and are hidden by double buffering.
* A tile op that starts at T finishes at T + rows + fill/drain, where
  fill/drain is ceil(c/U) + ceil(r/V); the drain overlaps the next op on the
  pod.
* Cycles per tile op charge each op its rows plus the part of L that its own
  rows do not cover, max(0, L - rows) per slice it occupies.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .interconnect import latency as network_latency
from .scheduler import PP_ADD, Schedule
from .tiling import PSUM_BYTES, X_BYTES

CLASS_ACTIVATION, CLASS_WEIGHT, CLASS_INPUT, CLASS_PSUM = range(4)
CLASS_NAMES = ("activation", "weight", "input", "psum")


@dataclass(frozen=True)
class BankConfig:
    banks: int
    bank_bytes: int = 262144
    port_bytes: int = 32
    policy: str = "belady"
    dram_bytes_per_cycle: float = 900.0  # 900 GB/s at 1 GHz
    dram_latency: int = 100

    def __post_init__(self) -> None:
        if self.banks < 1 or self.bank_bytes < 1:
            raise ValueError("banks and bank_bytes must be positive")
        if self.policy != "belady":
            raise ValueError(f"unknown eviction policy {self.policy!r}")


@dataclass
class ResidencyReport:
    dram_read_bytes: int = 0
    dram_write_bytes: int = 0
    compulsory_bytes: int = 0
    evictions: int = 0
    evictions_by_class: Dict[str, int] = field(default_factory=lambda: {c: 0 for c in CLASS_NAMES})
    peak_bank_bytes: int = 0
    refetch_bytes_by_slice: Dict[int, int] = field(default_factory=dict)

    @property
    def dram_bytes(self) -> int:
        return self.dram_read_bytes + self.dram_write_bytes

    @property
    def activation_evictions(self) -> int:
        return self.evictions_by_class[CLASS_NAMES[CLASS_ACTIVATION]]


@dataclass
class SimStats:
    pods: int = 0
    rows: int = 0
    cols: int = 0
    n_ops: int = 0
    n_slices: int = 0
    makespan: int = 0
    useful_macs: int = 0
    busy_pod_slices: int = 0
    op_cycles: int = 0  # sum over ops of rows + amortized exposed stall
    stall_cycles: int = 0
    sram_read_bytes: int = 0
    sram_write_bytes: int = 0
    net_bytes: Dict[str, int] = field(default_factory=lambda: {"x": 0, "w": 0, "pin": 0, "pout": 0})
    dram_bytes: int = 0
    evictions: int = 0
    activation_evictions: int = 0
    pp_element_ops: int = 0
    energy_pj: Dict[str, float] = field(default_factory=dict)

    @property
    def utilization(self) -> float:
        if self.makespan == 0:
            return 0.0
        return self.useful_macs / (self.pods * self.rows * self.cols * self.makespan)

    @property
    def busy_pod_fraction(self) -> float:
        if self.n_slices == 0:
            return 0.0
        return self.busy_pod_slices / (self.pods * self.n_slices)

    @property
    def cycles_per_tile_op(self) -> float:
        return cycles_per_tile_op(self)

    def as_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items()}
        out["utilization"] = self.utilization
        out["busy_pod_fraction"] = self.busy_pod_fraction
        out["cycles_per_tile_op"] = self.cycles_per_tile_op
        return out


def cycles_per_tile_op(stats: SimStats) -> float:
    """Mean op execution rows plus the exposed stall charged to each op."""
    return stats.op_cycles / stats.n_ops if stats.n_ops else 0.0


# --------------------------------------------------------------------------
# residency


def _objects(s: Schedule):
    """All bank-resident objects: arrays of bank, bytes, class, birth, born_dirty,
    plus (object, slice) use pairs."""
    n = s.n_ops
    ends = s.slice + s.span - 1
    tg = s.tg
    obj_bank, obj_bytes, obj_cls, obj_birth, obj_dirty = [], [], [], [], []
    use_obj, use_slice = [], []
    base = 0

    # x-tiles, one object per key, read by every op carrying that key
    keys, first = np.unique(s.x_key, return_index=True)
    pos = np.searchsorted(keys, s.x_key)
    lay = s.layer[first]
    x_bytes = (s.m[first].astype(np.int64) * s.n[first]) * X_BYTES
    from_dram = s.x_from_dram[lay]
    ready = s.x_ready[keys]
    first_use = np.full(len(keys), np.iinfo(np.int64).max)
    np.minimum.at(first_use, pos, s.slice)
    births = np.where(from_dram | (ready < 0), first_use, ready)
    obj_bank.append(s.x_bank[first])
    obj_bytes.append(x_bytes)
    obj_cls.append(np.where(from_dram, CLASS_INPUT, CLASS_ACTIVATION))
    obj_birth.append(births)
    obj_dirty.append(~from_dram & (ready >= 0))
    # an op spanning several slices streams its x-tile throughout
    for d in range(int(s.span.max()) if n else 0):
        sel = s.span > d
        use_obj.append(base + pos[sel])
        use_slice.append(s.slice[sel] + d)
    base += len(keys)

    # w-tiles, read by the ops that load them
    loaded = s.w_bank >= 0
    wk = s.w_key[loaded]
    keys, first_l = np.unique(wk, return_index=True)
    idx = np.nonzero(loaded)[0]
    first = idx[first_l]
    pos = np.searchsorted(keys, wk)
    lay = s.layer[first]
    produced = ~s.w_from_dram[lay]
    wready = s.w_ready[keys]
    first_use = np.full(len(keys), np.iinfo(np.int64).max)
    np.minimum.at(first_use, pos, s.slice[loaded])
    obj_bank.append(s.w_bank[first])
    obj_bytes.append(s.n[first].astype(np.int64) * s.p[first])
    obj_cls.append(np.where(produced, CLASS_ACTIVATION, CLASS_WEIGHT))
    obj_birth.append(np.where(produced & (wready >= 0), wready, first_use))
    obj_dirty.append(produced & (wready >= 0))
    use_obj.append(base + pos)
    use_slice.append(s.slice[loaded])
    base += len(keys)

    # partial sums: op outputs then add results
    pp = s.pp_arrays()
    is_add = pp["kind"] == PP_ADD
    n_add = int(is_add.sum())
    part_m = np.concatenate([s.m, np.zeros(n_add, dtype=np.int32)]).astype(np.int64)
    part_p = np.concatenate([s.p, np.zeros(n_add, dtype=np.int32)]).astype(np.int64)
    add_a = pp["a"][is_add]
    for q, a in enumerate(add_a.tolist()):
        part_m[n + q] = part_m[a]
        part_p[n + q] = part_p[a]
    part_bank = np.concatenate([s.pout_bank, pp["bank"][is_add]])
    part_birth = np.concatenate([ends, pp["slice"][is_add]])
    obj_bank.append(part_bank)
    obj_bytes.append(part_m * part_p * PSUM_BYTES)
    obj_cls.append(np.full(len(part_bank), CLASS_PSUM))
    obj_birth.append(part_birth)
    obj_dirty.append(np.ones(len(part_bank), dtype=bool))
    chained = s.pin_src >= 0
    for d in range(int(s.span.max()) if n else 0):
        sel = chained & (s.span > d)
        use_obj.append(base + s.pin_src[sel])
        use_slice.append(s.slice[sel] + d)
    use_obj.append(base + pp["a"])
    use_slice.append(pp["slice"])
    has_b = pp["b"] >= 0
    use_obj.append(base + pp["b"][has_b])
    use_slice.append(pp["slice"][has_b])

    cat = lambda xs, dt: np.concatenate([np.asarray(x, dtype=dt) for x in xs]) if xs else np.zeros(0, dt)
    return (
        cat(obj_bank, np.int64),
        cat(obj_bytes, np.int64),
        cat(obj_cls, np.int64),
        cat(obj_birth, np.int64),
        cat(obj_dirty, bool),
        cat(use_obj, np.int64),
        cat(use_slice, np.int64),
        part_m,
        part_p,
    )


def bank_residency(s: Schedule, banks: BankConfig) -> ResidencyReport:
    """Replay bank contents over the schedule with optimal (farthest next use) eviction.

    Objects live from their birth (write, or DRAM fetch at first use) to their
    last read. Weights and model inputs are fetched from DRAM once; an
    evicted dirty object is written back and refetched at its next use.
    """
    rep = ResidencyReport()
    if s.n_ops == 0:
        return rep
    bank, size, cls, birth, dirty, use_obj, use_sl, _, _ = _objects(s)
    n_obj = len(bank)
    last = np.full(n_obj, -1, dtype=np.int64)
    np.maximum.at(last, use_obj, use_sl)
    last = np.maximum(last, birth)
    rep.compulsory_bytes = int(size[(cls == CLASS_WEIGHT) | (cls == CLASS_INPUT)].sum())
    rep.dram_read_bytes = rep.compulsory_bytes

    # live bytes per bank over slices via a difference array
    S = int(last.max()) + 2
    B = banks.banks
    diff = np.zeros((B, S + 1), dtype=np.int64)
    np.add.at(diff, (bank, birth), size)
    np.add.at(diff, (bank, last + 1), -size)
    live = np.cumsum(diff, axis=1)
    peak = live.max(axis=1)
    rep.peak_bank_bytes = int(peak.max())
    over = np.nonzero(peak > banks.bank_bytes)[0]
    if len(over) == 0:
        return rep

    order = np.lexsort((use_sl, use_obj))
    use_obj, use_sl = use_obj[order], use_sl[order]
    starts = np.searchsorted(use_obj, np.arange(n_obj + 1))
    for b in over.tolist():
        objs = np.nonzero(bank == b)[0]
        _belady_bank(objs, size, cls, birth, dirty, use_sl, starts, banks.bank_bytes, rep)
    return rep


def _belady_bank(objs, size, cls, birth, dirty, use_sl, starts, capacity, rep: ResidencyReport) -> None:
    """Farthest-next-use replacement with bypass within one bank.

    Per slice, objects fetched from DRAM appear first, then reads happen,
    then objects written during the slice appear. When an incoming object is
    itself the one used farthest in the future it bypasses the bank.
    """
    events: List[Tuple[int, int, int]] = []  # (slice, phase, obj)
    for o in objs.tolist():
        events.append((int(birth[o]), -1 if not dirty[o] else 1, o))
        for t in use_sl[starts[o] : starts[o + 1]].tolist():
            events.append((t, 0, o))
    events.sort()
    cursor: Dict[int, int] = {}
    resident: Dict[int, int] = {}  # obj -> next use
    heap: List[Tuple[int, int]] = []  # (-next use, obj), lazily invalidated
    used = 0
    spilled = set()
    INF = 1 << 62

    def next_use(o: int) -> int:
        k = cursor.get(o, starts[o])
        return int(use_sl[k]) if k < starts[o + 1] else INF

    def evict(v: int) -> None:
        nonlocal used
        del resident[v]
        used -= int(size[v])
        rep.evictions += 1
        rep.evictions_by_class[CLASS_NAMES[int(cls[v])]] += 1
        if dirty[v] and v not in spilled:
            rep.dram_write_bytes += int(size[v])
            spilled.add(v)

    def insert(o: int, nu: int) -> None:
        nonlocal used
        need = int(size[o])
        while used + need > capacity:
            while heap and resident.get(heap[0][1]) != -heap[0][0]:
                heapq.heappop(heap)
            if not heap or -heap[0][0] <= nu:
                # the incoming object is the farthest: bypass it
                rep.evictions += 1
                rep.evictions_by_class[CLASS_NAMES[int(cls[o])]] += 1
                if dirty[o] and o not in spilled:
                    rep.dram_write_bytes += need
                    spilled.add(o)
                return
            evict(heapq.heappop(heap)[1])
        resident[o] = nu
        used += need
        heapq.heappush(heap, (-nu, o))

    for t, phase, o in events:
        if phase != 0:
            nu = next_use(o)
            if nu < INF:
                insert(o, nu)
            continue
        k = cursor.get(o, starts[o])
        cursor[o] = k + 1
        if o in resident:
            del resident[o]
            used -= int(size[o])
        else:
            # a refetched object lands in the bank before it is read
            while used + int(size[o]) > capacity:
                while heap and resident.get(heap[0][1]) != -heap[0][0]:
                    heapq.heappop(heap)
                if not heap:
                    break
                evict(heapq.heappop(heap)[1])
            rep.dram_read_bytes += int(size[o])
            rep.refetch_bytes_by_slice[t] = rep.refetch_bytes_by_slice.get(t, 0) + int(size[o])
        nu = next_use(o)
        if nu < INF:
            insert(o, nu)


# --------------------------------------------------------------------------
# timing


@dataclass
class OpEvent:
    op: int
    pod: int
    start: int
    compute_end: int
    finish: int


def simulate(
    s: Schedule,
    banks: Optional[BankConfig] = None,
    nets=None,
    params=None,
    trace: Optional[List[OpEvent]] = None,
) -> SimStats:
    """Execute a schedule; returns counters, timing and (with ``params``) energy."""
    pods = s.pods
    nets = nets or s.nets
    banks = banks or BankConfig(s.n_banks)
    P, r, c = pods.pods, pods.rows, pods.cols
    st = SimStats(pods=P, rows=r, cols=c, n_ops=s.n_ops)
    if s.n_ops == 0 and s.n_pp_items == 0:
        return st
    _assert_consistent(s)
    n = s.n_ops
    S = s.n_slices
    st.n_slices = S
    fd = pods.fill_drain
    L = network_latency(nets)

    m = s.m.astype(np.int64)
    nn = s.n.astype(np.int64)
    p = s.p.astype(np.int64)
    span = s.span.astype(np.int64)
    st.useful_macs = int((m * nn * p).sum())
    st.busy_pod_slices = int(span.sum())

    has_ops = np.zeros(S, dtype=bool)
    for d in range(int(span.max()) if n else 0):
        has_ops[s.slice[span > d] + d] = True
    loaded = s.w_bank >= 0
    pp = s.pp_arrays()
    is_add = pp["kind"] == PP_ADD
    part_m = np.concatenate([m, np.zeros(int(is_add.sum()), dtype=np.int64)])
    part_p = np.concatenate([p, np.zeros(int(is_add.sum()), dtype=np.int64)])
    for q, a in enumerate(pp["a"][is_add].tolist()):
        part_m[n + q] = part_m[a]
        part_p[n + q] = part_p[a]
    pp_m = part_m[pp["a"]] if len(pp["a"]) else np.zeros(0, dtype=np.int64)
    pp_p = part_p[pp["a"]] if len(pp["a"]) else np.zeros(0, dtype=np.int64)

    length = np.where(has_ops, max(r, L), r)

    # bank residency and DRAM stalls on refetches
    res = bank_residency(s, banks)
    dram_stall = np.zeros(S, dtype=np.int64)
    for t, nbytes in res.refetch_bytes_by_slice.items():
        transfer = int(np.ceil(nbytes / banks.dram_bytes_per_cycle)) + banks.dram_latency
        dram_stall[t] = max(0, transfer - int(length[t - 1])) if t > 0 else 0
    length = length + dram_stall
    T = np.zeros(S + 1, dtype=np.int64)
    T[1:] = np.cumsum(length)

    # op timing
    last_slice = s.slice + span - 1
    last_rows = m - (span - 1) * r
    start = T[s.slice]
    compute_end = T[last_slice] + last_rows
    finish = compute_end + fd
    stall_prefix = np.concatenate([[0], np.cumsum(dram_stall)])
    op_dram = stall_prefix[last_slice + 1] - stall_prefix[s.slice]
    # latency not covered by an op's own rows, per slice it occupies
    exposed = np.zeros(n, dtype=np.int64)
    for d in range(int(span.max()) if n else 0):
        rows_d = np.clip(m - d * r, 0, r)
        exposed += np.where(span > d, np.maximum(0, L - rows_d), 0)
    st.op_cycles = int((m + exposed + op_dram).sum())
    st.stall_cycles = int(max(0, L - r) * has_ops.sum() + dram_stall.sum())
    end = int(finish.max()) if n else 0
    if len(pp_m):
        end = max(end, int((T[pp["slice"]] + pp_m).max()))
    st.makespan = end
    if trace is not None:
        for t in np.argsort(start, kind="stable").tolist():
            trace.append(OpEvent(t, int(s.pod[t]), int(start[t]), int(compute_end[t]), int(finish[t])))

    # traffic counters
    x_b = m * nn * X_BYTES
    w_b = np.where(loaded, nn * p, 0)
    ps_b = m * p * PSUM_BYTES
    chained = s.pin_src >= 0
    st.net_bytes = {
        "x": int(x_b.sum()),
        "w": int(w_b.sum()),
        "pin": int(ps_b[chained].sum()),
        "pout": int(ps_b.sum()),
    }
    pp_elems = pp_m * pp_p
    pp_reads = int((np.where(is_add, 2, 1) * pp_elems * PSUM_BYTES).sum())
    pp_writes = int((np.where(is_add, pp_elems * PSUM_BYTES, pp_elems * X_BYTES)).sum())
    st.sram_read_bytes = st.net_bytes["x"] + st.net_bytes["w"] + st.net_bytes["pin"] + pp_reads
    st.sram_write_bytes = st.net_bytes["pout"] + pp_writes
    st.pp_element_ops = int(pp_elems.sum())
    st.dram_bytes = res.dram_bytes
    st.evictions = res.evictions
    st.activation_evictions = res.activation_evictions
    if params is not None:
        from .powermodel import run_energy

        st.energy_pj = run_energy(st, params, nets)
    return st


def _assert_consistent(s: Schedule) -> None:
    """Cheap structural checks; a failure means scheduler and simulator disagree."""
    n = s.n_ops
    if n == 0:
        return
    assert (s.slice >= 0).all(), "unscheduled tile op"
    occ = []
    for d in range(int(s.span.max())):
        sel = s.span > d
        occ.append((s.slice[sel] + d) * s.pods.pods + s.pod[sel])
    occ = np.concatenate(occ)
    assert len(np.unique(occ)) == len(occ), "two ops on one pod in one slice"
    sl = s.slice
    # one tile per bank per slice on the x network
    key = np.stack([sl, s.x_bank, s.x_key], axis=1)
    uniq = np.unique(key, axis=0)
    pairs = uniq[:, 0] * (s.n_banks + 1) + uniq[:, 1]
    assert len(np.unique(pairs)) == len(pairs), "x bank serves two tiles in one slice"
    loaded = s.w_bank >= 0
    if loaded.any():
        key = np.stack([sl[loaded], s.w_bank[loaded], s.w_key[loaded]], axis=1)
        uniq = np.unique(key, axis=0)
        pairs = uniq[:, 0] * (s.n_banks + 1) + uniq[:, 1]
        assert len(np.unique(pairs)) == len(pairs), "w bank serves two tiles in one slice"
    outs = sl * (s.n_banks + 1) + s.pout_bank
    assert len(np.unique(outs)) == n, "two psum writes to one bank in one slice"
    ch = s.pin_src >= 0
    if ch.any():
        src_end = (s.slice + s.span - 1)[s.pin_src[ch][s.pin_src[ch] < n]]
        own = s.slice[ch][s.pin_src[ch] < n]
        assert (src_end < own).all(), "chained psum read before it is written"
