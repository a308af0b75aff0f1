"""Design-space sweeps under a shared power budget.

Every design point is evaluated by tiling, scheduling and simulating each
benchmark, then aggregating the per-model effective throughput as a
MAC-weighted mean. Points are independent and may run in a process pool;
results are always ordered by grid index.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from .interconnect import InterconnectConfig, power_per_byte
from .powermodel import ConfigurationError, EnergyParams, peak_power, pods_for_tdp
from .scheduler import PodConfig, SchedulerOptions, schedule
from .simulator import BankConfig, simulate
from .tiling import TileGraph
from .workload import ModelGraph, load_builtin, merge_models

REDUCED_PRESET = ("resnet50_224", "densenet121_224", "bert_medium_s100", "bert_base_s100")
FULL_PRESET = (
    "inception_v3_299",
    "resnet50_299",
    "resnet101_299",
    "resnet152_299",
    "densenet121_299",
    "densenet169_299",
    "densenet201_299",
    "bert_medium_s100",
    "bert_base_s100",
    "bert_large_s100",
)
CI_POD_CAP = 64


@dataclass(frozen=True)
class DesignPoint:
    rows: int = 32
    cols: int = 32
    pods: int = 64
    topology: str = "butterfly"
    expansion: int = 2
    k_part: Optional[int] = None
    bank_bytes: int = 262144
    U: int = 16
    V: int = 16

    def pod_config(self) -> PodConfig:
        return PodConfig(pods=self.pods, rows=self.rows, cols=self.cols, U=min(self.U, self.cols), V=min(self.V, self.rows))

    def nets(self) -> InterconnectConfig:
        return InterconnectConfig(self.topology, self.pods, self.expansion)


@dataclass
class PointResult:
    model: str
    rows: int
    cols: int
    pods: int
    topology: str
    expansion: int
    k_part: int
    bank_kb: int
    macs: int
    tile_ops: int
    slices: int
    makespan: int
    utilization: float
    busy_pod_fraction: float
    cycles_per_tile_op: float
    peak_power_w: float
    peak_at_tdp: float
    effective: float
    effective_at_tdp: float
    effective_per_watt: float
    dram_bytes: int
    evictions: int
    activation_evictions: int
    energy_pj: float


def evaluate(
    model: ModelGraph,
    point: DesignPoint,
    params: Optional[EnergyParams] = None,
    options: Optional[SchedulerOptions] = None,
) -> PointResult:
    """Tile, schedule and simulate one model at one design point."""
    params = params or EnergyParams()
    pods = point.pod_config()
    nets = point.nets()
    tg = TileGraph(model, point.rows, point.cols, point.k_part)
    sched = schedule(tg, pods, pods.pods, nets, options)
    stats = simulate(sched, BankConfig(pods.pods, point.bank_bytes), nets, params)
    rep = peak_power(pods, None, nets, params)
    rep.utilization = stats.utilization
    return PointResult(
        model=model.name,
        rows=point.rows,
        cols=point.cols,
        pods=point.pods,
        topology=point.topology,
        expansion=point.expansion,
        k_part=0 if point.k_part is None else point.k_part,
        bank_kb=point.bank_bytes // 1024,
        macs=model.macs,
        tile_ops=tg.n_ops,
        slices=stats.n_slices,
        makespan=stats.makespan,
        utilization=stats.utilization,
        busy_pod_fraction=stats.busy_pod_fraction,
        cycles_per_tile_op=stats.cycles_per_tile_op,
        peak_power_w=rep.peak_power_w,
        peak_at_tdp=rep.peak_at_tdp,
        effective=rep.effective,
        effective_at_tdp=rep.effective_at_tdp,
        effective_per_watt=rep.effective_per_watt,
        dram_bytes=stats.dram_bytes,
        evictions=stats.evictions,
        activation_evictions=stats.activation_evictions,
        energy_pj=stats.energy_pj.get("total", 0.0),
    )


def _job(args) -> PointResult:
    name_or_model, point, params, options, batch = args
    model = name_or_model if isinstance(name_or_model, ModelGraph) else load_builtin(name_or_model, batch)
    return evaluate(model, point, params, options)


def run_jobs(jobs: Sequence[tuple], workers: int = 1) -> List[PointResult]:
    """Evaluate jobs (model, point, params, options, batch) in order."""
    if workers <= 1 or len(jobs) <= 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_job, jobs))


def mac_weighted(results: Sequence[PointResult], attr: str) -> float:
    total = sum(r.macs for r in results)
    if total == 0:
        return 0.0
    return sum(getattr(r, attr) * r.macs for r in results) / total


def aggregate(results: Sequence[PointResult]) -> Dict[str, float]:
    """MAC-weighted means over benchmarks, plus op-weighted busy fraction and cycles."""
    ops = sum(r.tile_ops for r in results)
    busy_num = sum(r.busy_pod_fraction * r.pods * r.slices for r in results)
    busy_den = sum(r.pods * r.slices for r in results)
    return {
        "utilization": mac_weighted(results, "utilization"),
        "effective": mac_weighted(results, "effective"),
        "effective_at_tdp": mac_weighted(results, "effective_at_tdp"),
        "effective_per_watt": mac_weighted(results, "effective_per_watt"),
        "busy_pod_fraction": busy_num / busy_den if busy_den else 0.0,
        "cycles_per_tile_op": sum(r.cycles_per_tile_op * r.tile_ops for r in results) / ops if ops else 0.0,
        "dram_bytes": float(sum(r.dram_bytes for r in results)),
    }


def _models(models: Iterable) -> List:
    return [m for m in models]


# --------------------------------------------------------------------------
# sweeps


def sweep_shape(
    grid: Sequence[Tuple[int, int]],
    models: Sequence = REDUCED_PRESET,
    tdp_w: float = 400.0,
    pod_cap: Optional[int] = CI_POD_CAP,
    topology: str = "butterfly",
    expansion: int = 2,
    params: Optional[EnergyParams] = None,
    workers: int = 1,
) -> List[dict]:
    """Effective throughput per Watt over array shapes; P chosen per TDP."""
    params = params or EnergyParams()
    rows_out = []
    jobs, index = [], []
    for gi, (r, c) in enumerate(grid):
        try:
            P = pods_for_tdp(r, c, InterconnectConfig(topology, 1, expansion), params, tdp_w)
        except ConfigurationError:
            rows_out.append({"rows": r, "cols": c, "pods": 0, "feasible": False})
            continue
        if pod_cap:
            P = min(P, pod_cap)
        point = DesignPoint(r, c, P, topology, expansion)
        for m in models:
            jobs.append((m, point, params, None, 1))
            index.append(gi)
        rows_out.append({"rows": r, "cols": c, "pods": P, "feasible": True})
    results = run_jobs(jobs, workers)
    by_point: Dict[int, List[PointResult]] = {}
    for gi, res in zip(index, results):
        by_point.setdefault(gi, []).append(res)
    for gi, row in enumerate(rows_out):
        if row["feasible"]:
            agg = aggregate(by_point[gi])
            row.update(
                peak_power_w=by_point[gi][0].peak_power_w,
                utilization=agg["utilization"],
                effective_at_tdp=agg["effective_at_tdp"],
                effective_per_watt=agg["effective_per_watt"],
            )
    return rows_out


def sweep_granularity(
    sizes: Sequence[int] = (16, 32, 64, 128, 256, 512),
    models: Sequence = REDUCED_PRESET,
    tdp_w: float = 400.0,
    pod_cap: Optional[int] = None,
    monolithic: Sequence[int] = (512,),
    topology: str = "butterfly",
    expansion: int = 2,
    params: Optional[EnergyParams] = None,
    workers: int = 1,
    per_model: Optional[List[PointResult]] = None,
) -> List[dict]:
    """Table-style rows {size, pods, peak W, peak@TDP, util, eff@TDP} per square size.

    Sizes listed in ``monolithic`` are evaluated as a single array.
    """
    params = params or EnergyParams()
    rows_out = []
    for size in sizes:
        if size in monolithic:
            P = 1
        else:
            P = pods_for_tdp(size, size, InterconnectConfig(topology, 1, expansion), params, tdp_w)
            if pod_cap:
                P = min(P, pod_cap)
        point = DesignPoint(size, size, P, topology, expansion, U=min(16, size), V=min(16, size))
        results = run_jobs([(m, point, params, None, 1) for m in models], workers)
        if per_model is not None:
            per_model.extend(results)
        agg = aggregate(results)
        rows_out.append(
            {
                "size": size,
                "pods": P,
                "peak_power_w": results[0].peak_power_w,
                "peak_at_tdp_tops": results[0].peak_at_tdp / 1e12,
                "utilization": agg["utilization"],
                "effective_at_tdp_tops": agg["effective_at_tdp"] / 1e12,
            }
        )
    return rows_out


def sweep_partition(
    k_parts: Sequence[Optional[int]],
    models: Sequence = ("resnet50_224",),
    pods: int = 64,
    rows: int = 32,
    cols: int = 32,
    topology: str = "butterfly",
    expansion: int = 2,
    params: Optional[EnergyParams] = None,
    workers: int = 1,
) -> List[dict]:
    """Effective throughput per partition length; ``0`` or None means no partitioning.

    Values are normalized to the k_part = rows point when it is in the sweep.
    """
    rows_out = []
    for kp in k_parts:
        point = DesignPoint(rows, cols, pods, topology, expansion, k_part=kp if kp else 0)
        results = run_jobs([(m, point, params, None, 1) for m in models], workers)
        for res in results:
            rows_out.append(
                {
                    "model": res.model,
                    "k_part": kp if kp else "none",
                    "tile_ops": res.tile_ops,
                    "utilization": res.utilization,
                    "effective_at_tdp_tops": res.effective_at_tdp / 1e12,
                }
            )
    base = {r["model"]: r["effective_at_tdp_tops"] for r in rows_out if r["k_part"] == rows}
    for r in rows_out:
        b = base.get(r["model"])
        r["normalized"] = r["effective_at_tdp_tops"] / b if b else float("nan")
    return rows_out


def sweep_banks(
    bank_kb: Sequence[int] = (64, 128, 256, 512, 1024),
    model: str = "resnet152_224",
    batch: int = 8,
    pods: int = 64,
    topology: str = "butterfly",
    expansion: int = 2,
    params: Optional[EnergyParams] = None,
    options: Optional[SchedulerOptions] = None,
) -> List[dict]:
    """DRAM traffic and effective throughput against bank capacity.

    The schedule does not depend on capacity, so it is computed once.
    """
    params = params or EnergyParams()
    m = load_builtin(model, batch) if isinstance(model, str) else model
    point = DesignPoint(32, 32, pods, topology, expansion)
    pods_cfg, nets = point.pod_config(), point.nets()
    tg = TileGraph(m, 32, 32)
    sched = schedule(tg, pods_cfg, pods, nets, options)
    rep = peak_power(pods_cfg, None, nets, params)
    rows_out = []
    for kb in bank_kb:
        st = simulate(sched, BankConfig(pods, kb * 1024), nets, params)
        rep.utilization = st.utilization
        rows_out.append(
            {
                "bank_kb": kb,
                "dram_bytes": st.dram_bytes,
                "evictions": st.evictions,
                "activation_evictions": st.activation_evictions,
                "utilization": st.utilization,
                "effective_at_tdp_tops": rep.effective_at_tdp / 1e12,
            }
        )
    return rows_out


def sweep_tenancy(
    model_sets: Sequence[Sequence[str]] = (("resnet152_224",), ("bert_medium_s100",), ("resnet152_224", "bert_medium_s100")),
    batches: Sequence[int] = (1,),
    pods: int = 64,
    topology: str = "butterfly",
    expansion: int = 2,
    params: Optional[EnergyParams] = None,
) -> List[dict]:
    """Sequential versus co-scheduled effective throughput.

    Sequential runs execute the models one after another, so their combined
    utilization is total MACs over the summed makespans. Co-scheduled runs
    schedule the union of the tile graphs.
    """
    params = params or EnergyParams()
    point = DesignPoint(32, 32, pods, topology, expansion)
    pods_cfg, nets = point.pod_config(), point.nets()
    rep = peak_power(pods_cfg, None, nets, params)
    solo_cache: Dict[Tuple[str, int], PointResult] = {}
    rows_out = []
    for names in model_sets:
        for batch in batches:
            solos = []
            for name in names:
                key = (name, batch)
                if key not in solo_cache:
                    solo_cache[key] = evaluate(load_builtin(name, batch), point, params)
                solos.append(solo_cache[key])
            macs = sum(r.macs for r in solos)
            seq_cycles = sum(r.makespan for r in solos)
            seq_util = macs / (pods * 32 * 32 * seq_cycles) if seq_cycles else 0.0
            if len(names) == 1:
                par_util = solos[0].utilization
            else:
                merged = merge_models([load_builtin(n, batch) for n in names])
                par_util = evaluate(merged, point, params).utilization
            rows_out.append(
                {
                    "models": "+".join(names),
                    "batch": batch,
                    "sequential_util": seq_util,
                    "parallel_util": par_util,
                    "sequential_tops": rep.peak_at_tdp * seq_util / 1e12,
                    "parallel_tops": rep.peak_at_tdp * par_util / 1e12,
                    "speedup": par_util / seq_util if seq_util else float("nan"),
                }
            )
    return rows_out


def sweep_interconnect(
    configs: Sequence[Tuple[str, int]] = (("butterfly", 1), ("butterfly", 2), ("crossbar", 1), ("benes_copy", 1)),
    models: Sequence = REDUCED_PRESET,
    pods: int = 64,
    params: Optional[EnergyParams] = None,
    workers: int = 1,
    per_model: Optional[List[PointResult]] = None,
) -> List[dict]:
    """Busy-pod fraction, cycles per tile op and mW/byte per network type."""
    rows_out = []
    for topo, k in configs:
        point = DesignPoint(32, 32, pods, topo, k)
        results = run_jobs([(m, point, params, None, 1) for m in models], workers)
        if per_model is not None:
            per_model.extend(results)
        agg = aggregate(results)
        rows_out.append(
            {
                "topology": topo,
                "expansion": k,
                "busy_pod_fraction": agg["busy_pod_fraction"],
                "cycles_per_tile_op": agg["cycles_per_tile_op"],
                "mw_per_byte": power_per_byte(point.nets()),
                "utilization": agg["utilization"],
            }
        )
    return rows_out


def write_csv(rows: Sequence[dict], path) -> None:
    """Write dict rows with the union of keys as header, in first-seen order."""
    keys: List[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in keys})


def _fmt(v):
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6g}"
    return v
