"""Peak power, run energy and effective throughput.

Peak power is assembled per pod from its components at full activity and
multiplied by the pod count. Per pod and cycle the bank interface moves
r bytes of activations, r bytes of weights, 2c bytes of input psums and 2c
bytes of output psums, i.e. 2r + 4c bytes.

Two multipliers (``array_scale`` and ``interconnect_scale``) and the static
``other_mw_per_pod`` are fitted, not first-principles: they were chosen once
so that a 32x32 pod behind a 256-port Butterfly-2 splits its power as 37.64 %
arrays, 45.81 % SRAM and 15.06 % interconnect.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, Mapping, Optional

from .interconnect import InterconnectConfig, power_per_byte
from .scheduler import PodConfig


class ConfigurationError(ValueError):
    """No design point satisfies the power budget."""


@dataclass(frozen=True)
class EnergyParams:
    e_mac_pj: float = 0.4
    e_sram_pj_per_byte: float = 2.7
    e_pp_pj_per_element: float = 0.1965
    e_dram_pj_per_byte: float = 31.2  # assumption: about 3.9 pJ/bit for an HBM-class interface
    clock_hz: float = 1e9
    tdp_w: float = 400.0
    # fitted calibration terms
    array_scale: float = 1.04
    interconnect_scale: float = 1.7071
    other_mw_per_pod: float = 10.555
    sram_static_mw_per_bank: float = 0.0
    # optional override of the interconnect mW per byte/cycle
    interconnect_mw_per_byte: Optional[float] = None

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if f.name in ("sram_static_mw_per_bank", "other_mw_per_pod"):
                if v < 0:
                    raise ValueError(f"{f.name} must be >= 0")
            elif v <= 0:
                raise ValueError(f"{f.name} must be > 0")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "EnergyParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown energy parameters: {sorted(unknown)}")
        return replace(cls(), **dict(data))

    @classmethod
    def from_file(cls, path) -> "EnergyParams":
        with open(path) as fh:
            return cls.from_mapping(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PowerReport:
    peak_power_w: float
    breakdown_w: Dict[str, float]
    peak_throughput: float  # ops/s
    tdp_w: float
    utilization: float = 0.0

    @property
    def peak_at_tdp(self) -> float:
        return self.peak_throughput * self.tdp_w / self.peak_power_w if self.peak_power_w else 0.0

    @property
    def effective(self) -> float:
        return self.peak_throughput * self.utilization

    @property
    def effective_at_tdp(self) -> float:
        return self.peak_at_tdp * self.utilization

    @property
    def effective_per_watt(self) -> float:
        return self.effective / self.peak_power_w if self.peak_power_w else 0.0

    def as_dict(self) -> dict:
        return {
            "peak_power_w": self.peak_power_w,
            "breakdown_w": dict(self.breakdown_w),
            "peak_throughput": self.peak_throughput,
            "peak_at_tdp": self.peak_at_tdp,
            "utilization": self.utilization,
            "effective": self.effective,
            "effective_at_tdp": self.effective_at_tdp,
            "effective_per_watt": self.effective_per_watt,
        }


def peak_throughput(pods: PodConfig) -> float:
    """Ops per second at full activity, counting a MAC as two ops."""
    return 2.0 * pods.rows * pods.cols * pods.pods * pods.clock_hz


def interface_bytes_per_cycle(rows: int, cols: int) -> int:
    return 2 * rows + 4 * cols


def _ict_mw_per_byte(nets: InterconnectConfig, params: EnergyParams) -> float:
    if params.interconnect_mw_per_byte is not None:
        return params.interconnect_mw_per_byte
    return power_per_byte(nets)


def pod_power_mw(rows: int, cols: int, nets: InterconnectConfig, params: EnergyParams) -> Dict[str, float]:
    """Per-pod peak power components in mW (one bank per pod)."""
    ghz = params.clock_hz / 1e9
    bw = interface_bytes_per_cycle(rows, cols)
    return {
        "arrays": rows * cols * params.e_mac_pj * ghz * params.array_scale,
        "sram": bw * params.e_sram_pj_per_byte * ghz + params.sram_static_mw_per_bank,
        "interconnect": bw * _ict_mw_per_byte(nets, params) * ghz * params.interconnect_scale,
        "post_processors": cols * params.e_pp_pj_per_element * ghz,
        "other": params.other_mw_per_pod,
    }


def peak_power(
    pods: PodConfig,
    banks: Optional[int] = None,
    nets: Optional[InterconnectConfig] = None,
    params: Optional[EnergyParams] = None,
) -> PowerReport:
    """Peak power with component breakdown (W). ``banks`` defaults to the pod count."""
    params = params or EnergyParams()
    nets = nets or InterconnectConfig("butterfly", _pow2_at_least(max(pods.pods, 1)), 2)
    if nets.ports < pods.pods:
        raise ValueError("network has fewer ports than pods")
    per = pod_power_mw(pods.rows, pods.cols, nets, params)
    nb = pods.pods if banks is None else banks
    breakdown = {k: v * pods.pods / 1e3 for k, v in per.items()}
    # SRAM static power is per bank
    breakdown["sram"] += params.sram_static_mw_per_bank * (nb - pods.pods) / 1e3
    total = sum(breakdown.values())
    return PowerReport(total, breakdown, peak_throughput(pods), params.tdp_w)


def _pow2_at_least(n: int) -> int:
    p = 1
    while p < n:
        p <<= 1
    return p


def pods_for_tdp(
    rows: int,
    cols: int,
    nets: Optional[InterconnectConfig] = None,
    params: Optional[EnergyParams] = None,
    tdp_w: Optional[float] = None,
    max_pods: int = 1 << 16,
) -> int:
    """Largest power-of-two pod count whose peak power stays below the TDP.

    The network is resized to the pod count at every candidate.
    """
    params = params or EnergyParams()
    tdp = params.tdp_w if tdp_w is None else tdp_w
    nets = nets or InterconnectConfig("butterfly", 1, 2)
    best = 0
    P = 1
    while P <= max_pods:
        rep = peak_power(PodConfig(pods=P, rows=rows, cols=cols, U=min(16, cols), V=min(16, rows)), None, nets.with_ports(P), params)
        if rep.peak_power_w < tdp:
            best = P
        else:
            break
        P <<= 1
    if best == 0:
        raise ConfigurationError(f"a single {rows}x{cols} pod exceeds the {tdp} W budget")
    return best


def effective_throughput(utilization: float, report: PowerReport) -> Dict[str, float]:
    """Effective throughput (ops/s), its TDP-normalized value and per-Watt figure."""
    report.utilization = float(utilization)
    return {
        "effective": report.effective,
        "effective_at_tdp": report.effective_at_tdp,
        "effective_per_watt": report.effective_per_watt,
    }


def run_energy(stats, params: Optional[EnergyParams] = None, nets: Optional[InterconnectConfig] = None) -> Dict[str, float]:
    """Energy of a simulated run in pJ, by component, plus ``total``.

    Interconnect energy charges each network's delivered bytes at the
    topology's mW per byte/cycle divided by the clock.
    """
    params = params or EnergyParams()
    out = {
        "compute": stats.useful_macs * params.e_mac_pj,
        "sram": (stats.sram_read_bytes + stats.sram_write_bytes) * params.e_sram_pj_per_byte,
        "interconnect": 0.0,
        "post_processors": stats.pp_element_ops * params.e_pp_pj_per_element,
        "dram": stats.dram_bytes * params.e_dram_pj_per_byte,
    }
    if nets is not None:
        per_byte_pj = _ict_mw_per_byte(nets, params) * 1e-3 / params.clock_hz * 1e12
        out["interconnect"] = sum(stats.net_bytes.values()) * per_byte_pj
    out["total"] = sum(out.values())
    return out
