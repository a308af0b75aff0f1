"""Partitioning of GEMMs into pod-sized tile operations.

A tile op multiplies an x-tile (m x n) by a w-tile (n x p) and adds an
optional input partial sum, producing an m x p partial tile. Indices:

* i: row block of X, length ``k_part`` (default r)
* j: reduction block, length r
* k: column block of W, length c

All ops sharing (instance, i, k) form one aggregation group whose J = ceil(d2/r)
partial tiles must be summed. Ops are numbered layer by layer in
(instance, i, k, j) order so that the reduction index is innermost.

The module also maps consumer tiles back to the producer aggregation groups
that write the data they read. These maps are conservative: a tile depends on
every producer group whose rows or columns intersect its receptive field.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .workload import MODEL_INPUT, GemmSpec, InputEdge, ModelGraph

X_BYTES = 1  # 8-bit activations
W_BYTES = 1  # 8-bit weights
PSUM_BYTES = 2  # 16-bit partial sums


def cdiv(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class TileOp:
    """One x_ij x w_jk (+ psum) product executed by one pod."""

    id: int
    layer: str
    b: int
    i: int
    j: int
    k: int
    m: int
    n: int
    p: int
    group: Tuple[str, int, int, int]
    chain_prev: Optional[int] = None

    @property
    def x_bytes(self) -> int:
        return self.m * self.n * X_BYTES

    @property
    def w_bytes(self) -> int:
        return self.n * self.p * W_BYTES

    @property
    def psum_bytes(self) -> int:
        return self.m * self.p * PSUM_BYTES

    @property
    def macs(self) -> int:
        return self.m * self.n * self.p


def _resolve_kpart(g: GemmSpec, r: int, k_part: Optional[int]) -> int:
    if k_part is None:
        return r
    if k_part <= 0:
        return g.d1  # no partitioning of the first dimension
    return k_part


def partition_gemm(g: GemmSpec, r: int, c: int, k_part: Optional[int] = None) -> List[TileOp]:
    """Split one GEMM into tile ops in (instance, i, k, j) order.

    ``k_part`` is the row-block length of X; ``None`` means r and ``0`` means
    no partitioning (one row block spanning all of d1). Each op's
    ``chain_prev`` points at the previous member of its group, which is the
    default left-deep aggregation chain.
    """
    if min(r, c) < 1:
        raise ValueError("r and c must be >= 1")
    kp = _resolve_kpart(g, r, k_part)
    I, J, K = cdiv(g.d1, kp), cdiv(g.d2, r), cdiv(g.d3, c)
    ops: List[TileOp] = []
    for b in range(g.batch):
        for i in range(I):
            m = min(kp, g.d1 - i * kp)
            for k in range(K):
                p = min(c, g.d3 - k * c)
                prev = None
                for j in range(J):
                    n = min(r, g.d2 - j * r)
                    op = TileOp(len(ops), g.layer_id, b, i, j, k, m, n, p, (g.layer_id, b, i, k), prev)
                    prev = op.id
                    ops.append(op)
    return ops


def tile_working_set(g: GemmSpec, r: int, c: int, k_part: Optional[int] = None) -> Dict[str, int]:
    """Bytes of the largest tile of each class and per-layer totals.

    Totals count every distinct x-tile, w-tile and partial tile once; the
    x total is the lowered (im2col) activation matrix.
    """
    kp = _resolve_kpart(g, r, k_part)
    J = cdiv(g.d2, r)
    w_copies = g.batch if g.w_input is not None else 1
    return {
        "x_tile": min(kp, g.d1) * min(r, g.d2) * X_BYTES,
        "w_tile": min(r, g.d2) * min(c, g.d3) * W_BYTES,
        "psum_tile": min(kp, g.d1) * min(c, g.d3) * PSUM_BYTES,
        "x_total": g.batch * g.d1 * g.d2 * X_BYTES,
        "w_total": w_copies * g.d2 * g.d3 * W_BYTES,
        "psum_total": g.batch * g.d1 * g.d3 * J * PSUM_BYTES,
        "out_total": g.batch * g.d1 * g.d3 * X_BYTES,
    }


class LayerTiling:
    """Tiling of one layer plus its global numbering offsets."""

    def __init__(self, index: int, g: GemmSpec, r: int, c: int, k_part: Optional[int]):
        self.index = index
        self.g = g
        self.r = r
        self.c = c
        self.kp = _resolve_kpart(g, r, k_part)
        self.B = g.batch
        self.I = cdiv(g.d1, self.kp)
        self.J = cdiv(g.d2, r)
        self.K = cdiv(g.d3, c)
        self.n_ops = self.B * self.I * self.K * self.J
        self.n_groups = self.B * self.I * self.K
        self.n_x = self.B * self.I * self.J
        self.w_instanced = g.w_input is not None
        self.n_w = (self.B if self.w_instanced else 1) * self.J * self.K
        self.op_offset = 0
        self.group_offset = 0
        self.x_offset = 0
        self.w_offset = 0

    @property
    def layer_id(self) -> str:
        return self.g.layer_id

    def m_of(self, i: int) -> int:
        return min(self.kp, self.g.d1 - i * self.kp)

    def n_of(self, j: int) -> int:
        return min(self.r, self.g.d2 - j * self.r)

    def p_of(self, k: int) -> int:
        return min(self.c, self.g.d3 - k * self.c)

    def decode(self, local: int) -> Tuple[int, int, int, int]:
        """(b, i, k, j) of a layer-local op index."""
        j = local % self.J
        t = local // self.J
        k = t % self.K
        t //= self.K
        return t // self.I, t % self.I, k, j

    def op_arrays(self) -> Dict[str, np.ndarray]:
        """Per-op attributes for the whole layer in visit order."""
        idx = np.arange(self.n_ops, dtype=np.int64)
        j = idx % self.J
        k = (idx // self.J) % self.K
        bi = idx // (self.J * self.K)
        i = bi % self.I
        b = bi // self.I
        m = np.minimum(self.kp, self.g.d1 - i * self.kp)
        n = np.minimum(self.r, self.g.d2 - j * self.r)
        p = np.minimum(self.c, self.g.d3 - k * self.c)
        x_key = self.x_offset + bi * self.J + j
        wb = b if self.w_instanced else np.zeros_like(b)
        w_key = self.w_offset + (wb * self.J + j) * self.K + k
        group = self.group_offset + bi * self.K + k
        return {"b": b, "i": i, "j": j, "k": k, "m": m, "n": n, "p": p, "x_key": x_key, "w_key": w_key, "group": group}


class TileGraph:
    """All tile ops of a model with their dependence structure.

    Ops are not materialized; per-layer arithmetic yields their attributes.
    ``ops()`` materializes TileOp objects for small graphs.
    """

    def __init__(self, model: ModelGraph, r: int, c: int, k_part: Optional[int] = None):
        self.model = model
        self.r = r
        self.c = c
        self.k_part = k_part
        self.layers: List[LayerTiling] = []
        self.by_id: Dict[str, LayerTiling] = {}
        op = grp = xo = wo = 0
        for u in model.topo_order:
            lt = LayerTiling(len(self.layers), model.layers[u], r, c, k_part)
            lt.op_offset, lt.group_offset, lt.x_offset, lt.w_offset = op, grp, xo, wo
            op += lt.n_ops
            grp += lt.n_groups
            xo += lt.n_x
            wo += lt.n_w
            self.layers.append(lt)
            self.by_id[lt.layer_id] = lt
        self.n_ops = op
        self.n_groups = grp
        self.n_x = xo
        self.n_w = wo

    @property
    def useful_macs(self) -> int:
        return self.model.macs

    def layer_of_op(self, op: int) -> LayerTiling:
        lo, hi = 0, len(self.layers) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.layers[mid].op_offset <= op:
                lo = mid
            else:
                hi = mid - 1
        return self.layers[lo]

    def ops(self) -> Iterator[TileOp]:
        for lt in self.layers:
            for op in partition_gemm(lt.g, self.r, self.c, lt.kp):
                yield TileOp(
                    op.id + lt.op_offset,
                    op.layer,
                    op.b,
                    op.i,
                    op.j,
                    op.k,
                    op.m,
                    op.n,
                    op.p,
                    op.group,
                    None if op.chain_prev is None else op.chain_prev + lt.op_offset,
                )

    def op_arrays(self) -> Dict[str, np.ndarray]:
        """Concatenated per-op attribute arrays (plus ``layer``) for the whole graph."""
        parts: Dict[str, List[np.ndarray]] = {}
        for lt in self.layers:
            arrs = lt.op_arrays()
            arrs["layer"] = np.full(lt.n_ops, lt.index, dtype=np.int64)
            for key, v in arrs.items():
                parts.setdefault(key, []).append(v)
        if not parts:
            keys = ("b", "i", "j", "k", "m", "n", "p", "x_key", "w_key", "group", "layer")
            return {key: np.zeros(0, dtype=np.int64) for key in keys}
        return {key: np.concatenate(v) for key, v in parts.items()}

    # ------------------------------------------------------------------
    # dependence maps

    def x_dependencies(self, lt: LayerTiling) -> List["EdgeMap"]:
        """Row/column maps from each x-tile of ``lt`` to producer groups."""
        maps = []
        offsets = _channel_offsets(self, lt)
        for e, off in zip(lt.g.inputs, offsets):
            if e.source == MODEL_INPUT:
                continue
            prod = self.by_id[e.source]
            rows = np.arange(lt.B * lt.I)
            b, i = rows // lt.I, rows % lt.I
            g0 = b * lt.g.d1 + i * lt.kp
            g1 = b * lt.g.d1 + np.minimum((i + 1) * lt.kp, lt.g.d1) - 1
            r_lo, r_hi = _map_rows(lt.g, prod.g, e, g0, g1)
            q_lo, q_hi = _row_block(prod, r_lo), _row_block(prod, r_hi)
            k_ranges = []
            for j in range(lt.J):
                k_ranges.append(_x_col_groups(lt, prod, e, off, j))
            maps.append(EdgeMap(prod.index, q_lo, q_hi, k_ranges))
        return maps

    def w_dependencies(self, lt: LayerTiling) -> Optional["WeightMap"]:
        """Map from each w-tile (b, j, k) of a matmul to producer groups."""
        e = lt.g.w_input
        if e is None or e.source == MODEL_INPUT:
            return None
        prod = self.by_id[e.source]
        lo = e.cols[0] if e.cols is not None else 0
        seq_rows = lt.g.d3 if e.transpose else lt.g.d2
        # rows of the producer are indexed by sequence position, columns by feature
        row_dim_blocks = lt.K if e.transpose else lt.J
        col_dim_blocks = lt.J if e.transpose else lt.K
        row_len = lt.c if e.transpose else lt.r
        col_len = lt.r if e.transpose else lt.c
        q_lo = np.zeros((lt.B, row_dim_blocks), dtype=np.int64)
        q_hi = np.zeros_like(q_lo)
        for b in range(lt.B):
            t0 = np.arange(row_dim_blocks) * row_len
            t1 = np.minimum(t0 + row_len, seq_rows) - 1
            q_lo[b] = _row_block(prod, b * seq_rows + t0)
            q_hi[b] = _row_block(prod, b * seq_rows + t1)
        width = lt.g.d2 if e.transpose else lt.g.d3
        k_rng = []
        for blk in range(col_dim_blocks):
            f0 = blk * col_len
            f1 = min(f0 + col_len, width) - 1
            k_rng.append(((lo + f0) // prod.c, (lo + f1) // prod.c))
        return WeightMap(prod.index, q_lo, q_hi, k_rng, e.transpose)

    def x_sources(self, lt: LayerTiling, b: int, i: int, j: int) -> List[int]:
        """Global producer group ids read by x-tile (b, i, j) of ``lt``."""
        out = []
        row = b * lt.I + i
        for em in self.x_dependencies(lt):
            prod = self.layers[em.producer]
            for k0, k1 in em.k_ranges[j]:
                for q in range(int(em.q_lo[row]), int(em.q_hi[row]) + 1):
                    for k in range(k0, k1 + 1):
                        out.append(prod.group_offset + q * prod.K + k)
        return sorted(set(out))

    def w_sources(self, lt: LayerTiling, b: int, j: int, k: int) -> List[int]:
        wm = self.w_dependencies(lt)
        if wm is None:
            return []
        prod = self.layers[wm.producer]
        rblk, cblk = (k, j) if wm.transpose else (j, k)
        k0, k1 = wm.k_ranges[cblk]
        out = []
        for q in range(int(wm.q_lo[b, rblk]), int(wm.q_hi[b, rblk]) + 1):
            for kk in range(k0, k1 + 1):
                out.append(prod.group_offset + q * prod.K + kk)
        return sorted(set(out))


@dataclass
class EdgeMap:
    """For one input edge: producer row-block range per consumer row block and
    producer column-block ranges per consumer reduction block."""

    producer: int
    q_lo: np.ndarray
    q_hi: np.ndarray
    k_ranges: List[List[Tuple[int, int]]]


@dataclass
class WeightMap:
    producer: int
    q_lo: np.ndarray  # [instance, row block of the producer-indexed dim]
    q_hi: np.ndarray
    k_ranges: List[Tuple[int, int]]
    transpose: bool


def _row_block(prod: LayerTiling, g: np.ndarray) -> np.ndarray:
    """Producer row-block index (instance-major) of global output rows."""
    g = np.asarray(g, dtype=np.int64)
    inst = g // prod.g.d1
    return inst * prod.I + (g % prod.g.d1) // prod.kp


def _out_hw(g: GemmSpec) -> Tuple[int, int]:
    geom = g.geometry
    if geom.kind == "conv2d":
        return geom.out_h, geom.out_w
    return geom.rows, 1


def _map_rows(cons: GemmSpec, prod: GemmSpec, edge: InputEdge, g0: np.ndarray, g1: np.ndarray):
    """Global producer output rows read by consumer output rows [g0, g1]."""
    geom = cons.geometry
    per_img = cons.d1 // geom.images if geom.kind != "matmul" else cons.d1
    img0, pos0 = g0 // per_img, g0 % per_img
    img1, pos1 = g1 // per_img, g1 % per_img
    if geom.kind == "conv2d":
        oh0, oh1 = pos0 // geom.out_w, pos1 // geom.out_w
        lo = np.maximum(oh0 * geom.stride - geom.pad_top, 0)
        hi = np.minimum(oh1 * geom.stride - geom.pad_top + geom.k_h - 1, geom.in_h - 1)
    else:
        lo, hi = pos0.copy(), pos1.copy()
    ph, pw = _out_hw(prod)
    # walk the pooling chain backwards to the producer's own output rows
    sizes = [ph]
    for p in edge.pool:
        sizes.append(p.out_size(sizes[-1]))
    for p, n_in in zip(reversed(edge.pool), reversed(sizes[:-1])):
        if p.global_pool:
            lo, hi = np.zeros_like(lo), np.full_like(hi, n_in - 1)
        else:
            pad = p.pad_before(n_in)
            lo = np.maximum(lo * p.stride - pad, 0)
            hi = np.minimum(hi * p.stride - pad + p.kernel - 1, n_in - 1)
    # same image index on both sides; different images cover everything between
    plane = ph * pw
    return img0 * plane + lo * pw, img1 * plane + (hi + 1) * pw - 1


def _channel_offsets(tg: TileGraph, lt: LayerTiling) -> List[int]:
    offs = []
    acc = 0
    for e in lt.g.inputs:
        offs.append(acc if lt.g.merge == "concat" else 0)
        if e.source == MODEL_INPUT:
            continue
        width = tg.by_id[e.source].g.d3 if e.cols is None else e.cols[1] - e.cols[0]
        acc += width
    return offs


def _feature_channel_ranges(lt: LayerTiling, j: int) -> List[Tuple[int, int]]:
    """Input-channel ranges touched by reduction block j."""
    i0 = j * lt.r
    i1 = min(i0 + lt.r, lt.g.d2) - 1
    geom = lt.g.geometry
    if geom.kind != "conv2d":
        return [(i0, i1)]
    C = geom.in_c
    if i1 - i0 + 1 >= C:
        return [(0, C - 1)]
    c0, c1 = i0 % C, i1 % C
    if i0 // C == i1 // C:
        return [(c0, c1)]
    return [(c0, C - 1), (0, c1)]


def _x_col_groups(lt: LayerTiling, prod: LayerTiling, e: InputEdge, off: int, j: int) -> List[Tuple[int, int]]:
    width = prod.g.d3 if e.cols is None else e.cols[1] - e.cols[0]
    base = 0 if e.cols is None else e.cols[0]
    out = []
    for c0, c1 in _feature_channel_ranges(lt, j):
        a, b = max(c0, off), min(c1, off + width - 1)
        if a > b:
            continue
        out.append(((base + a - off) // prod.c, (base + b - off) // prod.c))
    return out


def range_max(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """max(values[lo[t]:hi[t]+1]) for every t; ranges are nonempty."""
    if len(lo) == 0:
        return np.zeros(0, dtype=values.dtype)
    padded = np.append(values, values[-1])
    idx = np.empty(2 * len(lo), dtype=np.int64)
    idx[0::2] = lo
    idx[1::2] = hi + 1
    return np.maximum.reduceat(padded, idx)[0::2]
