"""Model descriptions and their lowering to GEMM dimensions.

A model file is JSON of the form ``{name, batch, layers: [...]}``. Each layer
is a conv2d, dense or matmul layer. Convolutions are lowered im2col style:

* d1 (filter reuse) = batch * outH * outW
* d2 (features)     = kH * kW * inC
* d3 (filters)      = outC

Dense layers fold the batch into d1 the same way. Matmul layers (attention
scores and context products) stay batched: each sequence is an independent
GEMM instance, so ``GemmSpec.batch`` counts instances and d1 is the
sequence length.

Layer inputs are edges to earlier layers (or to the model input). An edge
may carry a pooling window applied on the post-processors before the data is
consumed, and a column slice used to pick one attention head out of a wider
projection. Element-wise work (activation, residual add, concat) never becomes
a GEMM; it shows up only as the ``merge`` mode of the consuming layer.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

MODEL_INPUT = "input"

_KINDS = ("conv2d", "dense", "matmul")
_PADDING = ("same", "valid")


class ModelParseError(ValueError):
    """The model file is not valid JSON or misses required fields."""


class ModelValidationError(ValueError):
    """The model parses but violates a structural rule."""


@dataclass(frozen=True)
class Pool:
    """Pooling window applied to a producer's output before it is consumed.

    ``global_pool`` collapses the whole spatial extent to one position.
    """

    kernel: int = 1
    stride: int = 1
    padding: str = "valid"
    global_pool: bool = False

    def out_size(self, n: int) -> int:
        if self.global_pool:
            return 1
        return _window_out(n, self.kernel, self.stride, self.padding)

    def pad_before(self, n: int) -> int:
        if self.global_pool:
            return 0
        return _pad_before(n, self.kernel, self.stride, self.padding)

    def to_json(self) -> dict:
        if self.global_pool:
            return {"global": True}
        return {"kernel": self.kernel, "stride": self.stride, "padding": self.padding}


@dataclass(frozen=True)
class InputEdge:
    """One data input of a layer.

    ``pool`` lists pooling windows applied in order to the producer's output.
    ``cols`` is a half-open column range ``[lo, hi)`` of the producer's output;
    ``None`` means all columns.
    """

    source: str
    pool: Tuple[Pool, ...] = ()
    cols: Optional[Tuple[int, int]] = None
    transpose: bool = False


@dataclass(frozen=True)
class LayerSpec:
    """One layer as written in a model file."""

    id: str
    kind: str
    inputs: Tuple[InputEdge, ...] = ()
    merge: str = "concat"
    # conv2d
    in_h: int = 0
    in_w: int = 0
    in_c: int = 0
    k_h: int = 1
    k_w: int = 1
    out_c: int = 0
    stride: int = 1
    padding: str = "same"
    # dense / matmul
    in_features: int = 0
    out_features: int = 0
    seq: int = 0
    # matmul only: the producer that supplies the W operand
    w_input: Optional[InputEdge] = None

    @property
    def predecessors(self) -> Tuple[str, ...]:
        ids = [e.source for e in self.inputs if e.source != MODEL_INPUT]
        if self.w_input is not None and self.w_input.source != MODEL_INPUT:
            ids.append(self.w_input.source)
        return tuple(dict.fromkeys(ids))


@dataclass(frozen=True)
class Geometry:
    """Shape information needed to map output rows back to input rows.

    For conv layers ``images`` is the folded batch and the spatial fields are
    filled in. For dense/matmul layers ``rows`` is the sequence length per
    instance (or per image).
    """

    kind: str
    images: int = 1
    rows: int = 1
    in_h: int = 1
    in_w: int = 1
    in_c: int = 1
    out_h: int = 1
    out_w: int = 1
    k_h: int = 1
    k_w: int = 1
    stride: int = 1
    pad_top: int = 0
    pad_left: int = 0


@dataclass(frozen=True)
class GemmSpec:
    """A layer lowered to ``X (d1 x d2) @ W (d2 x d3)``, repeated ``batch`` times."""

    layer_id: str
    d1: int
    d2: int
    d3: int
    batch: int = 1
    predecessors: Tuple[str, ...] = ()
    inputs: Tuple[InputEdge, ...] = ()
    merge: str = "concat"
    w_input: Optional[InputEdge] = None
    geometry: Optional[Geometry] = None

    def __post_init__(self) -> None:
        for name in ("d1", "d2", "d3", "batch"):
            if getattr(self, name) < 1:
                raise ModelValidationError(f"{self.layer_id}: {name} must be >= 1")

    @property
    def macs(self) -> int:
        return self.batch * self.d1 * self.d2 * self.d3

    @property
    def out_rows(self) -> int:
        """Rows of the output across all instances."""
        return self.batch * self.d1


@dataclass
class ModelGraph:
    """Validated, topologically ordered list of lowered layers."""

    name: str
    layers: List[GemmSpec]
    batch: int = 1
    family: str = "cnn"
    topo_order: List[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.index: Dict[str, int] = {}
        for pos, g in enumerate(self.layers):
            if g.layer_id in self.index or g.layer_id == MODEL_INPUT:
                raise ModelValidationError(f"duplicate or reserved layer id {g.layer_id!r}")
            self.index[g.layer_id] = pos
        if not self.topo_order:
            self.topo_order = _topological_order(self.layers, self.index)

    @property
    def macs(self) -> int:
        return sum(g.macs for g in self.layers)

    def layer(self, layer_id: str) -> GemmSpec:
        return self.layers[self.index[layer_id]]


def _window_out(n: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return -(-n // s)
    return (n - k) // s + 1


def _pad_before(n: int, k: int, s: int, padding: str) -> int:
    if padding != "same":
        return 0
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2


def conv_output_size(n: int, k: int, stride: int, padding: str) -> int:
    """Output extent of a convolution along one axis."""
    return _window_out(n, k, stride, padding)


def conv_to_gemm(layer: LayerSpec, batch: int) -> GemmSpec:
    """Lower a conv2d layer to GEMM dimensions with the batch folded into d1."""
    if layer.kind != "conv2d":
        raise ModelValidationError(f"{layer.id}: conv_to_gemm needs a conv2d layer")
    if layer.padding not in _PADDING:
        raise ModelValidationError(f"{layer.id}: padding must be one of {_PADDING}")
    if min(layer.in_h, layer.in_w, layer.in_c, layer.k_h, layer.k_w, layer.out_c, layer.stride) < 1:
        raise ModelValidationError(f"{layer.id}: nonpositive dimension")
    if batch < 1:
        raise ModelValidationError("batch must be >= 1")
    out_h = conv_output_size(layer.in_h, layer.k_h, layer.stride, layer.padding)
    out_w = conv_output_size(layer.in_w, layer.k_w, layer.stride, layer.padding)
    if out_h <= 0 or out_w <= 0:
        raise ModelValidationError(f"{layer.id}: degenerate output {out_h}x{out_w}")
    geom = Geometry(
        kind="conv2d",
        images=batch,
        rows=out_h * out_w,
        in_h=layer.in_h,
        in_w=layer.in_w,
        in_c=layer.in_c,
        out_h=out_h,
        out_w=out_w,
        k_h=layer.k_h,
        k_w=layer.k_w,
        stride=layer.stride,
        pad_top=_pad_before(layer.in_h, layer.k_h, layer.stride, layer.padding),
        pad_left=_pad_before(layer.in_w, layer.k_w, layer.stride, layer.padding),
    )
    return GemmSpec(
        layer_id=layer.id,
        d1=batch * out_h * out_w,
        d2=layer.k_h * layer.k_w * layer.in_c,
        d3=layer.out_c,
        batch=1,
        predecessors=layer.predecessors,
        inputs=layer.inputs,
        merge=layer.merge,
        geometry=geom,
    )


def lower_layer(layer: LayerSpec, batch: int) -> GemmSpec:
    """Lower any supported layer kind."""
    if layer.kind == "conv2d":
        return conv_to_gemm(layer, batch)
    if min(layer.in_features, layer.out_features, layer.seq) < 1:
        raise ModelValidationError(f"{layer.id}: nonpositive dimension")
    if layer.kind == "dense":
        return GemmSpec(
            layer_id=layer.id,
            d1=batch * layer.seq,
            d2=layer.in_features,
            d3=layer.out_features,
            batch=1,
            predecessors=layer.predecessors,
            inputs=layer.inputs,
            merge=layer.merge,
            geometry=Geometry(kind="dense", images=batch, rows=layer.seq, in_c=layer.in_features),
        )
    if layer.kind == "matmul":
        return GemmSpec(
            layer_id=layer.id,
            d1=layer.seq,
            d2=layer.in_features,
            d3=layer.out_features,
            batch=batch,
            predecessors=layer.predecessors,
            inputs=layer.inputs,
            merge=layer.merge,
            w_input=layer.w_input,
            geometry=Geometry(kind="matmul", images=batch, rows=layer.seq, in_c=layer.in_features),
        )
    raise ModelValidationError(f"{layer.id}: unknown layer kind {layer.kind!r}")


def _topological_order(layers: Sequence[GemmSpec], index: Dict[str, int]) -> List[int]:
    """Kahn's algorithm; ties broken by file position."""
    indeg = [0] * len(layers)
    succ: List[List[int]] = [[] for _ in layers]
    for pos, g in enumerate(layers):
        for p in g.predecessors:
            if p not in index:
                raise ModelValidationError(f"{g.layer_id}: unknown predecessor {p!r}")
            succ[index[p]].append(pos)
            indeg[pos] += 1
    ready = [i for i, d in enumerate(indeg) if d == 0]
    order: List[int] = []
    heapq.heapify(ready)
    while ready:
        u = heapq.heappop(ready)
        order.append(u)
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(ready, v)
    if len(order) != len(layers):
        raise ModelValidationError("layer graph has a cycle")
    return order


def is_linear_extension(model: ModelGraph, order: Sequence[int]) -> bool:
    """True when every predecessor appears before its consumer in ``order``."""
    if sorted(order) != list(range(len(model.layers))):
        return False
    pos = {u: t for t, u in enumerate(order)}
    for u, g in enumerate(model.layers):
        for p in g.predecessors:
            if pos[model.index[p]] >= pos[u]:
                return False
    return True


# --------------------------------------------------------------------------
# parsing


def _parse_pool(raw) -> Tuple[Pool, ...]:
    if raw is None:
        return ()
    if isinstance(raw, list):
        return tuple(p for r in raw for p in _parse_pool(r))
    if raw.get("global"):
        return (Pool(global_pool=True),)
    pool = Pool(
        kernel=int(raw["kernel"]),
        stride=int(raw.get("stride", raw["kernel"])),
        padding=str(raw.get("padding", "valid")),
    )
    if pool.kernel < 1 or pool.stride < 1:
        raise ModelValidationError("pool kernel and stride must be >= 1")
    if pool.padding not in _PADDING:
        raise ModelValidationError(f"pool padding must be one of {_PADDING}")
    return (pool,)


def _parse_edge(raw) -> InputEdge:
    if isinstance(raw, str):
        return InputEdge(source=raw)
    cols = raw.get("cols")
    if cols is not None:
        cols = (int(cols[0]), int(cols[1]))
        if not 0 <= cols[0] < cols[1]:
            raise ModelValidationError(f"bad column range {cols}")
    return InputEdge(
        source=str(raw["id"]),
        pool=_parse_pool(raw.get("pool")),
        cols=cols,
        transpose=bool(raw.get("transpose", False)),
    )


def parse_layer(raw: dict) -> LayerSpec:
    """Build a LayerSpec from its JSON object."""
    kind = raw.get("kind")
    if kind not in _KINDS:
        raise ModelValidationError(f"layer {raw.get('id')!r}: kind must be one of {_KINDS}")
    preds = raw.get("predecessors", [])
    inputs = tuple(_parse_edge(p) for p in preds)
    merge = raw.get("merge", "concat")
    if merge not in ("concat", "add"):
        raise ModelValidationError(f"layer {raw.get('id')!r}: merge must be concat or add")
    common = dict(id=str(raw["id"]), kind=kind, inputs=inputs, merge=merge)
    if kind == "conv2d":
        k = raw.get("kernel", 1)
        k_h, k_w = (k, k) if isinstance(k, int) else (int(k[0]), int(k[1]))
        return LayerSpec(
            **common,
            in_h=int(raw["in_h"]),
            in_w=int(raw["in_w"]),
            in_c=int(raw["in_c"]),
            k_h=int(k_h),
            k_w=int(k_w),
            out_c=int(raw["out_c"]),
            stride=int(raw.get("stride", 1)),
            padding=str(raw.get("padding", "same")),
        )
    w_input = _parse_edge(raw["w_from"]) if "w_from" in raw else None
    if kind == "dense" and w_input is not None:
        raise ModelValidationError(f"layer {raw['id']!r}: dense layers take weights from DRAM")
    return LayerSpec(
        **common,
        in_features=int(raw["in_features"]),
        out_features=int(raw["out_features"]),
        seq=int(raw.get("seq", 1)),
        w_input=w_input,
    )


def _edge_shape(model_layers: Dict[str, GemmSpec], edge: InputEdge) -> Tuple[int, int, int]:
    """(height, width, channels) per image/instance delivered by an edge."""
    src = model_layers[edge.source]
    geom = src.geometry
    if geom.kind == "conv2d":
        h, w = geom.out_h, geom.out_w
    else:
        h, w = geom.rows, 1
    for p in edge.pool:
        h, w = p.out_size(h), p.out_size(w)
        if h < 1 or w < 1:
            raise ModelValidationError(f"pooling {edge.source} gives an empty output")
    ch = src.d3 if edge.cols is None else edge.cols[1] - edge.cols[0]
    if edge.cols is not None and edge.cols[1] > src.d3:
        raise ModelValidationError(f"column range {edge.cols} exceeds {edge.source} width {src.d3}")
    return h, w, ch


def _check_inputs(layer: LayerSpec, gemm: GemmSpec, seen: Dict[str, GemmSpec]) -> None:
    """Shape agreement between a layer and the producers feeding it."""
    if gemm.geometry.kind == "conv2d":
        want_hw = (layer.in_h, layer.in_w)
        want_c = layer.in_c
    else:
        want_hw = (layer.seq, 1)
        want_c = layer.in_features
    chans = []
    for e in layer.inputs:
        if e.source == MODEL_INPUT:
            chans.append(want_c)
            continue
        h, w, ch = _edge_shape(seen, e)
        if gemm.geometry.kind == "conv2d":
            if (h, w) != want_hw:
                raise ModelValidationError(f"{layer.id}: input {e.source} is {h}x{w}, expected {want_hw}")
        elif h * w != want_hw[0]:
            raise ModelValidationError(f"{layer.id}: input {e.source} has {h * w} rows, expected {want_hw[0]}")
        chans.append(ch)
    if gemm.merge == "add":
        if any(c != want_c for c in chans):
            raise ModelValidationError(f"{layer.id}: add inputs must all have {want_c} channels")
    elif sum(chans) != want_c:
        raise ModelValidationError(f"{layer.id}: concat of inputs gives {sum(chans)} channels, expected {want_c}")
    if layer.w_input is not None:
        e = layer.w_input
        h, w, ch = _edge_shape(seen, e)
        rows_needed, cols_needed = (layer.out_features, layer.in_features) if e.transpose else (
            layer.in_features,
            layer.out_features,
        )
        if h * w != rows_needed or ch != cols_needed:
            raise ModelValidationError(f"{layer.id}: weight operand from {e.source} has shape {h * w}x{ch}")


def build_model(raw: dict, batch: Optional[int] = None) -> ModelGraph:
    """Validate and lower a parsed model description."""
    try:
        name = str(raw["name"])
        layers_raw = raw["layers"]
        file_batch = int(raw.get("batch", 1))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelParseError(f"model description missing required fields: {exc}") from exc
    batch = file_batch if batch is None else int(batch)
    if batch < 1:
        raise ModelValidationError("batch must be >= 1")
    family = raw.get("family") or ("transformer" if name.lower().startswith("bert") else "cnn")
    seen: Dict[str, GemmSpec] = {}
    lowered: List[GemmSpec] = []
    for pos, lr in enumerate(layers_raw):
        try:
            layer = parse_layer(lr)
        except (KeyError, TypeError) as exc:
            raise ModelParseError(f"layer {pos}: missing or malformed field {exc}") from exc
        if layer.id in seen or layer.id == MODEL_INPUT:
            raise ModelValidationError(f"duplicate or reserved layer id {layer.id!r}")
        for p in layer.predecessors:
            if p not in seen:
                raise ModelValidationError(f"{layer.id}: predecessor {p!r} is not an earlier layer (cycle or forward reference)")
        if pos > 0 and not layer.inputs:
            raise ModelValidationError(f"{layer.id}: non-first layer without predecessors")
        if not layer.inputs:
            layer = replace(layer, inputs=(InputEdge(MODEL_INPUT),))
        if layer.kind == "matmul" and layer.w_input is None:
            raise ModelValidationError(f"{layer.id}: matmul needs a w_from operand")
        gemm = lower_layer(layer, batch)
        _check_inputs(layer, gemm, seen)
        seen[layer.id] = gemm
        lowered.append(gemm)
    if not lowered:
        return ModelGraph(name=name, layers=[], batch=batch, family=family)
    return ModelGraph(name=name, layers=lowered, batch=batch, family=family)


def load_model(path: Union[str, Path], batch: Optional[int] = None) -> ModelGraph:
    """Read a model file and return its validated ModelGraph.

    ``batch`` overrides the batch size stored in the file.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ModelParseError(f"{path}: top level must be an object")
    return build_model(raw, batch=batch)


def models_dir() -> Path:
    """Directory of the model files shipped with the package."""
    return Path(__file__).resolve().parent / "data" / "models"


def load_builtin(name: str, batch: Optional[int] = None) -> ModelGraph:
    """Load a shipped model by file stem, e.g. ``resnet50_299`` or ``bert_base_s100``."""
    path = models_dir() / f"{name}.json"
    if not path.exists():
        raise FileNotFoundError(f"no shipped model named {name!r}")
    return load_model(path, batch=batch)


def merge_models(models: Sequence[ModelGraph], name: Optional[str] = None) -> ModelGraph:
    """Union of several models into one graph for co-scheduling.

    Layer ids are prefixed with the model name. Layers are interleaved by
    depth relative to their own model's depth, so every tenant advances at
    the same rate and a shallow model spreads over a deep one's whole run.
    """
    depth_lists = []
    for mi, m in enumerate(models):
        depth: Dict[str, int] = {}
        items = []
        for u in m.topo_order:
            g = m.layers[u]
            d = 1 + max((depth[p] for p in g.predecessors), default=-1)
            depth[g.layer_id] = d
            items.append((d, mi, u))
        n_levels = 1 + max((d for d, _, _ in items), default=0)
        depth_lists.extend(((d + 1) / n_levels, mi, u) for d, mi, u in items)
    depth_lists.sort()
    layers: List[GemmSpec] = []
    for _, mi, u in depth_lists:
        m = models[mi]
        g = m.layers[u]
        pre = f"{m.name}/"
        layers.append(
            GemmSpec(
                layer_id=pre + g.layer_id,
                d1=g.d1,
                d2=g.d2,
                d3=g.d3,
                batch=g.batch,
                predecessors=tuple(pre + p for p in g.predecessors),
                inputs=tuple(_prefix_edge(e, pre) for e in g.inputs),
                merge=g.merge,
                w_input=None if g.w_input is None else _prefix_edge(g.w_input, pre),
                geometry=g.geometry,
            )
        )
    return ModelGraph(
        name=name or "+".join(m.name for m in models),
        layers=layers,
        batch=max((m.batch for m in models), default=1),
        family="mixed",
    )


def _prefix_edge(e: InputEdge, pre: str) -> InputEdge:
    if e.source == MODEL_INPUT:
        return e
    return InputEdge(source=pre + e.source, pool=e.pool, cols=e.cols, transpose=e.transpose)


# --------------------------------------------------------------------------
# statistics


def weighted_percentile(values: Sequence[float], weights: Sequence[float], q: float) -> float:
    """Smallest value whose cumulative weight share reaches ``q`` (0..1)."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    cum = np.cumsum(w) / w.sum()
    idx = int(np.searchsorted(cum, q - 1e-12, side="left"))
    return float(v[min(idx, len(v) - 1)])


def dimension_stats(models: Sequence[ModelGraph]) -> Dict[str, Dict[str, Dict[str, float]]]:
    """MAC-weighted 10th percentile, mean and 90th percentile of d1, d2, d3.

    Results are grouped by model family (``cnn`` or ``transformer``).
    """
    if not models:
        raise ValueError("dimension_stats needs at least one model")
    by_family: Dict[str, List[GemmSpec]] = {}
    for m in models:
        by_family.setdefault(m.family, []).extend(m.layers)
    out: Dict[str, Dict[str, Dict[str, float]]] = {}
    for fam, layers in by_family.items():
        if not layers:
            continue
        w = np.array([g.macs for g in layers], dtype=float)
        stats = {}
        for dim in ("d1", "d2", "d3"):
            v = np.array([getattr(g, dim) for g in layers], dtype=float)
            stats[dim] = {
                "p10": weighted_percentile(v, w, 0.10),
                "mean": float(np.dot(v, w) / w.sum()),
                "p90": weighted_percentile(v, w, 0.90),
            }
        out[fam] = stats
    return out
