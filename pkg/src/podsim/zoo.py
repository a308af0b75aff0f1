"""Generators for the benchmark model descriptions shipped in ``data/models``.

The CNNs follow the Keras application definitions layer by layer (conv
shapes, strides, paddings, pooling and merge structure). The BERT variants
are written out as Q/K/V projections, per-head score and context matmuls,
the attention output projection and the two feed-forward layers.

Run ``python -m podsim.zoo`` to regenerate the files.
"""

from __future__ import annotations

import argparse
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .workload import models_dir

CNN_SIZES = (224, 256, 299)
BERT_SEQ_LENS = (10, 25, 50, 100, 200, 300, 400, 500)

# (layers, hidden, heads)
BERT_CONFIGS = {
    "bert_mini": (4, 256, 4),
    "bert_small": (4, 512, 8),
    "bert_medium": (8, 512, 8),
    "bert_base": (12, 768, 12),
    "bert_large": (24, 1024, 16),
}


@dataclass
class Tensor:
    """An activation as seen by its consumers: producer edges plus a merge mode."""

    edges: List[dict]
    h: int
    w: int
    c: int
    merge: str = "concat"

    def pooled(self, pool: dict, h: int, w: int) -> "Tensor":
        edges = []
        for e in self.edges:
            e = dict(e)
            e["pool"] = list(e.get("pool", [])) + [pool]
            edges.append(e)
        return Tensor(edges, h, w, self.c, self.merge)


def _out(n: int, k: int, s: int, padding: str) -> int:
    return -(-n // s) if padding == "same" else (n - k) // s + 1


@dataclass
class _Builder:
    name: str
    family: str
    layers: List[dict] = field(default_factory=list)

    def conv(
        self,
        lid: str,
        x: Optional[Tensor],
        out_c: int,
        k,
        stride: int = 1,
        padding: str = "same",
        in_shape: Optional[Tuple[int, int, int]] = None,
    ) -> Tensor:
        k_h, k_w = (k, k) if isinstance(k, int) else k
        if x is None:
            h, w, c = in_shape
            preds: List = ["input"]
            merge = "concat"
        else:
            h, w, c = x.h, x.w, x.c
            preds, merge = _edges(x)
        layer = {
            "id": lid,
            "kind": "conv2d",
            "in_h": h,
            "in_w": w,
            "in_c": c,
            "kernel": [k_h, k_w],
            "out_c": out_c,
            "stride": stride,
            "padding": padding,
            "predecessors": preds,
        }
        if merge != "concat":
            layer["merge"] = merge
        self.layers.append(layer)
        return Tensor([{"id": lid}], _out(h, k_h, stride, padding), _out(w, k_w, stride, padding), out_c)

    def dense(self, lid: str, x: Optional[Tensor], out_f: int, seq: int, in_f: Optional[int] = None) -> Tensor:
        if x is None:
            preds, merge = ["input"], "concat"
        else:
            preds, merge = _edges(x)
            in_f = x.c
        layer = {
            "id": lid,
            "kind": "dense",
            "in_features": in_f,
            "out_features": out_f,
            "seq": seq,
            "predecessors": preds,
        }
        if merge != "concat":
            layer["merge"] = merge
        self.layers.append(layer)
        return Tensor([{"id": lid}], seq, 1, out_f)

    def matmul(self, lid: str, x_edge: dict, w_edge: dict, in_f: int, out_f: int, seq: int) -> Tensor:
        self.layers.append(
            {
                "id": lid,
                "kind": "matmul",
                "in_features": in_f,
                "out_features": out_f,
                "seq": seq,
                "predecessors": [_compact(x_edge)],
                "w_from": w_edge,
            }
        )
        return Tensor([{"id": lid}], seq, 1, out_f)

    def to_json(self) -> dict:
        return {"name": self.name, "family": self.family, "batch": 1, "layers": self.layers}


def _compact(e: dict):
    return e["id"] if set(e) == {"id"} else e


def _edges(x: Tensor):
    return [_compact(e) for e in x.edges], x.merge


def concat(*ts: Tensor) -> Tensor:
    h, w = ts[0].h, ts[0].w
    assert all((t.h, t.w) == (h, w) for t in ts)
    edges = []
    for t in ts:
        assert t.merge == "concat" or len(t.edges) == 1
        edges.extend(t.edges)
    return Tensor(edges, h, w, sum(t.c for t in ts))


def add(a: Tensor, b: Tensor) -> Tensor:
    assert (a.h, a.w, a.c) == (b.h, b.w, b.c)
    edges = []
    for t in (a, b):
        assert t.merge == "add" or len(t.edges) == 1
        for e in t.edges:
            if e not in edges:
                edges.append(e)
    return Tensor(edges, a.h, a.w, a.c, merge="add")


def pool(x: Tensor, k: int, s: int, padding: str) -> Tensor:
    return x.pooled({"kernel": k, "stride": s, "padding": padding}, _out(x.h, k, s, padding), _out(x.w, k, s, padding))


def global_pool(x: Tensor) -> Tensor:
    return x.pooled({"global": True}, 1, 1)


# --------------------------------------------------------------------------
# ResNet


def resnet(depth: int, size: int) -> dict:
    blocks = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3), 152: (3, 8, 36, 3)}[depth]
    b = _Builder(f"resnet{depth}_{size}", "cnn")
    # zero-pad 3 + 7x7/2 valid has the same output size as 'same'
    x = b.conv("conv1", None, 64, 7, 2, "same", in_shape=(size, size, 3))
    x = pool(x, 3, 2, "same")
    filters = ((64, 64, 256), (128, 128, 512), (256, 256, 1024), (512, 512, 2048))
    for st, (n, (f1, f2, f3)) in enumerate(zip(blocks, filters), start=2):
        for blk in range(n):
            tag = f"s{st}b{blk + 1}"
            stride = 2 if (blk == 0 and st > 2) else 1
            y = b.conv(f"{tag}_a", x, f1, 1, stride, "valid")
            y = b.conv(f"{tag}_b", y, f2, 3, 1, "same")
            y = b.conv(f"{tag}_c", y, f3, 1, 1, "valid")
            if blk == 0:
                sc = b.conv(f"{tag}_sc", x, f3, 1, stride, "valid")
            else:
                sc = x
            x = add(y, sc)
    x = global_pool(x)
    b.dense("fc", x, 1000, 1)
    return b.to_json()


# --------------------------------------------------------------------------
# DenseNet


def densenet(depth: int, size: int) -> dict:
    blocks = {121: (6, 12, 24, 16), 169: (6, 12, 32, 32), 201: (6, 12, 48, 32)}[depth]
    growth = 32
    b = _Builder(f"densenet{depth}_{size}", "cnn")
    x = b.conv("conv1", None, 64, 7, 2, "same", in_shape=(size, size, 3))
    x = pool(x, 3, 2, "same")
    for bi, n in enumerate(blocks, start=1):
        for li in range(n):
            tag = f"d{bi}l{li + 1}"
            y = b.conv(f"{tag}_a", x, 4 * growth, 1, 1, "valid")
            y = b.conv(f"{tag}_b", y, growth, 3, 1, "same")
            x = concat(x, y)
        if bi < len(blocks):
            x = b.conv(f"t{bi}", x, x.c // 2, 1, 1, "valid")
            x = pool(x, 2, 2, "valid")
    x = global_pool(x)
    b.dense("fc", x, 1000, 1)
    return b.to_json()


# --------------------------------------------------------------------------
# Inception-v3


def inception_v3(size: int) -> dict:
    b = _Builder(f"inception_v3_{size}", "cnn")
    x = b.conv("stem1", None, 32, 3, 2, "valid", in_shape=(size, size, 3))
    x = b.conv("stem2", x, 32, 3, 1, "valid")
    x = b.conv("stem3", x, 64, 3, 1, "same")
    x = pool(x, 3, 2, "valid")
    x = b.conv("stem4", x, 80, 1, 1, "valid")
    x = b.conv("stem5", x, 192, 3, 1, "valid")
    x = pool(x, 3, 2, "valid")

    for mi, pool_c in enumerate((32, 64, 64)):
        t = f"m{mi}"
        b1 = b.conv(f"{t}_1x1", x, 64, 1)
        b5 = b.conv(f"{t}_5x5a", x, 48, 1)
        b5 = b.conv(f"{t}_5x5b", b5, 64, 5)
        b3 = b.conv(f"{t}_3x3a", x, 64, 1)
        b3 = b.conv(f"{t}_3x3b", b3, 96, 3)
        b3 = b.conv(f"{t}_3x3c", b3, 96, 3)
        bp = b.conv(f"{t}_pool", pool(x, 3, 1, "same"), pool_c, 1)
        x = concat(b1, b5, b3, bp)

    b3 = b.conv("m3_3x3", x, 384, 3, 2, "valid")
    bd = b.conv("m3_dbla", x, 64, 1)
    bd = b.conv("m3_dblb", bd, 96, 3)
    bd = b.conv("m3_dblc", bd, 96, 3, 2, "valid")
    x = concat(b3, bd, pool(x, 3, 2, "valid"))

    for mi, c7 in zip((4, 5, 6, 7), (128, 160, 160, 192)):
        t = f"m{mi}"
        b1 = b.conv(f"{t}_1x1", x, 192, 1)
        b7 = b.conv(f"{t}_7a", x, c7, 1)
        b7 = b.conv(f"{t}_7b", b7, c7, (1, 7))
        b7 = b.conv(f"{t}_7c", b7, 192, (7, 1))
        bd = b.conv(f"{t}_d7a", x, c7, 1)
        bd = b.conv(f"{t}_d7b", bd, c7, (7, 1))
        bd = b.conv(f"{t}_d7c", bd, c7, (1, 7))
        bd = b.conv(f"{t}_d7d", bd, c7, (7, 1))
        bd = b.conv(f"{t}_d7e", bd, 192, (1, 7))
        bp = b.conv(f"{t}_pool", pool(x, 3, 1, "same"), 192, 1)
        x = concat(b1, b7, bd, bp)

    b3 = b.conv("m8_3a", x, 192, 1)
    b3 = b.conv("m8_3b", b3, 320, 3, 2, "valid")
    b7 = b.conv("m8_7a", x, 192, 1)
    b7 = b.conv("m8_7b", b7, 192, (1, 7))
    b7 = b.conv("m8_7c", b7, 192, (7, 1))
    b7 = b.conv("m8_7d", b7, 192, 3, 2, "valid")
    x = concat(b3, b7, pool(x, 3, 2, "valid"))

    for mi in (9, 10):
        t = f"m{mi}"
        b1 = b.conv(f"{t}_1x1", x, 320, 1)
        b3 = b.conv(f"{t}_3a", x, 384, 1)
        b3 = concat(b.conv(f"{t}_3b1", b3, 384, (1, 3)), b.conv(f"{t}_3b2", b3, 384, (3, 1)))
        bd = b.conv(f"{t}_da", x, 448, 1)
        bd = b.conv(f"{t}_db", bd, 384, 3)
        bd = concat(b.conv(f"{t}_dc1", bd, 384, (1, 3)), b.conv(f"{t}_dc2", bd, 384, (3, 1)))
        bp = b.conv(f"{t}_pool", pool(x, 3, 1, "same"), 192, 1)
        x = concat(b1, b3, bd, bp)
    x = global_pool(x)
    b.dense("fc", x, 1000, 1)
    return b.to_json()


# --------------------------------------------------------------------------
# BERT


def bert(variant: str, seq: int) -> dict:
    n_layers, hidden, heads = BERT_CONFIGS[variant]
    dh = hidden // heads
    b = _Builder(f"{variant}_s{seq}", "transformer")
    x: Optional[Tensor] = None
    for li in range(n_layers):
        t = f"l{li}"
        q = b.dense(f"{t}_q", x, hidden, seq, in_f=hidden)
        k = b.dense(f"{t}_k", x, hidden, seq, in_f=hidden)
        v = b.dense(f"{t}_v", x, hidden, seq, in_f=hidden)
        ctx = []
        for h in range(heads):
            cols = [h * dh, (h + 1) * dh]
            s = b.matmul(
                f"{t}_h{h}_score",
                {"id": q.edges[0]["id"], "cols": cols},
                {"id": k.edges[0]["id"], "cols": cols, "transpose": True},
                dh,
                seq,
                seq,
            )
            ctx.append(
                b.matmul(
                    f"{t}_h{h}_ctx",
                    {"id": s.edges[0]["id"]},
                    {"id": v.edges[0]["id"], "cols": cols},
                    seq,
                    dh,
                    seq,
                )
            )
        a = b.dense(f"{t}_attn_out", concat(*ctx), hidden, seq)
        h1 = a if x is None else add(a, x)
        f1 = b.dense(f"{t}_ffn1", h1, 4 * hidden, seq)
        f2 = b.dense(f"{t}_ffn2", f1, hidden, seq)
        x = add(f2, h1)
    return b.to_json()


def toy_fig5() -> dict:
    """Two-by-two tiled matmul used by the scheduling walkthrough tests."""
    return {
        "name": "toy_2x2",
        "family": "transformer",
        "batch": 1,
        "layers": [
            {"id": "mm", "kind": "dense", "in_features": 64, "out_features": 64, "seq": 64, "predecessors": []}
        ],
    }


def all_models() -> Dict[str, dict]:
    out: Dict[str, dict] = {}
    for size in CNN_SIZES:
        for d in (50, 101, 152):
            m = resnet(d, size)
            out[m["name"]] = m
        for d in (121, 169, 201):
            m = densenet(d, size)
            out[m["name"]] = m
        m = inception_v3(size)
        out[m["name"]] = m
    for variant in BERT_CONFIGS:
        for seq in BERT_SEQ_LENS:
            m = bert(variant, seq)
            out[m["name"]] = m
    out["toy_2x2"] = toy_fig5()
    return out


def write_all(out_dir: Path) -> List[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, m in sorted(all_models().items()):
        p = out_dir / f"{name}.json"
        p.write_text(json.dumps(m, separators=(",", ":")) + "\n")
        written.append(p)
    return written


def main(argv: Optional[Sequence[str]] = None) -> None:
    ap = argparse.ArgumentParser(description="Regenerate the shipped model descriptions.")
    ap.add_argument("--out", type=Path, default=models_dir())
    args = ap.parse_args(argv)
    paths = write_all(args.out)
    print(f"wrote {len(paths)} model files to {args.out}")


if __name__ == "__main__":
    main()
